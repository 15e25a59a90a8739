import pytest

from adclab.config import DEFAULT_SEEDS, ExperimentConfig, dump_config, load_config, parse_config
from adclab.errors import ConfigError


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.seeds == DEFAULT_SEEDS == (1993, 0, 1, 2, 3)
    assert (cfg.train.lam, cfg.train.temperature, cfg.iterations, cfg.m, cfg.sdc_sigma) == (10, 2, 3, 100, 0.3)
    assert (cfg.train.momentum, cfg.train.weight_decay) == (0.9, 5e-4)


def test_parse_sections_and_aliases():
    cfg = parse_config("""
[experiment]
method = nme
T = 4
seeds = 5, 6
oracle_eval = yes

[data]
n_classes = 8
dim = 16

[train]
lambda = 3
epochs_first_task = 4

[attack]
alpha = 0.5

[sdc]
sigma = 1.5

[nme]
exemplars = 0
policy = random
""")
    assert (cfg.method, cfg.T, cfg.seeds, cfg.oracle_eval) == ("nme", 4, (5, 6), True)
    assert (cfg.data.n_classes, cfg.data.dim, cfg.train.lam, cfg.train.epochs_first_task) == (8, 16, 3.0, 4)
    assert (cfg.alpha, cfg.sdc_sigma, cfg.exemplars, cfg.exemplar_policy) == (0.5, 1.5, 0, "random")


def test_dump_parse_roundtrip(tmp_path):
    cfg = ExperimentConfig(method="sdc", T=2, seeds=(4,), alpha=0.25)
    (tmp_path / "c.ini").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.ini") == cfg


@pytest.mark.parametrize("text", [
    "[experiment]\nmethod = magic\n",
    "[experiment]\nseeds =\n",
    "[experiment]\nmethod = nme\n",
    "[experiment]\nmethod = adc\n[nme]\nexemplars = 5\n",
    "[attack]\niterations = -1\n",
    "[bogus]\nx = 1\n",
    "[attack]\nwhatever = 1\n",
    "[train]\ntemperature = 0\n",
    "[data]\ndim = abc\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)
