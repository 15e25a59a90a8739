"""Self-tests behind ``adclab check``: finite-difference gradients and brute-force oracles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attack import select_closest
from .data import LabeledDataset
from .drift import DriftEstimate, drift_quality
from .evaluation import expected_backward_passes
from .net import CrossEntropy, Network, PrototypeMSE, ReLU, convnet, mlp
from .proto import PrototypeStore, compute_prototypes, ncm_predict

FD_STEP = 1e-3
REL_TOL = 1e-4
ABS_TOL = 1e-6
MIN_FRACTION = 0.99
KINK_MARGIN = 0.05  # central differences are only valid away from ReLU kinks


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def central_difference(f: Callable[[], float], arr: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Numerical gradient of ``f`` w.r.t. ``arr``, perturbing ``arr`` in place."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return grad


def gradient_agreement(analytic: np.ndarray, numeric: np.ndarray) -> tuple[bool, float, float]:
    """(passed, fraction under REL_TOL, worst absolute error among the rest)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    err = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    rel_ok = err <= REL_TOL * scale
    frac = float(rel_ok.mean()) if a.size else 1.0
    rest = err[~rel_ok]
    worst = float(rest.max()) if rest.size else 0.0
    return frac >= MIN_FRACTION and worst < ABS_TOL, frac, worst


def _relu_margin(net: Network, x: np.ndarray) -> float:
    """Smallest |input| seen by any ReLU on this batch."""
    h, margin = x, np.inf
    for layer in net.layers:
        if isinstance(layer, ReLU):
            margin = min(margin, float(np.min(np.abs(h))))
        h = layer.forward(h)
    return margin


def _random_net(rng, conv: bool) -> tuple[Network, np.ndarray]:
    while True:
        net, x = _draw(rng, conv)
        if _relu_margin(net, x) > KINK_MARGIN:
            return net, x


def _draw(rng, conv: bool) -> tuple[Network, np.ndarray]:
    seed = int(rng.integers(2**31))
    if conv:
        net = convnet((2, 5, 5), channels=3, kernel=3, stride=2, feature_dim=6, seed=seed,
                      dtype=np.float64)
    else:
        net = mlp(7, (9,), 5, seed=seed, dtype=np.float64, final_relu=bool(rng.integers(2)))
    net.extend_head(4, rng)
    x = rng.standard_normal((3, net.input_dim))
    for p in net.parameters():
        p += 0.1 * rng.standard_normal(p.shape)  # non-zero biases
    return net, x


def check_gradients(draws: int = 20, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_frac = 1.0
    for d in range(draws):
        net, x = _random_net(rng, conv=d % 2 == 1)
        proto = rng.standard_normal(net.feature_dim)
        obj = PrototypeMSE(proto)
        labels = rng.integers(0, net.num_classes, size=len(x))
        ce = CrossEntropy()

        gx = net.input_gradient(x, obj)
        nx = central_difference(lambda: obj(net.forward_features(x))[0], x)
        ok, frac, worst = gradient_agreement(gx, nx)
        worst_frac = min(worst_frac, frac)
        if not ok:
            return CheckResult("gradients", False, f"draw {d}: input grad frac={frac:.4f} worst={worst:.2e}")

        _, grads = net.param_gradient(x, labels, ce)
        for j, p in enumerate(net.parameters()):
            num = central_difference(lambda: ce(net.forward_logits(x), labels)[0], p)
            ok, frac, worst = gradient_agreement(grads[j], num)
            worst_frac = min(worst_frac, frac)
            if not ok:
                return CheckResult("gradients", False,
                                   f"draw {d} param {j}: frac={frac:.4f} worst={worst:.2e}")
    return CheckResult("gradients", True, f"{draws} draws, min fraction within tolerance {worst_frac:.4f}")


def check_ncm(seed: int = 0, n_protos: int = 50, n_queries: int = 1000) -> CheckResult:
    rng = np.random.default_rng(seed)
    store = PrototypeStore(8)
    for k in range(n_protos):
        store.set(k, rng.standard_normal(8), 0)
    q = rng.standard_normal((n_queries, 8))
    fast = ncm_predict(q, store)
    brute = []
    for e in q:
        best, best_d = None, np.inf
        for k in store.classes:
            dist = float(np.sqrt(np.sum((e - store[k]) ** 2)))
            if dist < best_d:
                best, best_d = k, dist
        brute.append(best)
    n_bad = int(np.sum(fast != np.array(brute)))
    return CheckResult("ncm_vs_bruteforce", n_bad == 0, f"{n_bad} mismatches in {n_queries}")


def check_prototypes(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    net = mlp(6, (10,), 4, seed=seed)
    x = rng.standard_normal((300, 6)).astype(np.float32)
    y = rng.integers(0, 5, size=300)
    store = compute_prototypes(net, LabeledDataset(x, y, (-10, 10)))
    feats = net.forward_features(x).astype(np.float64)
    worst = 0.0
    for k in store.classes:
        rows = feats[y == k]
        mean = np.zeros(4)
        for r in rows:
            mean += r
        mean /= len(rows)
        # second pass: correct with the mean residual
        mean += sum(r - mean for r in rows) / len(rows)
        worst = max(worst, float(np.max(np.abs(mean - store[k]))))
    return CheckResult("prototypes_vs_two_pass", worst < 1e-6, f"max abs diff {worst:.2e}")


def check_drift_quality(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    est, truth = DriftEstimate("adc"), DriftEstimate("oracle")
    for k in range(30):
        est.add(k, rng.standard_normal(16), 1)
        truth.add(k, rng.standard_normal(16), 1)
    q = drift_quality(est, truth)
    worst = 0.0
    for k in range(30):
        a, b = est.deltas[k].tolist(), truth.deltas[k].tolist()
        dot = sum(u * v for u, v in zip(a, b))
        na = sum(u * u for u in a) ** 0.5
        nb = sum(v * v for v in b) ** 0.5
        worst = max(worst, abs(q[k] - dot / (na * nb)))
    return CheckResult("drift_quality_vs_cosine", worst < 1e-9, f"max abs diff {worst:.2e}")


def check_select_closest(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    net = mlp(5, (8,), 4, seed=seed)
    x = rng.standard_normal((200, 5)).astype(np.float32)
    p = rng.standard_normal(4)
    got = select_closest(net, x, p, 37)
    feats = net.forward_features(x).astype(np.float64)
    d = [(float(np.sum((f - p) ** 2)), i) for i, f in enumerate(feats)]
    want = [i for _, i in sorted(d)[:37]]
    return CheckResult("select_closest_vs_sort", list(got) == want, "")


def check_overhead() -> CheckResult:
    n = expected_backward_passes(10, 10, 3)
    return CheckResult("backward_passes_10x10_i3", n == 1350, f"{n}")


def run_self_checks(quick: bool = False) -> list[CheckResult]:
    return [
        check_gradients(draws=4 if quick else 20),
        check_ncm(),
        check_prototypes(),
        check_drift_quality(),
        check_select_closest(),
        check_overhead(),
    ]
