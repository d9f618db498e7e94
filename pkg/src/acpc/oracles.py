"""Brute-force reference checks shared by the ``oracle`` subcommand and the test suite.

Each suite returns a :class:`SuiteResult`; none of them reuses the dynamic
programs it is checking.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from . import alignment as al
from . import core_math as cm
from . import evaluation as ev
from .core_math import Tensor
from .model import ModelConfig, PredictionHeads, contextualize, encode, init_model


@dataclass
class SuiteResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst={self.worst:.3g} tol={self.tolerance:g} ({self.seconds:.2f}s) {self.detail}".rstrip()


def _timed(name, tolerance, fn) -> SuiteResult:
    t0 = time.perf_counter()
    worst, detail = fn()
    passed = bool(worst < tolerance)
    return SuiteResult(name, passed, float(worst), tolerance, time.perf_counter() - t0, detail)


def brute_force_paths(K: int, M: int) -> list[tuple[int, ...]]:
    """All alignment paths via choice of the K-1 advance columns."""
    out = []
    for cuts in itertools.combinations(range(1, M), K - 1):
        path, k = [], 0
        for m in range(M):
            if m in cuts:
                k += 1
            path.append(k)
        out.append(tuple(path))
    return out


def _path_scores(L: np.ndarray, paths) -> np.ndarray:
    cols = np.arange(L.shape[1])
    return np.array([math.fsum(L[list(p), cols]) for p in paths])


def _exact_logsumexp(values: np.ndarray) -> float:
    mx = float(values.max())
    return mx + math.log(math.fsum(math.exp(v - mx) for v in values))


def alignment_suite(trials: int = 100, max_m: int = 7, seed: int = 0) -> SuiteResult:
    """Expected and best path scores against enumeration, plus path counts."""

    def run():
        rng = np.random.default_rng(seed)
        worst_expected = worst_best = 0.0
        count_errors = 0
        with cm.precision("verify"):
            for M in range(1, max_m + 1):
                for K in range(1, M + 1):
                    paths = brute_force_paths(K, M)
                    count_errors += len(paths) != math.comb(M - 1, K - 1)
                    count_errors += len(paths) != len(al.enumerate_paths(K, M))
                    for _ in range(trials):
                        L = -rng.exponential(2.0, size=(K, M))
                        scores = _path_scores(L, paths)
                        expected, _ = al.expected_path_score(L)
                        _, best = al.best_path(L)
                        worst_expected = max(worst_expected, abs(expected - _exact_logsumexp(scores)))
                        worst_best = max(worst_best, abs(best - scores.max()))
        worst = max(worst_expected / 1e-9, worst_best / 1e-12, count_errors)
        return worst, f"expected={worst_expected:.2g} best={worst_best:.2g} count_errors={count_errors}"

    # worst is expressed in units of each quantity's own tolerance
    return _timed("alignment", 1.0, run)


def blank_trick_suite(trials: int = 100, seed: int = 1) -> SuiteResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = worst_mass = 0.0
        with cm.precision("verify"):
            for _ in range(trials):
                M = int(rng.integers(1, 13))
                K = int(rng.integers(1, M + 1))
                L = -rng.exponential(2.0, size=(K, M))
                expected, _ = al.expected_path_score(L)
                res = al.ctc_blank_trick(L)
                worst = max(worst, abs(expected - res.restored))
                worst_mass = max(worst_mass, res.blank_mass)
        return max(worst / 1e-6, worst_mass / 1e-20), f"identity={worst:.2g} blank_mass={worst_mass:.2g}"

    return _timed("blank-trick", 1.0, run)


def _random_batch(rng, B=4, T=24, D=6, H=5, K=4, N=5, groups=2):
    z = Tensor(rng.normal(size=(B, T, D)))
    c = Tensor(rng.normal(size=(B, T, H)))
    heads = PredictionHeads(cm.parameter(rng.normal(size=(K, D, H)) * 0.3), cm.parameter(rng.normal(size=(K, D)) * 0.1))
    gid = np.arange(B) * groups // B
    neg = al.sample_negatives(gid, T, T - K, N, rng)
    return z, c, heads, neg


def cpc_equivalence_suite(batches: int = 10, seed: int = 2) -> SuiteResult:
    def run():
        rng = np.random.default_rng(seed)
        mismatches = 0
        for precision in ("train", "verify"):
            with cm.precision(precision):
                for _ in range(batches):
                    z, c, heads, neg = _random_batch(rng)
                    K = heads.n_predictions
                    a = al.acpc_loss(z, c, heads, neg, K).data
                    b = al.cpc_loss(z, c, heads, neg).data
                    mismatches += a.tobytes() != b.tobytes()
        return mismatches, f"mismatched batches={mismatches}"

    return _timed("cpc-equivalence", 0.5, run)


def model_gradient_error(seed: int = 3, D: int = 4, H: int = 4, K: int = 2, M: int = 3, N: int = 2,
                         B: int = 2, n_samples: int = 48, epsilon: float = 1e-5) -> float:
    """Worst relative error of acpc_loss gradients for every model parameter."""
    with cm.precision("verify"):
        rng = np.random.default_rng(seed)
        cfg = ModelConfig(latent_dim=D, hidden_dim=H, n_predictions=K)
        model = init_model(cfg, seed)
        samples = rng.normal(size=(B, n_samples))
        T = encode(samples, model.encoder).shape[1]
        neg = al.sample_negatives(np.zeros(B, dtype=int), T, T - M, N, rng)

        def loss() -> Tensor:
            z = encode(samples, model.encoder)
            return al.acpc_loss(z, contextualize(z, model.context), model.heads, neg, M)

        model.zero_grad()
        loss().backward()
        params = model.parameters()
        analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        scale = max(1.0, max(float(np.abs(g).max()) for g in analytic.values()))
        worst = 0.0
        for name, p in params.items():
            numeric = cm.numerical_gradient(lambda: float(loss().data), p.data, epsilon)
            denom = np.maximum(np.maximum(np.abs(analytic[name]), np.abs(numeric)), 1e-7 * scale)
            worst = max(worst, float(np.max(np.abs(analytic[name] - numeric) / denom)))
        return worst


def gradient_suite() -> SuiteResult:
    return _timed("model-gradient", 1e-4, lambda: (model_gradient_error(), "D=H=4 K=2 M=3 N=2"))


def dtw_suite(trials: int = 200, seed: int = 4) -> SuiteResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(trials):
            a = rng.normal(size=(int(rng.integers(1, 5)), 3))
            b = rng.normal(size=(int(rng.integers(1, 5)), 3))
            cost = ev.angular_distances(a, b)
            worst = max(worst, abs(ev.dtw_mean_cost(cost) - ev.brute_force_dtw(cost)))
        return worst, ""

    return _timed("dtw", 1e-12, run)


def kmeans_suite(trials: int = 20, seed: int = 5) -> SuiteResult:
    """k=2 on tiny sets against the best of all 2-partitions."""

    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(trials):
            X = np.concatenate([rng.normal(size=(4, 2)), rng.normal(size=(4, 2)) + 4.0])
            best = np.inf
            for mask in range(1, 2 ** (len(X) - 1)):
                sel = np.array([(mask >> i) & 1 for i in range(len(X))], dtype=bool)
                d = (((X[sel] - X[sel].mean(0)) ** 2).sum() + ((X[~sel] - X[~sel].mean(0)) ** 2).sum()) / len(X)
                best = min(best, d)
            worst = max(worst, ev.kmeans(X, 2, seed=int(rng.integers(1 << 30))).distortion - best)
        return worst, ""

    return _timed("kmeans", 1e-9, run)


SUITES = {
    "alignment": alignment_suite,
    "blank-trick": blank_trick_suite,
    "cpc-equivalence": cpc_equivalence_suite,
    "model-gradient": gradient_suite,
    "dtw": dtw_suite,
    "kmeans": kmeans_suite,
}


def run_all() -> list[SuiteResult]:
    return [fn() for fn in SUITES.values()]
