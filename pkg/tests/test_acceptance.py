"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

The directional comparisons share one experiment: five seeds of CPC (K = M = 12)
and ACPC (M = 12, K = 6 and 8), 50 epochs each on the default corpus, followed
by the evaluation battery.  It takes close to half an hour on one core.
"""
import math
import time

import numpy as np
import pytest
from scipy import stats

from acpc import core_math as cm
from acpc import data as dt
from acpc import evaluation as ev
from acpc import oracles
from acpc import train as tr
from acpc.cli import bench_losses

SEEDS = range(5)
SETTINGS = {"cpc": ("cpc", 12), "acpc6": ("acpc", 6), "acpc8": ("acpc", 8)}
EXPERIMENT_BUDGET_S = 30 * 60


@pytest.fixture
def report(capsys):
    def emit(criterion: int, passed: bool, text: str):
        with capsys.disabled():
            print(f"\n{'PASS' if passed else 'FAIL'} criterion {criterion}: {text}")
        assert passed, text

    return emit


# -- exact oracles -------------------------------------------------------------------

def test_criterion_01_alignment_oracle(report):
    r = oracles.alignment_suite(trials=100, max_m=7)
    report(1, r.passed and r.seconds < 10, f"{r.detail}, {r.seconds:.1f}s (limit 10s)")


def test_criterion_02_blank_trick(report):
    r = oracles.blank_trick_suite(trials=100)
    report(2, r.passed, r.detail)


def test_criterion_03_cpc_equivalence(report):
    r = oracles.cpc_equivalence_suite(batches=10)
    report(3, r.passed, f"{r.detail or 'bit-identical'} on 10 batches")


def test_criterion_04_model_gradient(report):
    r = oracles.gradient_suite()
    report(4, r.passed and r.seconds < 30, f"max relative error {r.worst:.2g} (tol 1e-4), {r.seconds:.1f}s (limit 30s)")


def test_criterion_08_step_cost(report):
    tr.tune_allocator()
    with cm.precision("train"):
        fast, full = bench_losses([(4, 12, 128), (12, 12, 128)])
    ratio = fast["ms"] / full["ms"]
    counts_ok = fast["per_position"] == 4 * (12 + 128) and full["per_position"] == 12 * (12 + 128)
    report(8, ratio <= 0.7 and counts_ok,
           f"time ratio {ratio:.3f} (limit 0.7; {fast['ms']:.1f} ms vs {full['ms']:.1f} ms), "
           f"scores per position {fast['per_position']:g} and {full['per_position']:g}")


def test_criterion_10_determinism_and_roundtrips(report, tmp_path):
    cfg = tr.RunConfig(K=2, M=3, N=4, latent_dim=8, hidden_dim=8, batch_size=8, groups=2, epochs=2, channels=2,
                       sequences_per_channel=16, sequence_length=256).validate()
    data = tr.load_or_generate(cfg)
    logs = []
    for name in ("a", "b"):
        state, _ = tr.train(cfg, data, out_dir=tmp_path / name)
        rows = tr.MetricsLog.read(tmp_path / name / "metrics.csv").rows
        logs.append([{k: v for k, v in r.items() if k != "wall_ms"} for r in rows])
    same_logs = logs[0] == logs[1] and len(logs[0]) > 0

    corpus = dt.generate(dt.SyntheticSpec(), 0)
    dt.write_dataset(corpus, tmp_path / "corpus.bin")
    blob = (tmp_path / "corpus.bin").read_bytes()
    dataset_ok = dt.dataset_to_bytes(dt.read_dataset(tmp_path / "corpus.bin")) == blob
    dataset_ok &= dt.read_dataset(tmp_path / "corpus.bin").equals(corpus)

    ckpt = tmp_path / "a" / "epoch_002.ckpt"
    back, back_cfg = tr.load_checkpoint(ckpt)
    ckpt_ok = tr.state_to_bytes(back, back_cfg) == ckpt.read_bytes()
    ckpt_ok &= tr.state_to_bytes(state, cfg) == ckpt.read_bytes()
    report(10, same_logs and dataset_ok and ckpt_ok,
           f"metric logs identical={same_logs}, dataset round-trip={dataset_ok}, checkpoint round-trip={ckpt_ok}")


# -- directional comparisons -----------------------------------------------------------

@pytest.fixture(scope="module")
def experiment():
    tr.tune_allocator()
    t0 = time.perf_counter()
    corpus = dt.generate(dt.SyntheticSpec(), 0)
    analysed = list(range(0, len(corpus), 4))
    results = {}
    for seed in SEEDS:
        for name, (loss, K) in SETTINGS.items():
            cfg = tr.RunConfig(loss=loss, K=K, M=12, epochs=50, init_seed=seed, train_seed=seed)
            state, _ = tr.train(cfg, corpus)
            rep = ev.evaluate(state.model, corpus, seed=0, sequences=analysed)
            results[name, seed] = rep
            print(f"{name} seed {seed}: " + ", ".join(f"{n}/{s}={v:.4f}" for n, s, v in rep.rows), flush=True)
    return results, time.perf_counter() - t0


def per_seed(results, name, metric, split):
    return np.array([results[name, s].get(metric, split) for s in SEEDS])


def test_criterion_05_probe_accuracy(report, experiment):
    results, seconds = experiment
    cpc = per_seed(results, "cpc", "probe_acc_c", "val")
    parts, ok = [], seconds < EXPERIMENT_BUDGET_S
    for name in ("acpc6", "acpc8"):
        acpc = per_seed(results, name, "probe_acc_c", "val")
        p = stats.ttest_rel(acpc, cpc, alternative="greater").pvalue
        ok &= bool(acpc.mean() > cpc.mean() and not math.isnan(p) and p < 0.05)
        parts.append(f"{name} {acpc.mean():.4f} vs cpc {cpc.mean():.4f} (p={p:.3g})")
    parts.append(f"runtime {seconds / 60:.1f} min (limit 30)")
    report(5, ok, "; ".join(parts))


def wins(results, metric, split, better, name="acpc8"):
    a = per_seed(results, name, metric, split)
    c = per_seed(results, "cpc", metric, split)
    return int(np.sum(better(a, c))), a, c


def test_criterion_06_similarity_and_clustering(report, experiment):
    results, _ = experiment
    n_cos, a_cos, c_cos = wins(results, "cos_consecutive_mean", "z", np.greater)
    n_nmi, a_nmi, c_nmi = wins(results, "nmi_k16", "z", np.greater)
    report(6, n_cos >= 4 and n_nmi >= 4,
           f"consecutive cosine higher in {n_cos}/5 seeds (acpc8 {a_cos.mean():.4f} vs cpc {c_cos.mean():.4f}); "
           f"NMI k=16 higher in {n_nmi}/5 (acpc8 {a_nmi.mean():.4f} vs cpc {c_nmi.mean():.4f})")


def test_criterion_07_stride_periodicity(report, experiment):
    results, _ = experiment
    n, a, c = wins(results, "stride_periodicity", "z", np.less)
    report(7, n >= 4, f"periodicity lower in {n}/5 seeds (acpc8 {a.mean():.5f} vs cpc {c.mean():.5f})")


def test_criterion_09_abx(report, experiment):
    results, _ = experiment
    n_w, a_w, c_w = wins(results, "abx_within", "c", np.less_equal)
    n_a, a_a, c_a = wins(results, "abx_across", "c", np.less_equal)
    report(9, n_w >= 4 and n_a >= 4,
           f"within ABX <= cpc in {n_w}/5 seeds ({a_w.mean():.4f} vs {c_w.mean():.4f}); "
           f"across in {n_a}/5 ({a_a.mean():.4f} vs {c_a.mean():.4f})")
