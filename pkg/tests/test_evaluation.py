import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acpc import evaluation as ev
from acpc.evaluation import FeatureTable


def onehot_table(rng, n_seq=6, length=60, classes=4, noise=0.0):
    feats, labels = [], []
    for _ in range(n_seq):
        lab = np.repeat(rng.integers(0, classes, size=length // 6), 6)
        feats.append(np.eye(classes)[lab] + noise * rng.normal(size=(length, classes)))
        labels.append(lab)
    return FeatureTable.from_sequences(feats, labels, [i % 2 for i in range(n_seq)])


# -- linear probe ----------------------------------------------------------------

def test_probe_separable_features(rng):
    tr, va = ev.linear_probe(onehot_table(rng))
    assert tr >= 0.99 and va >= 0.99


def test_probe_noise_is_at_chance(rng):
    n, classes = 4000, 4
    table = FeatureTable.from_sequences([rng.normal(size=(n, 8))], [rng.integers(0, classes, n)])
    _, va = ev.linear_probe(table)
    sigma = math.sqrt(0.25 * 0.75 / (0.2 * n))
    assert abs(va - 0.25) < 3 * sigma + 0.01


def test_probe_label_permutation_invariant(rng):
    table = onehot_table(rng, noise=0.8)
    perm = np.array([2, 0, 3, 1])
    other = FeatureTable(table.features, perm[table.labels], table.seq_ids, table.channel_ids, table.positions)
    assert ev.linear_probe(table) == ev.linear_probe(other)


def test_probe_single_class():
    with pytest.raises(ValueError):
        ev.linear_probe(FeatureTable.from_sequences([np.ones((10, 2))], [np.zeros(10)]))


def test_table_length_mismatch():
    with pytest.raises(ValueError):
        FeatureTable(np.zeros((3, 2)), np.zeros(2), np.zeros(3), np.zeros(3), np.zeros(3))


# -- k-means -----------------------------------------------------------------------

def test_kmeans_k_equals_n(rng):
    X = rng.normal(size=(7, 3))
    assert ev.kmeans(X, 7).distortion == pytest.approx(0.0, abs=1e-12)


def test_kmeans_single_cluster_of_pm_one():
    X = np.array([[-1.0], [1.0]] * 5)
    res = ev.kmeans(X, 1)
    assert res.distortion == pytest.approx(1.0)
    np.testing.assert_allclose(res.centroids, [[0.0]], atol=1e-15)


def test_kmeans_history_monotone(rng):
    X = np.concatenate([rng.normal(loc=c, size=(50, 2)) for c in (-5, 0, 5)])
    res = ev.kmeans(X, 3, seed=1)
    assert all(b <= a + 1e-12 for a, b in zip(res.history, res.history[1:]))
    assert ev.nmi(res.assignments, np.repeat([0, 1, 2], 50)) == pytest.approx(1.0)


def test_kmeans_against_exhaustive_partitions(rng):
    # the optimum over all 2-partitions bounds any Lloyd solution from below
    X = rng.normal(size=(8, 2))
    best = math.inf
    for mask in itertools.product([0, 1], repeat=8):
        m = np.array(mask, bool)
        if m.all() or not m.any():
            continue
        d = ((X[m] - X[m].mean(0)) ** 2).sum() + ((X[~m] - X[~m].mean(0)) ** 2).sum()
        best = min(best, d / 8)
    for s in range(10):
        res = ev.kmeans(X, 2, seed=s)
        assert res.distortion >= best - 1e-12
        # Lloyd fixed point: centroids are member means, points sit at their nearest centroid
        for j in range(2):
            np.testing.assert_allclose(res.centroids[j], X[res.assignments == j].mean(0), atol=1e-12)
        d = ((X[:, None] - res.centroids[None]) ** 2).sum(-1)
        np.testing.assert_array_equal(res.assignments, d.argmin(1))
    # well separated blobs reach the exhaustive optimum
    Y = np.concatenate([X[:4] * 0.1 - 5, X[4:] * 0.1 + 5])
    exhaustive = min(
        (((Y[m] - Y[m].mean(0)) ** 2).sum() + ((Y[~m] - Y[~m].mean(0)) ** 2).sum()) / 8
        for m in (np.array(t, bool) for t in itertools.product([0, 1], repeat=8)) if 0 < sum(m) < 8)
    assert ev.kmeans(Y, 2).distortion == pytest.approx(exhaustive, rel=1e-12)


def test_kmeans_bad_k(rng):
    with pytest.raises(ValueError):
        ev.kmeans(rng.normal(size=(3, 2)), 4)
    with pytest.raises(ValueError):
        ev.kmeans(rng.normal(size=(3, 2)), 0)


# -- NMI -----------------------------------------------------------------------------

def test_nmi_identity_and_relabel():
    a = np.array([0, 0, 1, 1, 2, 2, 2])
    assert ev.nmi(a, a) == pytest.approx(1.0)
    assert ev.nmi(a, (a + 1) % 3) == pytest.approx(1.0)


def test_nmi_constant_clustering():
    assert ev.nmi(np.zeros(6), [0, 1, 0, 1, 2, 2]) == 0.0
    assert ev.nmi(np.zeros(4), np.ones(4)) == 1.0


def test_nmi_worked_example():
    # MI = (2/3) ln 2, H(U) = ln 2, H(V) = ln 3
    value = ev.nmi([0, 0, 0, 1, 1, 1], [0, 0, 1, 1, 2, 2])
    assert value == pytest.approx((4 / 3) * math.log(2) / math.log(6), abs=1e-12)
    assert value == pytest.approx(0.5158037429, abs=1e-9)


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 3)), min_size=1, max_size=40))
def test_nmi_symmetric_and_bounded(pairs):
    a, b = np.array(pairs).T
    v = ev.nmi(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(ev.nmi(b, a), abs=1e-12)


def test_nmi_length_mismatch():
    with pytest.raises(ValueError):
        ev.nmi([0, 1], [0])


# -- similarity structure -----------------------------------------------------------

def test_repeated_frame_has_unit_similarity(rng):
    table = FeatureTable.from_sequences([np.tile(rng.normal(size=(1, 4)), (20, 1))], [np.zeros(20)])
    stats = ev.similarity_stats(table)
    assert stats.consecutive_mean == pytest.approx(1.0)
    assert stats.random_mean == pytest.approx(1.0)
    assert stats.consecutive_hist.sum() == 19


def test_orthogonal_consecutive_frames():
    f = np.eye(4)[np.arange(40) % 4]
    stats = ev.similarity_stats(FeatureTable.from_sequences([f], [np.zeros(40)]))
    assert stats.consecutive_mean == pytest.approx(0.0, abs=1e-15)


def test_histogram_counts_conserved(rng):
    table = onehot_table(rng, noise=0.5)
    s = ev.similarity_stats(table, n_random=500)
    assert s.random_hist.sum() + s.skipped_pairs == 500
    assert s.consecutive_hist.sum() == len(table.features) - 6
    assert len(s.bin_edges) == ev.HIST_BINS + 1


def test_zero_vectors_are_skipped():
    f = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    s = ev.similarity_stats(FeatureTable.from_sequences([f], [np.zeros(3)]), n_random=0)
    assert s.skipped_pairs == 2 and s.consecutive_hist.sum() == 0


def test_periodicity_constant_is_zero():
    seqs = [np.ones((64, 3))] * 2
    assert ev.stride_periodicity(seqs, 8) == pytest.approx(0.0, abs=1e-12)


def test_periodicity_of_position_code_is_one():
    seqs = [np.eye(8)[np.arange(64) % 8] for _ in range(3)]
    assert ev.stride_periodicity(seqs, 8) == pytest.approx(1.0)


def test_periodicity_noise_is_small(rng):
    seqs = [rng.normal(size=(128, 16)) for _ in range(40)]
    assert ev.stride_periodicity(seqs, 8) < 0.02


def test_periodicity_input_checks():
    with pytest.raises(ValueError):
        ev.stride_periodicity([np.ones((20, 2))], 8)
    with pytest.raises(ValueError):
        ev.stride_periodicity([np.ones((20, 2))], 1)


def test_self_similarity(rng):
    f = rng.normal(size=(9, 3))
    S, bounds = ev.self_similarity_matrix(f, np.array([0, 0, 1, 1, 1, 2, 0, 0, 0]))
    np.testing.assert_allclose(S, S.T)
    np.testing.assert_allclose(np.diag(S), (f ** 2).sum(1))
    np.testing.assert_array_equal(bounds, [2, 5, 6])


def test_similarity_file_roundtrip(tmp_path, rng):
    S = rng.normal(size=(5, 5)).astype(np.float32)
    path = tmp_path / "s.bin"
    ev.write_similarity(path, S, np.array([1, 3]))
    blob = path.read_bytes()
    assert blob[:8] == b"ACPCSIM1" and len(blob) == 16 + 4 * 25 + 8
    m, b = ev.read_similarity(path)
    assert m.tobytes() == S.tobytes()
    np.testing.assert_array_equal(b, [1, 3])
    path.write_bytes(blob[:-1])
    with pytest.raises(ValueError):
        ev.read_similarity(path)
    path.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(ValueError):
        ev.read_similarity(path)


# -- DTW and ABX ------------------------------------------------------------------------

@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
@settings(max_examples=60)
def test_dtw_matches_brute_force(n, m, seed):
    r = np.random.default_rng(seed)
    cost = r.integers(0, 3, size=(n, m)).astype(float)  # small integers force ties
    assert ev.dtw_mean_cost(cost) == pytest.approx(ev.brute_force_dtw(cost), abs=1e-12)


def test_dtw_batch_matches_single(rng):
    costs = [rng.random((rng.integers(1, 6), rng.integers(1, 6))) for _ in range(12)]
    batch = ev.dtw_mean_cost_batch(costs)
    np.testing.assert_allclose(batch, [ev.dtw_mean_cost(c) for c in costs], atol=1e-15)


def test_dtw_identical_segments_cost_zero(rng):
    a = rng.normal(size=(5, 3))
    assert ev.dtw_mean_cost(ev.angular_distances(a, a)) == pytest.approx(0.0, abs=1e-7)


def test_angular_distance_range():
    d = ev.angular_distances(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, 0.0]]))
    np.testing.assert_allclose(d[0], [0.0, 0.5, 1.0, 0.5])


def test_abx_tie_counts_half():
    a = np.array([[1.0, 0.0]])
    assert ev.abx_triple_error(a, a, a) == 0.5
    assert ev.abx_triple_error(a, np.array([[0.0, 1.0]]), a) == 0.0
    assert ev.abx_triple_error(np.array([[0.0, 1.0]]), a, a) == 1.0


def test_abx_perfect_features(rng):
    table = onehot_table(rng, n_seq=8)
    within, across = ev.abx_error(table, count=300)
    assert within == 0.0 and across == 0.0


def test_abx_random_features_near_half(rng):
    feats = [rng.normal(size=(60, 6)) for _ in range(8)]
    labels = [np.repeat(rng.integers(0, 3, 10), 6) for _ in range(8)]
    table = FeatureTable.from_sequences(feats, labels, [i % 2 for i in range(8)])
    within, across = ev.abx_error(table, count=600)
    assert abs(within - 0.5) < 0.08 and abs(across - 0.5) < 0.08


def test_abx_is_seeded(rng):
    table = onehot_table(rng, noise=1.0, n_seq=8)
    assert ev.abx_error(table, seed=3, count=200) == ev.abx_error(table, seed=3, count=200)


def test_abx_needs_two_channels_and_labels(rng):
    table = FeatureTable.from_sequences([np.eye(2)[np.repeat([0, 1], 6)]], [np.repeat([0, 1], 6)])
    with pytest.raises(ValueError):
        ev.abx_error(table, count=10)
    single = FeatureTable.from_sequences([np.ones((6, 2))], [np.zeros(6)])
    with pytest.raises(ValueError):
        ev.abx_error(single, count=10)


def test_segments_split_on_label_change():
    table = FeatureTable.from_sequences([np.arange(7.0)[:, None]], [np.array([1, 1, 2, 2, 2, 1, 1])], [3])
    segs = ev.collect_segments(table)
    assert [(len(s.features), s.label, s.channel) for s in segs] == [(2, 1, 3), (3, 2, 3), (2, 1, 3)]


# -- report --------------------------------------------------------------------------

def test_report_csv(tmp_path):
    r = ev.EvalReport()
    r.add("probe_acc_c", "val", 0.5)
    r.histograms["h"] = (np.linspace(-1, 1, 3), np.array([4, 5]))
    r.write_csv(tmp_path / "r.csv")
    r.write_histograms(tmp_path / "h")
    assert (tmp_path / "r.csv").read_text().splitlines() == ["name,split,value", "probe_acc_c,val,0.5"]
    assert (tmp_path / "h" / "h.csv").read_text().splitlines() == ["bin_left,count", "-1.0,4", "0.0,5"]
    assert r.get("probe_acc_c", "val") == 0.5
    with pytest.raises(KeyError):
        r.get("missing")
