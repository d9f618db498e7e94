"""Frozen-feature analyses: linear probe, k-means + NMI, ABX, similarity structure."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import core_math as cm
from . import data as dt
from .model import Model, contextualize, encode


@dataclass
class FeatureTable:
    features: np.ndarray  # (n, D)
    labels: np.ndarray  # (n,)
    seq_ids: np.ndarray
    channel_ids: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        n = len(self.features)
        if not (len(self.labels) == len(self.seq_ids) == len(self.channel_ids) == len(self.positions) == n):
            raise ValueError("feature table columns differ in length")

    def sequences(self) -> list[np.ndarray]:
        """Row indices of each sequence, in position order."""
        out = []
        for s in np.unique(self.seq_ids):
            rows = np.flatnonzero(self.seq_ids == s)
            out.append(rows[np.argsort(self.positions[rows], kind="stable")])
        return out

    @classmethod
    def from_sequences(cls, feats: Sequence[np.ndarray], labels: Sequence[np.ndarray],
                       channels: Sequence[int] | None = None) -> "FeatureTable":
        channels = channels if channels is not None else [0] * len(feats)
        return cls(
            np.concatenate([np.asarray(f, dtype=np.float64) for f in feats]),
            np.concatenate([np.asarray(l) for l in labels]).astype(np.int64),
            np.concatenate([np.full(len(f), i) for i, f in enumerate(feats)]),
            np.concatenate([np.full(len(f), c) for f, c in zip(feats, channels)]),
            np.concatenate([np.arange(len(f)) for f in feats]),
        )


def extract_features(model: Model, dataset: dt.Dataset, kind: str = "z", sequences: Sequence[int] | None = None,
                     batch_size: int = 32) -> FeatureTable:
    """Latents (``kind='z'``) or contexts (``kind='c'``) with latent-rate labels."""
    if kind not in ("z", "c"):
        raise ValueError("kind must be 'z' or 'c'")
    idx = list(range(len(dataset))) if sequences is None else list(sequences)
    cfg = model.config
    feats, labels, chans = [], [], []
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        samples = np.stack([dataset.sequences[i].samples for i in chunk])
        with cm.precision("verify" if model.heads.weight.data.dtype == np.float64 else "train"):
            z = encode(samples, model.encoder)
            out = z if kind == "z" else contextualize(z, model.context)
        for row, i in enumerate(chunk):
            seq = dataset.sequences[i]
            f = out.data[row]
            feats.append(f)
            spf = len(seq.samples) // len(seq.frame_labels)
            labels.append(dt.latent_labels(seq.frame_labels, len(f), cfg.receptive_field, cfg.rate_reduction, spf))
            chans.append(seq.channel_id)
    table = FeatureTable.from_sequences(feats, labels, chans)
    table.seq_ids = np.asarray(idx)[table.seq_ids]
    return table


# ---------------------------------------------------------------------------
# linear probe


def linear_probe(table: FeatureTable, seed: int = 0, epochs: int = 200, lr: float = 0.5,
                 val_fraction: float = 0.2) -> tuple[float, float]:
    """Train/val frame accuracy of a full-batch softmax regression on frozen features.

    Features are standardized with statistics of the training split.
    """
    classes, y = np.unique(table.labels, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes")
    X = np.asarray(table.features, dtype=np.float64)
    n = len(X)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    val, tr = perm[:n_val], perm[n_val:]
    mu = X[tr].mean(axis=0)
    sd = X[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    Xs = np.hstack([(X - mu) / sd, np.ones((n, 1))])
    C = len(classes)
    W = np.zeros((Xs.shape[1], C))
    Y = np.eye(C)[y[tr]]
    Xt = Xs[tr]
    for _ in range(epochs):
        logits = Xt @ W
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        W -= lr * (Xt.T @ (p - Y)) / len(tr)
    pred = (Xs @ W).argmax(axis=1)
    return float(np.mean(pred[tr] == y[tr])), float(np.mean(pred[val] == y[val]))


# ---------------------------------------------------------------------------
# clustering


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    distortion: float
    history: list[float] = field(default_factory=list)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(features, k: int, seed: int = 0, iters: int = 50) -> KMeansResult:
    """k-means++ seeding then Lloyd iterations; distortion is the mean squared distance."""
    X = np.asarray(features, dtype=np.float64)
    n = len(X)
    if k < 1 or k > n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    C = np.empty((k, X.shape[1]))
    C[0] = X[rng.integers(n)]
    d2 = _sq_dists(X, C[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        C[j] = X[i]
        d2 = np.minimum(d2, _sq_dists(X, C[j:j + 1])[:, 0])
    history: list[float] = []
    assign = np.full(n, -1)
    for _ in range(iters):
        D = _sq_dists(X, C)
        new = D.argmin(axis=1)
        history.append(float(D[np.arange(n), new].mean()))
        if len(history) > 1 and history[-1] > history[-2] * (1 + 1e-12) + 1e-15:
            raise AssertionError(f"k-means distortion increased: {history[-2]} -> {history[-1]}")
        if np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = assign == j
            if members.any():  # empty clusters keep their centroid
                C[j] = X[members].mean(axis=0)
    D = _sq_dists(X, C)
    assign = D.argmin(axis=1)
    final = float(D[np.arange(n), assign].mean())
    if history and final > history[-1] * (1 + 1e-12) + 1e-15:
        raise AssertionError("k-means distortion increased in the final assignment")
    history.append(final)
    return KMeansResult(C, assign, final, history)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(assignments, labels) -> float:
    """2 I(U; V) / (H(U) + H(V)) in nats; defined as 1 when both entropies vanish."""
    a = np.asarray(assignments)
    b = np.asarray(labels)
    if len(a) != len(b):
        raise ValueError("assignments and labels differ in length")
    if len(a) == 0:
        raise ValueError("empty input")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    hu, hv = _entropy(table.sum(1)), _entropy(table.sum(0))
    if hu + hv == 0:
        return 1.0
    n = table.sum()
    nz = table > 0
    pij = table[nz] / n
    pi = (table.sum(1, keepdims=True) / n).repeat(table.shape[1], 1)[nz]
    pj = (table.sum(0, keepdims=True) / n).repeat(table.shape[0], 0)[nz]
    mi = float((pij * np.log(pij / (pi * pj))).sum())
    return float(np.clip(2 * mi / (hu + hv), 0.0, 1.0))


# ---------------------------------------------------------------------------
# similarity structure


def _cos(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na > 0) & (nb > 0)
    out = np.zeros(len(a))
    out[ok] = (a[ok] * b[ok]).sum(-1) / (na[ok] * nb[ok])
    return np.clip(out, -1.0, 1.0), ok


HIST_BINS = 64


@dataclass
class SimilarityStats:
    bin_edges: np.ndarray
    consecutive_hist: np.ndarray
    random_hist: np.ndarray
    consecutive_mean: float
    consecutive_median: float
    random_mean: float
    random_median: float
    skipped_pairs: int


def similarity_stats(table: FeatureTable, seed: int = 0, n_random: int | None = None) -> SimilarityStats:
    """Cosine similarity of consecutive frames versus random frame pairs.

    Pairs involving a zero-norm vector are skipped and counted.
    """
    X = table.features
    if len(X) < 2:
        raise ValueError("need at least two frames")
    first, second = [], []
    for rows in table.sequences():
        first.append(rows[:-1])
        second.append(rows[1:])
    i, j = np.concatenate(first), np.concatenate(second)
    cons, ok_c = _cos(X[i], X[j])
    rng = np.random.default_rng(seed)
    m = n_random if n_random is not None else max(len(i), 1)
    ri = rng.integers(0, len(X), size=m)
    rj = rng.integers(0, len(X) - 1, size=m)
    rj = rj + (rj >= ri)  # distinct frames
    rand, ok_r = _cos(X[ri], X[rj])
    cons, rand = cons[ok_c], rand[ok_r]
    edges = np.linspace(-1.0, 1.0, HIST_BINS + 1)
    hc, _ = np.histogram(cons, bins=edges)
    hr, _ = np.histogram(rand, bins=edges)

    def stat(f, v):
        return float(f(v)) if len(v) else float("nan")

    return SimilarityStats(edges, hc, hr, stat(np.mean, cons), stat(np.median, cons), stat(np.mean, rand),
                           stat(np.median, rand), int((~ok_c).sum() + (~ok_r).sum()))


def lag_similarity(seqs: Sequence[np.ndarray], max_lag: int) -> np.ndarray:
    """Mean cosine similarity between frames ``lag`` apart, for lag = 0..max_lag."""
    sums = np.zeros(max_lag + 1)
    counts = np.zeros(max_lag + 1)
    for f in seqs:
        f = np.asarray(f, dtype=np.float64)
        norms = np.linalg.norm(f, axis=1)
        ok = norms > 0
        u = np.zeros_like(f)
        u[ok] = f[ok] / norms[ok, None]
        for lag in range(min(max_lag, len(f) - 1) + 1):
            c = (u[:len(f) - lag] * u[lag:]).sum(1)
            valid = ok[:len(f) - lag] & ok[lag:]
            sums[lag] += c[valid].sum()
            counts[lag] += valid.sum()
    with np.errstate(invalid="ignore"):
        return sums / counts


def stride_periodicity(seqs: Sequence[np.ndarray] | FeatureTable, period: int, n_multiples: int = 3) -> float:
    """Contrast of similarity at lags that are multiples of ``period`` versus their neighbours.

    Mean over j = 1..n_multiples of |S(j p) - (S(j p - 1) + S(j p + 1)) / 2| where
    S(lag) is the mean cosine similarity at that lag.
    """
    if isinstance(seqs, FeatureTable):
        seqs = [seqs.features[r] for r in seqs.sequences()]
    if period < 2:
        raise ValueError("period must be at least 2")
    if min(len(s) for s in seqs) < 4 * period:
        raise ValueError("sequences must be at least 4 periods long")
    S = lag_similarity(seqs, n_multiples * period + 1)
    contrasts = [abs(S[j * period] - 0.5 * (S[j * period - 1] + S[j * period + 1])) for j in range(1, n_multiples + 1)]
    return float(np.mean(contrasts))


def self_similarity_matrix(features: np.ndarray, labels: np.ndarray | None = None):
    """Dot-product matrix of one sequence and the label change points."""
    F = np.asarray(features, dtype=np.float64)
    S = F @ F.T
    bounds = np.array([], dtype=np.int64)
    if labels is not None:
        labels = np.asarray(labels)
        bounds = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    return S, bounds


SIM_MAGIC = b"ACPCSIM1"


def write_similarity(path, matrix: np.ndarray, boundaries: np.ndarray) -> None:
    """``ACPCSIM1`` | u32 n | u32 boundary count | f32 matrix[n*n] | u32 boundaries."""
    n = matrix.shape[0]
    with open(path, "wb") as f:
        f.write(SIM_MAGIC)
        f.write(struct.pack("<II", n, len(boundaries)))
        f.write(np.asarray(matrix, dtype="<f4").tobytes())
        f.write(np.asarray(boundaries, dtype="<u4").tobytes())


def read_similarity(path):
    blob = Path(path).read_bytes()
    if blob[:8] != SIM_MAGIC:
        raise ValueError("bad similarity-matrix magic")
    n, nb = struct.unpack("<II", blob[8:16])
    if len(blob) != 16 + 4 * n * n + 4 * nb:
        raise ValueError("similarity file has the wrong size")
    m = np.frombuffer(blob[16:16 + 4 * n * n], dtype="<f4").reshape(n, n)
    b = np.frombuffer(blob[16 + 4 * n * n:], dtype="<u4")
    return m.astype(np.float32), b.astype(np.int64)


# ---------------------------------------------------------------------------
# ABX


def angular_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """arccos(cosine) / pi for every frame pair; zero vectors count as orthogonal."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    ua = np.divide(a, na, out=np.zeros_like(a, dtype=np.float64), where=na > 0)
    ub = np.divide(b, nb, out=np.zeros_like(b, dtype=np.float64), where=nb > 0)
    return np.arccos(np.clip(ua @ ub.T, -1.0, 1.0)) / np.pi


def dtw_mean_cost(cost: np.ndarray) -> float:
    """Mean frame cost along the minimum-total-cost monotone path.

    Steps are (1, 0), (0, 1) and (1, 1); among equal totals the shorter path wins.
    """
    return float(dtw_mean_cost_batch([np.asarray(cost, dtype=np.float64)])[0])


def dtw_mean_cost_batch(costs: Sequence[np.ndarray]) -> np.ndarray:
    """:func:`dtw_mean_cost` for many cost matrices at once (vectorized over pairs)."""
    P = len(costs)
    if P == 0:
        return np.zeros(0)
    shapes = np.array([c.shape for c in costs])
    if (shapes < 1).any():
        raise ValueError("empty segment")
    n, m = shapes.max(axis=0)
    # padding cells lie after every real cell of their pair, so they never feed back
    C = np.zeros((P, n, m))
    for p, c in enumerate(costs):
        C[p, :c.shape[0], :c.shape[1]] = c
    total = np.empty((n, m, P))
    length = np.empty((n, m, P), dtype=np.int64)
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                best, blen = np.zeros(P), np.zeros(P, dtype=np.int64)
            else:
                best, blen = np.full(P, np.inf), np.zeros(P, dtype=np.int64)
                for pi, pj in ((i - 1, j - 1), (i - 1, j), (i, j - 1)):
                    if pi < 0 or pj < 0:
                        continue
                    t, ln = total[pi, pj], length[pi, pj]
                    take = (t < best) | ((t == best) & (ln < blen))
                    best = np.where(take, t, best)
                    blen = np.where(take, ln, blen)
            total[i, j] = best + C[:, i, j]
            length[i, j] = blen + 1
    rows = np.arange(P)
    return total[shapes[:, 0] - 1, shapes[:, 1] - 1, rows] / length[shapes[:, 0] - 1, shapes[:, 1] - 1, rows]


def brute_force_dtw(cost: np.ndarray) -> float:
    """Same quantity as :func:`dtw_mean_cost` by enumerating every path (tiny inputs only)."""
    n, m = cost.shape
    best = (np.inf, 0)

    def walk(i, j, s, ln):
        nonlocal best
        s += cost[i, j]
        ln += 1
        if i == n - 1 and j == m - 1:
            if s < best[0] or (s == best[0] and ln < best[1]):
                best = (s, ln)
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, s, ln)

    walk(0, 0, 0.0, 0)
    return best[0] / best[1]


@dataclass
class Segment:
    features: np.ndarray
    label: int
    channel: int
    seq: int


def collect_segments(table: FeatureTable) -> list[Segment]:
    out = []
    for rows in table.sequences():
        labs = table.labels[rows]
        edges = np.concatenate(([0], np.flatnonzero(labs[1:] != labs[:-1]) + 1, [len(rows)]))
        for a, b in zip(edges[:-1], edges[1:]):
            r = rows[a:b]
            out.append(Segment(table.features[r], int(labs[a]), int(table.channel_ids[r[0]]), int(table.seq_ids[r[0]])))
    return out


def _tie_rule(dax: np.ndarray, dbx: np.ndarray) -> np.ndarray:
    return np.where(dax < dbx, 0.0, np.where(dax > dbx, 1.0, 0.5))


def abx_triple_error(a: np.ndarray, b: np.ndarray, x: np.ndarray) -> float:
    dax = dtw_mean_cost(angular_distances(a, x))
    dbx = dtw_mean_cost(angular_distances(b, x))
    return float(_tie_rule(np.array(dax), np.array(dbx)))


def abx_error(table: FeatureTable | Sequence[Segment], seed: int = 0, count: int = 2000) -> tuple[float, float]:
    """(within-channel, across-channel) ABX error over seeded random triples.

    A and X share a label, B does not.  Within: A, B, X from one channel.
    Across: A and B from one channel, X from another.
    """
    segs = collect_segments(table) if isinstance(table, FeatureTable) else list(table)
    by_chan_label: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(segs):
        by_chan_label.setdefault((s.channel, s.label), []).append(i)
    labels = sorted({s.label for s in segs})
    channels = sorted({s.channel for s in segs})
    if len(labels) < 2:
        raise ValueError("ABX needs at least two labels")
    rng = np.random.default_rng(seed)

    def pick(key, exclude=None):
        pool = by_chan_label.get(key, [])
        size = len(pool) - (exclude is not None and exclude in pool)
        if size <= 0:
            return None
        i = pool[rng.integers(size)]
        if exclude is not None and i == exclude:
            i = pool[-1]  # the draw never reaches the last slot, so this stays uniform
        return i

    def run(across: bool) -> float:
        if across and len(channels) < 2:
            raise ValueError("across-channel ABX needs at least two channels")
        triples = []
        attempts = 0
        while len(triples) < count:
            attempts += 1
            if attempts > 50 * count:
                raise ValueError("insufficient segment instances for ABX")
            c = channels[rng.integers(len(channels))]
            la, lb = rng.choice(labels, size=2, replace=False)
            a = pick((c, la))
            b = pick((c, lb))
            if a is None or b is None:
                continue
            if across:
                cx = [ch for ch in channels if ch != c][rng.integers(len(channels) - 1)]
                x = pick((cx, la))
            else:
                x = pick((c, la), exclude=a)
            if x is None:
                continue
            triples.append((a, b, x))
        cost_ax = [angular_distances(segs[a].features, segs[x].features) for a, _, x in triples]
        cost_bx = [angular_distances(segs[b].features, segs[x].features) for _, b, x in triples]
        dax, dbx = dtw_mean_cost_batch(cost_ax), dtw_mean_cost_batch(cost_bx)
        return float(np.mean(_tie_rule(dax, dbx)))

    return run(False), run(True)


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    rows: list[tuple[str, str, float]] = field(default_factory=list)
    histograms: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def add(self, name: str, split: str, value: float) -> None:
        self.rows.append((name, split, float(value)))

    def get(self, name: str, split: str = "") -> float:
        for n, s, v in self.rows:
            if n == name and s == split:
                return v
        raise KeyError((name, split))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["name", "split", "value"])
            for n, s, v in self.rows:
                w.writerow([n, s, repr(v)])

    def write_histograms(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, (edges, counts) in self.histograms.items():
            with open(d / f"{name}.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["bin_left", "count"])
                for left, c in zip(edges[:-1], counts):
                    w.writerow([repr(float(left)), int(c)])


KMEANS_SWEEP = (8, 16, 32, 64)


def evaluate(model: Model, dataset: dt.Dataset, seed: int = 0, sequences: Sequence[int] | None = None,
             probe_epochs: int = 200, abx_triples: int = 2000, kmeans_ks: Sequence[int] = KMEANS_SWEEP,
             kmeans_frames: int = 8000) -> EvalReport:
    """Full analysis battery on encoder latents z and contexts c."""
    report = EvalReport()
    z = extract_features(model, dataset, "z", sequences)
    c = extract_features(model, dataset, "c", sequences)
    for kind, table in (("z", z), ("c", c)):
        tr, va = linear_probe(table, seed, probe_epochs)
        report.add(f"probe_acc_{kind}", "train", tr)
        report.add(f"probe_acc_{kind}", "val", va)
    sim = similarity_stats(z, seed)
    report.add("cos_consecutive_mean", "z", sim.consecutive_mean)
    report.add("cos_consecutive_median", "z", sim.consecutive_median)
    report.add("cos_random_mean", "z", sim.random_mean)
    report.add("cos_random_median", "z", sim.random_median)
    report.histograms["cos_consecutive_z"] = (sim.bin_edges, sim.consecutive_hist)
    report.histograms["cos_random_z"] = (sim.bin_edges, sim.random_hist)
    report.add("stride_periodicity", "z", stride_periodicity(z, model.config.rate_reduction))
    rng = np.random.default_rng(seed)
    sub = np.sort(rng.choice(len(z.features), size=min(kmeans_frames, len(z.features)), replace=False))
    for k in kmeans_ks:
        if k > len(sub):
            continue
        km = kmeans(z.features[sub], k, seed)
        report.add(f"kmeans_distortion_k{k}", "z", km.distortion)
        report.add(f"nmi_k{k}", "z", nmi(km.assignments, z.labels[sub]))
    if abx_triples:
        within, across = abx_error(c, seed, abx_triples)
        report.add("abx_within", "c", within)
        report.add("abx_across", "c", across)
    return report
