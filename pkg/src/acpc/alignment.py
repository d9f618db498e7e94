"""Contrastive score matrices and monotone alignment of K predictions to M latents.

A score matrix ``L`` holds log contrastive scores, rows indexed by prediction
k and columns by upcoming latent m.  An alignment path assigns every column
to one row; it starts in the top-left corner, ends in the bottom-right corner
and moves one column at a time, either staying on the same prediction or
advancing to the next one.  Paths are tuples of 0-based row indices.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import core_math as cm
from .core_math import IMPOSSIBLE, Tensor
from .model import PredictionHeads, predict

# Finite blank log-score used only by the CTC emulation, keyed by precision.
BLANK_LOG_SCORE = {np.dtype(np.float64): -1e9, np.dtype(np.float32): -1e4}


class ScoreCounter:
    """Running count of prediction/latent dot products computed for scoring."""

    def __init__(self):
        self.count = 0

    def reset(self) -> int:
        n, self.count = self.count, 0
        return n


SCORE_EVALUATIONS = ScoreCounter()


def count_score_evaluations(K: int, M: int, N: int) -> int:
    """Dot products per time step: K*M against upcoming latents plus K*N against negatives."""
    if K > M:
        raise ValueError(f"K={K} exceeds M={M}")
    return K * (M + N)


# ---------------------------------------------------------------------------
# contrastive scores


def score_tensor(predictions: Tensor, futures: Tensor, negatives: Tensor) -> Tensor:
    """Batched log contrastive scores.

    predictions (..., K, D), futures (..., M, D), negatives (..., N, D)
    -> (..., K, M) with
    log s[k, m] = <p_k, z_m> - logsumexp(<p_k, z_m>, <p_k, zbar_1>, ..., <p_k, zbar_N>).
    The negative dot products are computed once per k and shared by all m.
    """
    K, D = predictions.shape[-2:]
    M, N = futures.shape[-2], negatives.shape[-2]
    if futures.shape[-1] != D or negatives.shape[-1] != D:
        raise ValueError("prediction, latent and negative dimensions differ")
    if K > M:
        raise ValueError(f"K={K} exceeds M={M}")
    if N < 1:
        raise ValueError("need at least one negative")
    P, F, G = predictions.data, futures.data, negatives.data
    pos = P @ np.swapaxes(F, -1, -2)
    neg = P @ np.swapaxes(G, -1, -2)
    SCORE_EVALUATIONS.count += pos.size + neg.size
    # all dot products are finite, so the max-shifted forms need no sentinel handling
    mx = neg.max(axis=-1, keepdims=True)
    e_neg = np.exp(neg - mx)
    z_neg = e_neg.sum(axis=-1, keepdims=True)
    lse_neg = mx + np.log(z_neg)  # (..., K, 1)
    diff = pos - lse_neg
    soft = np.log1p(np.exp(-np.abs(diff)))
    out = np.minimum(diff, 0.0) - soft  # = pos - logaddexp(pos, lse_neg)

    def backward(g):
        gpos = g * (-np.expm1(out))  # g * (1 - s)
        gneg = (-gpos.sum(axis=-1, keepdims=True) / z_neg) * e_neg
        if predictions.requires_grad:
            predictions.accumulate(gpos @ F + gneg @ G, owned=True)
        if futures.requires_grad:
            futures.accumulate(np.swapaxes(gpos, -1, -2) @ P, owned=True)
        if negatives.requires_grad:
            negatives.accumulate(np.swapaxes(gneg, -1, -2) @ P, owned=True)

    return cm.from_op(out, (predictions, futures, negatives), backward)


def score_matrix(predictions, futures, negatives) -> np.ndarray:
    """K x M log contrastive scores for one time step."""
    p, f, n = (np.asarray(a, dtype=cm.get_dtype()) for a in (predictions, futures, negatives))
    if p.ndim != 2 or f.ndim != 2 or n.ndim != 2:
        raise ValueError("expected 2-D predictions, futures and negatives")
    return score_tensor(Tensor(p), Tensor(f), Tensor(n)).data


# ---------------------------------------------------------------------------
# paths


def enumerate_paths(K: int, M: int) -> list[tuple[int, ...]]:
    """Every valid alignment path, by depth-first search (test oracle)."""
    if not 1 <= K <= M:
        raise ValueError(f"need 1 <= K <= M, got K={K}, M={M}")
    if M > 16:
        raise ValueError("enumeration is limited to M <= 16")
    paths: list[tuple[int, ...]] = []

    def extend(prefix: list[int]):
        m = len(prefix)
        k = prefix[-1]
        if m == M:
            if k == K - 1:
                paths.append(tuple(prefix))
            return
        for nxt in (k, k + 1):
            if nxt < K:
                prefix.append(nxt)
                extend(prefix)
                prefix.pop()

    extend([0])
    return paths


def path_score(L: np.ndarray, path: Sequence[int]) -> float:
    total = 0.0
    for m, k in enumerate(path):
        total += L[k, m]
    return total


def _check_scores(L: np.ndarray) -> np.ndarray:
    L = np.asarray(L)
    if L.ndim < 2:
        raise ValueError("score matrix must be at least 2-D")
    K, M = L.shape[-2:]
    if not 1 <= K <= M:
        raise ValueError(f"need 1 <= K <= M, got {K}x{M}")
    return L


def best_path(L) -> tuple[tuple[int, ...], float]:
    """Highest-scoring path (Viterbi).  On ties the backtrace keeps the current row."""
    L = _check_scores(L)
    K, M = L.shape
    delta = np.full((K, M), IMPOSSIBLE, dtype=L.dtype)
    advanced = np.zeros((K, M), dtype=bool)
    delta[0, 0] = L[0, 0]
    for m in range(1, M):
        stay = delta[:, m - 1]
        adv = np.concatenate(([IMPOSSIBLE], delta[:-1, m - 1]))
        advanced[:, m] = adv > stay
        delta[:, m] = L[:, m] + np.where(advanced[:, m], adv, stay)
    path = [K - 1]
    k = K - 1
    for m in range(M - 1, 0, -1):
        if advanced[k, m]:
            k -= 1
        path.append(k)
    return tuple(reversed(path)), float(delta[K - 1, M - 1])


def forward_backward(L: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Log-sum over all paths and the posterior occupancy, batched over leading axes.

    L: (..., K, M).  Returns (score (...), occupancy (..., K, M)).
    alpha[k, m] = L[k, m] + logaddexp(alpha[k, m-1], alpha[k-1, m-1]), alpha[0, 0] = L[0, 0].
    """
    L = _check_scores(L)
    K, M = L.shape[-2:]
    lead = L.shape[:-2]
    # working layout (M, K, S) with S the flattened leading axes, so that a band of
    # rows in one column is a single contiguous block
    Lt = np.ascontiguousarray(L.reshape(-1, K, M).transpose(2, 1, 0))
    S = Lt.shape[-1]
    alpha = np.full((M, K + 1, S), IMPOSSIBLE, dtype=L.dtype)  # row 0 is padding
    alpha[0, 1] = Lt[0, 0]
    # only rows max(0, K-M+m) .. min(m, K-1) of column m lie on some path
    band = [(max(0, K - M + m), min(m, K - 1) + 1) for m in range(M)]
    for m in range(1, M):
        lo, hi = band[m]
        prev = alpha[m - 1]
        alpha[m, lo + 1:hi + 1] = Lt[m, lo:hi] + cm.log_add(prev[lo + 1:hi + 1], prev[lo:hi])
    beta = np.full((M, K + 1, S), IMPOSSIBLE, dtype=L.dtype)  # row K is padding
    beta[M - 1, K - 1] = 0.0
    for m in range(M - 2, -1, -1):
        lo, hi = band[m]
        nxt = beta[m + 1, lo:hi + 1].copy()
        nxt[:hi - lo + (hi < K)] += Lt[m + 1, lo:hi + (hi < K)]
        beta[m, lo:hi] = cm.log_add(nxt[:-1], nxt[1:])
    score = alpha[M - 1, K]
    occupancy = np.exp(alpha[:, 1:] + beta[:, :K] - score)
    return score.reshape(lead), occupancy.transpose(2, 1, 0).reshape(L.shape)


def expected_path_score(L) -> tuple[float, np.ndarray]:
    """log sum over all alignment paths of exp(path score), with its occupancy.

    The occupancy is the gradient of the score with respect to ``L``.
    """
    score, gamma = forward_backward(np.asarray(L))
    return float(score), gamma


def path_logsumexp(L: Tensor) -> Tensor:
    """Differentiable batched :func:`expected_path_score`; (..., K, M) -> (...)."""
    score, gamma = forward_backward(L.data)

    def backward(g):
        L.accumulate(gamma * g[..., None, None], owned=True)

    return cm.from_op(score, (L,), backward)


def diagonal_sum(L: Tensor) -> Tensor:
    """Sum of L[..., k, k] accumulated in row order (the single K == M path)."""
    K = L.shape[-2]
    total = L.data[..., 0, 0].copy()
    for k in range(1, K):
        total = total + L.data[..., k, k]

    def backward(g):
        full = np.zeros_like(L.data)
        idx = np.arange(K)
        full[..., idx, idx] = g[..., None]
        L.accumulate(full)

    return cm.from_op(total, (L,), backward)


# ---------------------------------------------------------------------------
# CTC emulation


@dataclass
class BlankTrickResult:
    score: float  # normalized CTC log-likelihood of labels 1..K
    column_norms: np.ndarray  # per-column log normalizers Z_m
    blank_mass: float  # posterior probability mass on blank states

    @property
    def restored(self) -> float:
        """Normalized score plus the removed normalizers."""
        return float(self.score + self.column_norms.sum())


def ctc_blank_trick(L, blank_value: float | None = None) -> BlankTrickResult:
    """Score the no-blank alignment problem with a standard CTC recursion.

    A blank row at a large negative log-score is appended, every column is
    log-softmax normalized, and CTC with target labels (1..K) runs over the
    result.  The returned score plus the sum of column normalizers recovers
    :func:`expected_path_score` up to the (negligible) blank paths.
    """
    L = _check_scores(L)
    K, M = L.shape
    if blank_value is None:
        blank_value = BLANK_LOG_SCORE.get(L.dtype, -1e9)
    ext = np.vstack([np.full((1, M), blank_value, dtype=L.dtype), L])  # row 0 = blank
    Z = cm.logsumexp(ext, axis=0)
    logp = ext - Z
    # CTC state s: even -> blank, odd -> label (s+1)//2
    S = 2 * K + 1
    rows = np.array([0 if s % 2 == 0 else (s + 1) // 2 for s in range(S)])
    emit = logp[rows]  # (S, M)
    skip_ok = np.array([s % 2 == 1 and s >= 3 for s in range(S)])  # labels are all distinct
    alpha = np.full((S, M), IMPOSSIBLE, dtype=L.dtype)
    alpha[0, 0] = emit[0, 0]
    alpha[1, 0] = emit[1, 0]
    for m in range(1, M):
        a = alpha[:, m - 1]
        one = np.concatenate(([IMPOSSIBLE], a[:-1]))
        two = np.where(skip_ok, np.concatenate(([IMPOSSIBLE, IMPOSSIBLE], a[:-2])), IMPOSSIBLE)
        alpha[:, m] = emit[:, m] + cm.logsumexp(np.stack([a, one, two]), axis=0)
    beta = np.full((S, M), IMPOSSIBLE, dtype=L.dtype)
    beta[S - 1, M - 1] = 0.0
    beta[S - 2, M - 1] = 0.0
    skip_from = np.concatenate((skip_ok[2:], [False, False]))  # s -> s+2 allowed
    for m in range(M - 2, -1, -1):
        nb = emit[:, m + 1] + beta[:, m + 1]
        one = np.concatenate((nb[1:], [IMPOSSIBLE]))
        two = np.where(skip_from, np.concatenate((nb[2:], [IMPOSSIBLE, IMPOSSIBLE])), IMPOSSIBLE)
        beta[:, m] = cm.logsumexp(np.stack([nb, one, two]), axis=0)
    score = cm.logsumexp(alpha[S - 2:, M - 1])
    post = np.exp(alpha + beta - score)
    blank_mass = float(post[0::2].sum() / M)
    return BlankTrickResult(float(score), Z, blank_mass)


def ctc_blank_trick_score(L, blank_value: float | None = None) -> float:
    return ctc_blank_trick(L, blank_value).score


# ---------------------------------------------------------------------------
# losses


def sample_negatives(group_ids: Sequence[int], n_frames: int, n_positions: int, n_negatives: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Flat latent-frame indices of negatives, shape (B, n_positions, N).

    For sequence b the pool is every frame of the other sequences sharing its
    group id; draws are uniform with replacement.  Index ``i * n_frames + t``
    refers to frame t of sequence i.
    """
    group_ids = np.asarray(group_ids)
    B = len(group_ids)
    out = np.empty((B, n_positions, n_negatives), dtype=np.int64)
    for b in range(B):
        others = np.flatnonzero((group_ids == group_ids[b]) & (np.arange(B) != b))
        if others.size == 0:
            raise ValueError(f"sequence {b} has no other sequence in its group to draw negatives from")
        seq = others[rng.integers(0, others.size, size=(n_positions, n_negatives))]
        frame = rng.integers(0, n_frames, size=(n_positions, n_negatives))
        out[b] = seq * n_frames + frame
    return out


def window_scores(latents: Tensor, contexts: Tensor, heads: PredictionHeads, negatives: np.ndarray,
                  M: int) -> Tensor:
    """Log contrastive scores (B, T'-M, K, M) for every position with a full window."""
    B, T, D = latents.shape
    n = T - M
    if n < 1:
        raise ValueError(f"sequence of {T} latents is too short for a window of M={M}")
    if negatives.shape[:2] != (B, n):
        raise ValueError(f"negative index shape {negatives.shape} does not match (B={B}, positions={n})")
    ctx = cm.from_op(contexts.data[:, :n], (contexts,), lambda g: contexts.accumulate(_pad_time(g, T)))
    preds = predict(ctx, heads)  # B, n, K, D
    futures = cm.future_windows(latents, M)  # B, n, M, D
    negs = cm.gather_rows(cm.reshape(latents, (B * T, D)), negatives)  # B, n, N, D
    return score_tensor(preds, futures, negs)


def _pad_time(g: np.ndarray, T: int) -> np.ndarray:
    full = np.zeros(g.shape[:1] + (T,) + g.shape[2:], dtype=g.dtype)
    full[:, :g.shape[1]] = g
    return full


def _reduce(per_position: Tensor, M: int) -> Tensor:
    return cm.scale(cm.mean(per_position), -1.0 / M)


def acpc_loss(latents: Tensor, contexts: Tensor, heads: PredictionHeads, negatives: np.ndarray,
              M: int) -> Tensor:
    """Negative expected alignment score per latent, averaged over positions.

    latents (B, T', D), contexts (B, T', H); negatives are flat indices from
    :func:`sample_negatives` for positions t = 0 .. T'-M-1.
    """
    return loss_from_scores(window_scores(latents, contexts, heads, negatives, M), "acpc")


def cpc_loss(latents: Tensor, contexts: Tensor, heads: PredictionHeads, negatives: np.ndarray) -> Tensor:
    """Conventional CPC: head k scored against latent t+k only."""
    K = heads.n_predictions
    return loss_from_scores(window_scores(latents, contexts, heads, negatives, K), "cpc")


def loss_from_scores(L: Tensor, kind: str) -> Tensor:
    """Reduce a (B, n, K, M) score tensor to the ``acpc`` or ``cpc`` loss."""
    M = L.shape[-1]
    if kind == "acpc":
        return _reduce(path_logsumexp(L), M)
    if kind == "cpc":
        if L.shape[-2] != M:
            raise ValueError("cpc scores need K == M")
        return _reduce(diagonal_sum(L), M)
    raise ValueError(f"unknown loss {kind!r}")


def write_occupancy_csv(path, occupancy: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["k", "m", "occupancy"])
        for k in range(occupancy.shape[0]):
            for m in range(occupancy.shape[1]):
                w.writerow([k + 1, m + 1, repr(float(occupancy[k, m]))])


def n_paths(K: int, M: int) -> int:
    return math.comb(M - 1, K - 1)
