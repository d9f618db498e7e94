"""Synthetic piecewise-constant symbol streams with frame-level ground truth.

Each sequence is a run of segments; a segment repeats one symbol for a
uniformly drawn number of frames, and every frame emits the symbol's fixed
waveform template of ``samples_per_frame`` samples plus Gaussian noise.
Channels apply their own gain, offset and 3-tap FIR coloring, so that labels
are channel independent while the waveforms are not.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

DATASET_MAGIC = b"ACPCDS01"
_MAGIC_PREFIX = b"ACPCDS"
_SEQ_HEADER = struct.Struct("<IIHH")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    alphabet_size: int = 12
    min_duration: int = 4
    max_duration: int = 12
    samples_per_frame: int = 8
    noise: float = 0.3
    channels: int = 4
    sequence_length: int = 1024
    sequences_per_channel: int = 200

    @property
    def frames_per_sequence(self) -> int:
        return self.sequence_length // self.samples_per_frame

    def validate(self) -> None:
        if self.alphabet_size < 1:
            raise ValueError("alphabet_size must be positive")
        if self.alphabet_size == 1 and self.noise != 0:
            raise ValueError("a single-symbol alphabet is only allowed without noise")
        if self.min_duration < 1 or self.max_duration < self.min_duration:
            raise ValueError("need 1 <= min_duration <= max_duration")
        if self.max_duration < 2 * self.min_duration - 1:
            raise ValueError("max_duration must be at least 2*min_duration - 1 to tile sequences exactly")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.samples_per_frame < 1 or self.sequence_length % self.samples_per_frame:
            raise ValueError("sequence_length must be a positive multiple of samples_per_frame")
        if self.frames_per_sequence < self.min_duration:
            raise ValueError("sequences are shorter than one minimal segment")
        if self.channels < 1 or self.sequences_per_channel < 1:
            raise ValueError("channels and sequences_per_channel must be positive")
        if self.alphabet_size > 65535:
            raise ValueError("labels are stored as u16")


@dataclass
class RawSequence:
    samples: np.ndarray  # float32 (T,)
    frame_labels: np.ndarray  # uint16 (T / R,)
    channel_id: int

    @property
    def boundaries(self) -> np.ndarray:
        """Frame indices where a new segment starts (0 excluded)."""
        return np.flatnonzero(np.diff(self.frame_labels.astype(np.int64)) != 0) + 1

    def segments(self) -> list[tuple[int, int, int]]:
        """(start, stop, label) triples; adjacent segments never share a label."""
        edges = np.concatenate(([0], self.boundaries, [len(self.frame_labels)]))
        return [(int(a), int(b), int(self.frame_labels[a])) for a, b in zip(edges[:-1], edges[1:])]


@dataclass
class Dataset:
    sequences: list[RawSequence]
    spec: SyntheticSpec | None = None
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.sequences)

    def channel_ids(self) -> np.ndarray:
        return np.array([s.channel_id for s in self.sequences])

    def equals(self, other: "Dataset") -> bool:
        if len(self) != len(other):
            return False
        return all(
            a.channel_id == b.channel_id
            and np.array_equal(a.samples, b.samples)
            and np.array_equal(a.frame_labels, b.frame_labels)
            for a, b in zip(self.sequences, other.sequences)
        )


@dataclass(frozen=True)
class ChannelParams:
    gain: float
    offset: float
    fir: tuple[float, float, float]


def _streams(seed: int):
    templates_ss, channels_ss, seqs_ss = np.random.SeedSequence(seed).spawn(3)
    return templates_ss, channels_ss, seqs_ss


def symbol_templates(spec: SyntheticSpec, seed: int) -> np.ndarray:
    """(A, R) waveform templates, fixed by the seed."""
    return np.random.default_rng(_streams(seed)[0]).standard_normal((spec.alphabet_size, spec.samples_per_frame))


def channel_params(spec: SyntheticSpec, seed: int) -> list[ChannelParams]:
    rng = np.random.default_rng(_streams(seed)[1])
    out = []
    for _ in range(spec.channels):
        gain = rng.uniform(0.8, 1.25)
        offset = rng.uniform(-0.5, 0.5)
        fir = (1.0, rng.uniform(-0.5, 0.5), rng.uniform(-0.25, 0.25))
        out.append(ChannelParams(float(gain), float(offset), tuple(float(v) for v in fir)))
    return out


def sample_durations(spec: SyntheticSpec, rng: np.random.Generator) -> list[int]:
    """Segment lengths tiling one sequence exactly, each within [min, max].

    Draws are uniform; only a draw that would leave a tail shorter than the
    minimum is adjusted, which can happen only when fewer than
    min + max frames remain.
    """
    lo, hi = spec.min_duration, spec.max_duration
    remaining = spec.frames_per_sequence
    out = []
    while remaining:
        d = int(rng.integers(lo, hi + 1))
        if remaining - d < lo:
            d = remaining if remaining <= hi else remaining - lo
        out.append(d)
        remaining -= d
    return out


def _apply_channel(clean: np.ndarray, ch: ChannelParams, lead: np.ndarray) -> np.ndarray:
    # the stream behaves as if preceded by the tail of its first frame
    x = np.concatenate((lead, clean))
    y = ch.fir[0] * x[2:] + ch.fir[1] * x[1:-1] + ch.fir[2] * x[:-2]
    return ch.gain * y + ch.offset


def generate(spec: SyntheticSpec, seed: int) -> Dataset:
    spec.validate()
    templates = symbol_templates(spec, seed)
    channels = channel_params(spec, seed)
    rng = np.random.default_rng(_streams(seed)[2])
    A, R = spec.alphabet_size, spec.samples_per_frame
    sequences = []
    for c in range(spec.channels):
        for _ in range(spec.sequences_per_channel):
            labels = []
            prev = -1
            for d in sample_durations(spec, rng):
                if A == 1:
                    sym = 0
                else:
                    sym = int(rng.integers(0, A - 1))
                    if prev >= 0 and sym >= prev:
                        sym += 1  # uniform over symbols other than the previous one
                labels.extend([sym] * d)
                prev = sym
            labels = np.array(labels, dtype=np.uint16)
            clean = templates[labels].reshape(-1)
            noisy = clean + spec.noise * rng.standard_normal(clean.shape) if spec.noise > 0 else clean
            lead = templates[labels[0], -2:]
            samples = _apply_channel(noisy, channels[c], lead).astype(np.float32)
            sequences.append(RawSequence(samples, labels, c))
    return Dataset(sequences, spec, seed)


def decode_frames(samples: np.ndarray, channel: ChannelParams, templates: np.ndarray,
                  first_label: int) -> np.ndarray:
    """Undo the channel and map each frame to its nearest template."""
    R = templates.shape[1]
    y = (np.asarray(samples, dtype=np.float64) - channel.offset) / channel.gain
    lead = templates[first_label, -2:]
    x = np.empty(len(y) + 2)
    x[:2] = lead
    a0, a1, a2 = channel.fir
    for i in range(len(y)):
        x[i + 2] = (y[i] - a1 * x[i + 1] - a2 * x[i]) / a0
    frames = x[2:].reshape(-1, R)
    d = ((frames[:, None, :] - templates[None]) ** 2).sum(axis=-1)
    return d.argmin(axis=1)


def latent_labels(frame_labels: np.ndarray, n_latents: int, receptive_field: int, rate: int,
                  samples_per_frame: int) -> np.ndarray:
    """Label of the frame under the center of each latent's receptive field."""
    centers = np.arange(n_latents) * rate + (receptive_field - 1) / 2.0
    idx = np.minimum((centers // samples_per_frame).astype(np.int64), len(frame_labels) - 1)
    return np.asarray(frame_labels)[idx]


# ---------------------------------------------------------------------------
# file format


def dataset_to_bytes(dataset: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<I", len(dataset.sequences)))
    for s in dataset.sequences:
        buf.write(_SEQ_HEADER.pack(len(s.samples), len(s.frame_labels), s.channel_id, 0))
        buf.write(np.asarray(s.samples, dtype="<f4").tobytes())
        buf.write(np.asarray(s.frame_labels, dtype="<u2").tobytes())
    return buf.getvalue()


def dataset_from_bytes(blob: bytes) -> Dataset:
    if len(blob) < 8 or blob[:6] != _MAGIC_PREFIX:
        raise DatasetFormatError("bad dataset magic")
    if blob[:8] != DATASET_MAGIC:
        raise DatasetFormatError(f"unsupported dataset version {blob[6:8]!r}")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise DatasetFormatError("truncated dataset file")
        out = blob[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    seqs = []
    for _ in range(count):
        T, n_labels, channel, _reserved = _SEQ_HEADER.unpack(take(_SEQ_HEADER.size))
        samples = np.frombuffer(take(4 * T), dtype="<f4").astype(np.float32)
        labels = np.frombuffer(take(2 * n_labels), dtype="<u2").astype(np.uint16)
        seqs.append(RawSequence(samples, labels, int(channel)))
    if pos != len(blob):
        raise DatasetFormatError("trailing bytes after last sequence")
    return Dataset(seqs)


def expected_file_size(dataset: Dataset) -> int:
    return 8 + 4 + sum(_SEQ_HEADER.size + 4 * len(s.samples) + 2 * len(s.frame_labels) for s in dataset.sequences)


def write_dataset(dataset: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(dataset))


def read_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    indices: np.ndarray  # dataset positions
    samples: np.ndarray  # (B, T)
    group_ids: np.ndarray  # (B,)
    channel_id: int
    labels: list[np.ndarray] = field(default_factory=list)


def group_assignment(batch_size: int, groups: int) -> np.ndarray:
    """Contiguous split of batch slots into ``groups`` groups of near-equal size."""
    if groups < 1 or groups > batch_size:
        raise ValueError("need 1 <= groups <= batch size")
    gid = np.arange(batch_size) * groups // batch_size
    if np.bincount(gid).min() < 2:
        raise ValueError("every group needs at least two sequences to draw negatives from")
    return gid


def batches(dataset: Dataset, batch_size: int, groups: int, seed: int, epoch: int = 0) -> Iterator[Batch]:
    """Single-channel batches in a seeded, epoch-dependent order.

    Partial batches are dropped.  Group ids restrict negative sampling.
    """
    gid = group_assignment(batch_size, groups)
    channels = dataset.channel_ids()
    rng = np.random.default_rng([seed, epoch])
    plan = []
    for c in np.unique(channels):
        members = np.flatnonzero(channels == c)
        if members.size < batch_size:
            raise ValueError(f"channel {c} has {members.size} sequences, fewer than batch size {batch_size}")
        members = rng.permutation(members)
        for i in range(members.size // batch_size):
            plan.append((int(c), members[i * batch_size:(i + 1) * batch_size]))
    for j in rng.permutation(len(plan)):
        c, idx = plan[j]
        samples = np.stack([dataset.sequences[i].samples for i in idx])
        yield Batch(idx, samples, gid.copy(), c, [dataset.sequences[i].frame_labels for i in idx])
