"""Run configuration, Adam optimizer, deterministic training loop and checkpoints."""
from __future__ import annotations

import csv
import ctypes
import ctypes.util
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import alignment as al
from . import core_math as cm
from . import data as dt
from .core_math import Tensor
from .model import (Model, ModelConfig, config_to_dict, contextualize, decode_checkpoint, encode,
                    encode_checkpoint, init_model, model_from_tensors)

log = logging.getLogger(__name__)


def tune_allocator() -> bool:
    """Keep freed buffers in the glibc heap instead of returning them to the OS.

    Training allocates and frees the same few-megabyte arrays every step; with
    default settings each becomes an mmap/munmap pair.  Returns False when the
    C library does not offer ``mallopt``.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
    ok = mallopt(M_MMAP_THRESHOLD, 1 << 30) == 1
    return ok and mallopt(M_TRIM_THRESHOLD, (1 << 31) - 1) == 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    loss: str = "acpc"
    K: int = 8
    M: int = 12
    N: int = 16
    latent_dim: int = 32
    hidden_dim: int = 32
    widths: tuple[int, ...] = (8, 4)
    strides: tuple[int, ...] = (4, 2)
    context_layers: int = 1
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 32
    groups: int = 4
    epochs: int = 50
    data_seed: int = 0
    init_seed: int = 0
    train_seed: int = 0
    eval_every: int = 0  # epochs between probe evaluations, 0 disables
    eval_sequences: int = 64
    precision: str = "train"
    data: str = ""  # dataset file; empty generates the default corpus from data_seed
    out_dir: str = "run"
    # synthetic corpus used when ``data`` is empty
    alphabet_size: int = 12
    min_duration: int = 4
    max_duration: int = 12
    noise: float = 0.3
    channels: int = 4
    sequence_length: int = 1024
    sequences_per_channel: int = 200

    def validate(self) -> "RunConfig":
        if self.loss not in ("cpc", "acpc"):
            raise ConfigError(f"loss must be 'cpc' or 'acpc', got {self.loss!r}")
        if self.K < 1 or self.N < 1:
            raise ConfigError("K and N must be positive")
        if self.K > self.M:
            raise ConfigError(f"K={self.K} exceeds M={self.M}")
        if self.loss == "cpc" and self.M != self.K:
            raise ConfigError("cpc loss requires M == K")
        if self.precision not in cm.PRECISIONS:
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 2:
            raise ConfigError("epochs and lr must be non-negative, batch_size at least 2")
        try:
            self.model_config()
            dt.group_assignment(self.batch_size, self.groups)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.latent_dim, self.hidden_dim, self.widths, self.strides, self.context_layers, self.K)

    def synthetic_spec(self) -> dt.SyntheticSpec:
        return dt.SyntheticSpec(self.alphabet_size, self.min_duration, self.max_duration,
                                int(np.prod(self.strides)), self.noise, self.channels,
                                self.sequence_length, self.sequences_per_channel)


def _coerce(name: str, kind, raw: str):
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    if kind is str or kind == "str":
        return raw
    if "tuple" in str(kind):
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(int(p) for p in parts)
    raise ConfigError(f"cannot parse field {name}")


def parse_key_values(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def apply_overrides(obj, values: dict[str, str]):
    types = {f.name: f.type for f in fields(obj)}
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    try:
        return replace(obj, **{k: _coerce(k, types[k], v) for k, v in values.items()})
    except ValueError as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> RunConfig:
    return apply_overrides(RunConfig(), parse_key_values(Path(path).read_text())).validate()


def load_spec(path) -> tuple[dt.SyntheticSpec, int]:
    """Corpus settings plus the generation ``seed`` key."""
    values = parse_key_values(Path(path).read_text())
    seed = int(values.pop("seed", "0"))
    spec = apply_overrides(dt.SyntheticSpec(), values)
    try:
        spec.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return spec, seed


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: dict[str, Tensor]) -> float:
        """Apply one update in place; returns the pre-clip gradient norm."""
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
        norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
        coef = 1.0
        if self.clip_norm and norm > self.clip_norm:
            coef = self.clip_norm / norm
        self.step += 1
        if self.lr == 0:
            return norm
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for k, p in params.items():
            g = grads[k] * p.data.dtype.type(coef)
            m = self.m.setdefault(k, np.zeros_like(p.data))
            v = self.v.setdefault(k, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        return norm


# ---------------------------------------------------------------------------
# training


@dataclass
class StepResult:
    loss: float
    score_evaluations: int
    grad_norm: float


def compute_scores(model: Model, samples: np.ndarray, group_ids, cfg: RunConfig,
                   rng: np.random.Generator) -> Tensor:
    """Score tensor (B, T'-M, K, M) of one batch with freshly drawn negatives."""
    z = encode(samples, model.encoder)
    c = contextualize(z, model.context)
    B, T, _ = z.shape
    negatives = al.sample_negatives(group_ids, T, T - cfg.M, cfg.N, rng)
    return al.window_scores(z, c, model.heads, negatives, cfg.M)


def compute_loss(model: Model, samples: np.ndarray, group_ids, cfg: RunConfig,
                 rng: np.random.Generator) -> Tensor:
    return al.loss_from_scores(compute_scores(model, samples, group_ids, cfg, rng), cfg.loss)


def _score_dump(scores: np.ndarray) -> str:
    bad = np.argwhere(~np.isfinite(scores).all(axis=(-2, -1)))
    if not len(bad):
        return "all score matrices finite"
    b, t = bad[0]
    with np.printoptions(precision=4, suppress=True, linewidth=160):
        return f"first non-finite score matrix at sequence {b}, position {t}:\n{scores[b, t]}"


def train_step(model: Model, opt: Adam, batch: dt.Batch, cfg: RunConfig, rng: np.random.Generator) -> StepResult:
    al.SCORE_EVALUATIONS.reset()
    model.zero_grad()
    scores = None
    try:
        scores = compute_scores(model, batch.samples, batch.group_ids, cfg, rng)
        loss = al.loss_from_scores(scores, cfg.loss)
    except cm.NonFiniteError as e:
        dump = _score_dump(scores.data) if scores is not None else "failure before scoring"
        raise cm.NonFiniteError(f"non-finite forward pass on batch {batch.indices.tolist()}: {e}; {dump}") from e
    loss.backward()
    norm = opt.update(model.parameters())
    return StepResult(float(loss.data), al.SCORE_EVALUATIONS.reset(), norm)


@dataclass
class TrainState:
    model: Model
    opt: Adam
    rng: np.random.Generator
    epoch: int = 0  # epochs completed
    global_step: int = 0


def new_state(cfg: RunConfig) -> TrainState:
    with cm.precision(cfg.precision):
        model = init_model(cfg.model_config(), cfg.init_seed)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.clip_norm)
    return TrainState(model, opt, np.random.default_rng(cfg.train_seed))


def state_to_bytes(state: TrainState, cfg: RunConfig) -> bytes:
    tensors = {k: p.data for k, p in state.model.parameters().items()}
    for k in tensors.copy():
        if k in state.opt.m:
            tensors[f"adam.m.{k}"] = state.opt.m[k]
            tensors[f"adam.v.{k}"] = state.opt.v[k]
    meta = {
        "model": config_to_dict(state.model.config),
        "epoch": state.epoch,
        "adam_step": state.opt.step,
        "config": config_to_text(cfg),
    }
    return encode_checkpoint(tensors, state.global_step, state.rng.bit_generator.state, meta)


def state_from_bytes(blob: bytes) -> tuple[TrainState, RunConfig]:
    tensors, step, rng_state, meta = decode_checkpoint(blob)
    cfg = apply_overrides(RunConfig(), parse_key_values(meta["config"])).validate()
    mc = meta["model"]
    model = model_from_tensors(ModelConfig(**mc), tensors)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.clip_norm, step=meta["adam_step"])
    for k in model.parameters():
        if f"adam.m.{k}" in tensors:
            opt.m[k] = tensors[f"adam.m.{k}"]
            opt.v[k] = tensors[f"adam.v.{k}"]
    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    return TrainState(model, opt, rng, meta["epoch"], step), cfg


def save_checkpoint(path, state: TrainState, cfg: RunConfig) -> None:
    Path(path).write_bytes(state_to_bytes(state, cfg))


def load_checkpoint(path) -> tuple[TrainState, RunConfig]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no checkpoint at {p}")
    return state_from_bytes(p.read_bytes())


METRICS_HEADER = ["step", "wall_ms", "loss", "metric", "value"]


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, step: int, wall_ms: float, loss: float, metric: str = "", value: float | str = ""):
        if self.rows and step <= self.rows[-1]["step"]:
            raise ValueError("metric steps must be strictly increasing")
        if wall_ms <= 0:
            raise ValueError("step time must be positive")
        self.rows.append({"step": step, "wall_ms": wall_ms, "loss": loss, "metric": metric, "value": value})

    def annotate_last(self, metric: str, value: float) -> None:
        self.rows[-1]["metric"] = metric
        self.rows[-1]["value"] = value

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    def write(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(METRICS_HEADER)
            for r in self.rows:
                w.writerow([r["step"], f"{r['wall_ms']:.3f}", repr(r["loss"]), r["metric"],
                            repr(r["value"]) if isinstance(r["value"], float) else r["value"]])

    @classmethod
    def read(cls, path) -> "MetricsLog":
        out = cls()
        with open(path, newline="") as f:
            for r in csv.DictReader(f):
                value = float(r["value"]) if r["value"] else ""
                out.rows.append({"step": int(r["step"]), "wall_ms": float(r["wall_ms"]), "loss": float(r["loss"]),
                                 "metric": r["metric"], "value": value})
        return out


def load_or_generate(cfg: RunConfig) -> dt.Dataset:
    if cfg.data:
        return dt.read_dataset(cfg.data)
    return dt.generate(cfg.synthetic_spec(), cfg.data_seed)


def train(cfg: RunConfig, dataset: dt.Dataset | None = None, state: TrainState | None = None,
          out_dir=None, log_metrics: MetricsLog | None = None, probe_fn=None) -> tuple[TrainState, MetricsLog]:
    """Run (or resume) training up to ``cfg.epochs`` epochs.

    A checkpoint ``epoch_XXX.ckpt`` is written after every epoch when
    ``out_dir`` is given.  ``probe_fn(model, dataset) -> float`` is called
    every ``cfg.eval_every`` epochs and its value is attached to the last
    logged step of that epoch.
    """
    cfg.validate()
    dataset = dataset if dataset is not None else load_or_generate(cfg)
    state = state if state is not None else new_state(cfg)
    metrics = log_metrics if log_metrics is not None else MetricsLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    with cm.precision(cfg.precision):
        while state.epoch < cfg.epochs:
            for batch in dt.batches(dataset, cfg.batch_size, cfg.groups, cfg.train_seed, state.epoch):
                t0 = time.perf_counter()
                res = train_step(state.model, state.opt, batch, cfg, state.rng)
                wall_ms = max((time.perf_counter() - t0) * 1e3, 1e-6)
                state.global_step += 1
                metrics.append(state.global_step, wall_ms, res.loss)
            state.epoch += 1
            if probe_fn is not None and cfg.eval_every and state.epoch % cfg.eval_every == 0:
                metrics.annotate_last("probe_val_acc", float(probe_fn(state.model, dataset)))
            log.info("epoch %d step %d loss %.4f", state.epoch, state.global_step, metrics.rows[-1]["loss"])
            if out is not None:
                save_checkpoint(out / f"epoch_{state.epoch:03d}.ckpt", state, cfg)
                metrics.write(out / "metrics.csv")
    return state, metrics
