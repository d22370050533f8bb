"""Masked training of the adapter in the clean (Adam) and noisy (SGD) regimes."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core_math import make_rng
from .discovery import Circuit
from .lora_mlp import AdaptedModel, backward
from .tasks import TaskInstance, relative_mse, sample_batch

CLEAN = "clean"
NOISY = "noisy"

_DATA_STREAM = 10
_NOISE_STREAM = 11


class DivergedError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"training diverged (non-finite loss) at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    regime: str = CLEAN
    steps: int = 5000
    batch: int = 128
    lr: float = 5e-2
    train_a: bool = False
    eval_every: int = 250
    seed: int = 0
    noise_std: float = 0.0
    clip_norm: float = float("inf")
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    trace_every: int = 0  # 0 disables gradient tracing
    trace_len: int = 50

    def __post_init__(self):
        if self.regime not in (CLEAN, NOISY):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 1 or self.eval_every < 1:
            raise ValueError("batch and eval_every must be >= 1")

    @classmethod
    def for_regime(cls, regime: str, **overrides) -> "TrainConfig":
        if regime == CLEAN:
            base = dict(regime=CLEAN, steps=5000, batch=128, lr=5e-2, eval_every=250)
        elif regime == NOISY:
            base = dict(regime=NOISY, steps=15000, batch=4, lr=3e-3, eval_every=500,
                        noise_std=0.005, clip_norm=1.0)
        else:
            raise ValueError(f"unknown regime {regime!r}")
        base.update(overrides)
        return cls(**base)


@dataclass
class OptimizerState:
    kind: str  # "adam" or "noisy_sgd"
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    noise_std: float = 0.0
    clip_norm: float = float("inf")
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    last_grad: dict = field(default_factory=dict, repr=False)  # post noise/clip, pre-step

    @classmethod
    def from_config(cls, config: TrainConfig) -> "OptimizerState":
        if config.regime == CLEAN:
            return cls("adam", config.lr, config.beta1, config.beta2, config.eps)
        return cls("noisy_sgd", config.lr, noise_std=config.noise_std, clip_norm=config.clip_norm)


def clip_and_noise(grads, noise_std: float, clip_norm: float, rng: np.random.Generator | None,
                   masks=None):
    """Add N(0, noise_std^2) per trainable entry, then clip the global L2 norm.

    ``grads`` is an array or a list of arrays; ``masks`` (same structure)
    marks the trainable entries, which are the only ones that receive noise
    or count toward the norm.
    """
    single = isinstance(grads, np.ndarray)
    gs = [grads] if single else list(grads)
    ms = [None] * len(gs) if masks is None else ([masks] if single else list(masks))
    if noise_std < 0 or clip_norm < 0:
        raise ValueError("noise_std and clip_norm must be non-negative")
    out = []
    for g, m in zip(gs, ms):
        g = np.array(g, dtype=np.float64)
        if noise_std > 0:
            noise = rng.normal(0.0, noise_std, size=g.shape)
            g = g + (noise if m is None else noise * m)
        out.append(g)
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in out))
    if np.isfinite(clip_norm) and norm > clip_norm:
        factor = clip_norm / norm
        out = [g * factor for g in out]
    return out[0] if single else out


def _step(params: dict, grads: dict, masks: dict, opt: OptimizerState,
          rng: np.random.Generator | None) -> dict:
    names = list(params)
    g = {n: grads[n] * masks[n] if masks.get(n) is not None else grads[n] for n in names}
    if opt.kind == "noisy_sgd":
        clipped = clip_and_noise([g[n] for n in names], opt.noise_std, opt.clip_norm, rng,
                                 [masks.get(n) for n in names])
        g = dict(zip(names, clipped))
        opt.last_grad = g
        new = {}
        for n in names:
            upd = opt.lr * g[n]
            if masks.get(n) is not None:
                upd = np.where(masks[n], upd, 0.0)
            new[n] = params[n] - upd
        opt.t += 1
        return new
    if opt.kind != "adam":
        raise ValueError(f"unknown optimizer {opt.kind!r}")
    opt.last_grad = g
    opt.t += 1
    bc1 = 1.0 - opt.beta1 ** opt.t
    bc2 = 1.0 - opt.beta2 ** opt.t
    new = {}
    for n in names:
        m = opt.m.get(n)
        v = opt.v.get(n)
        if m is None:
            m = np.zeros_like(params[n])
            v = np.zeros_like(params[n])
        m = opt.beta1 * m + (1.0 - opt.beta1) * g[n]
        v = opt.beta2 * v + (1.0 - opt.beta2) * g[n] * g[n]
        opt.m[n], opt.v[n] = m, v
        upd = opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        new[n] = params[n] - upd
    return new


def apply_masked_update(b: np.ndarray, grad: np.ndarray, mask, opt: OptimizerState,
                        rng: np.random.Generator | None = None):
    """One optimizer step on B restricted to ``mask``; returns (new_b, opt)."""
    mask = None if mask is None else np.asarray(mask, dtype=bool)
    new = _step({"b": b}, {"b": grad}, {"b": mask}, opt, rng)
    return new["b"], opt


@dataclass
class RunReport:
    records: list  # dicts with step, train_loss, relative_mse
    final_relative_mse: float
    config: dict
    wall_time: float
    k: int | None = None
    gradient_log: list | None = None
    model: AdaptedModel | None = field(default=None, repr=False)
    status: str = "ok"

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "status": self.status,
            "k": self.k,
            "final_relative_mse": self.final_relative_mse,
            "config": self.config,
            "wall_time": self.wall_time,
            "records": self.records,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def write_metrics_csv(self, path) -> None:
        write_metrics_csv(self.records, path)


def write_metrics_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_loss", "relative_mse"])
        for r in records:
            w.writerow([r["step"], repr(float(r["train_loss"])), repr(float(r["relative_mse"]))])


def mask_of(circuit_or_mask, shape=(64, 16)) -> np.ndarray | None:
    if circuit_or_mask is None:
        return None
    if isinstance(circuit_or_mask, Circuit):
        return circuit_or_mask.mask()
    mask = np.asarray(circuit_or_mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} != {shape}")
    return mask


def train(task: TaskInstance, circuit_or_mask, config: TrainConfig,
          model: AdaptedModel | None = None, a_mask=None) -> RunReport:
    """Train B (optionally A too) from the zero-adapter point.

    ``circuit_or_mask`` selects the trainable entries of B; ``None`` trains
    all of them. ``a_mask`` additionally trains the selected entries of A
    (the sparse A+B ablation). Returns a report whose ``model`` holds the
    trained weights.
    """
    model = task.fresh_model() if model is None else model.copy()
    mask = mask_of(circuit_or_mask, model.b.shape)
    if config.train_a and mask is not None:
        raise ValueError("full LoRA (train_a) trains both factors densely; no mask allowed")
    if a_mask is not None and config.train_a:
        raise ValueError("a_mask and train_a are mutually exclusive")
    a_mask = None if a_mask is None else mask_of(a_mask, model.a.shape)
    train_a = config.train_a or a_mask is not None
    k = int(model.b.size if mask is None else mask.sum())
    if a_mask is not None:
        k += int(a_mask.sum())
    data_rng = make_rng(config.seed, _DATA_STREAM)
    noise_rng = make_rng(config.seed, _NOISE_STREAM)
    opt = OptimizerState.from_config(config)
    masks = {"b": mask}
    if train_a:
        masks["a"] = a_mask

    tracing = config.trace_every > 0
    trace = [] if tracing else None
    start = time.perf_counter()
    rel0 = relative_mse(task, model)
    records = [{"step": 0, "train_loss": rel0 * task.baseline_mse, "relative_mse": rel0}]
    for step in range(1, config.steps + 1):
        batch = sample_batch(task, config.batch, data_rng)
        grads = backward(model, batch)
        if not np.isfinite(grads.loss):
            raise DivergedError(step)
        params = {"b": model.b}
        gdict = {"b": grads.d_b}
        if train_a:
            params["a"] = model.a
            gdict["a"] = grads.d_a
        new = _step(params, gdict, masks, opt, noise_rng)
        if tracing and len(trace) < config.trace_len and (step - 1) % config.trace_every == 0:
            trace.append(opt.last_grad["b"].ravel().copy())
        model.b = new["b"]
        if train_a:
            model.a = new["a"]
        if step % config.eval_every == 0 or step == config.steps:
            rel = relative_mse(task, model)
            if not np.isfinite(rel):
                raise DivergedError(step)
            records.append({"step": step, "train_loss": grads.loss, "relative_mse": rel})
    return RunReport(records, records[-1]["relative_mse"], asdict(config),
                     time.perf_counter() - start, k, trace, model)


def update_energy(b_final: np.ndarray, mask, reference_mask) -> float:
    """Mean squared displacement inside ``mask`` over that inside ``reference_mask``.

    B starts at zero, so the trained values are the displacement.
    """
    b_final = np.asarray(b_final)
    mask = mask_of(mask, b_final.shape)
    reference_mask = mask_of(reference_mask, b_final.shape)
    if not mask.any() or not reference_mask.any():
        raise ValueError("update energy needs non-empty masks")
    ref = float(np.mean(np.square(b_final[reference_mask])))
    if ref == 0:
        raise ZeroDivisionError("reference-mask update energy is zero")
    return float(np.mean(np.square(b_final[mask]))) / ref
