"""Gradient-structure metrics, signal retention, knockout sweeps and alignment."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .core_math import make_rng, svd
from .lora_mlp import AdaptedModel, backward, merge_effective_weight
from .tasks import TaskInstance, relative_mse, sample_batch
from .training import NOISY, TrainConfig, clip_and_noise

_TRACE_STREAM = 20

KNOCKOUT_FRACTIONS = (0.001, 0.01, 0.03, 0.05, 0.10, 0.20, 0.35, 0.50, 0.75)
KNOCKOUT_SEED = 42


class UndefinedMetricError(ValueError):
    pass


def signal_retention(grad, mask) -> float:
    """Share of squared gradient norm that falls inside ``mask``."""
    g = np.ravel(np.asarray(grad, dtype=np.float64))
    m = np.ravel(np.asarray(mask, dtype=bool))
    if g.shape != m.shape:
        raise ValueError("gradient and mask sizes differ")
    total = float(g @ g)
    if total == 0:
        raise UndefinedMetricError("retention of a zero gradient is undefined")
    return float(np.sum(g[m] ** 2)) / total


def top_k_mask(values, k: int) -> np.ndarray:
    """Boolean mask of the k largest |values| (ties to the lower flat index)."""
    v = np.abs(np.ravel(values))
    order = np.lexsort((np.arange(v.size), -v))
    mask = np.zeros(v.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(np.shape(values))


def random_mask(shape, k: int, rng: np.random.Generator) -> np.ndarray:
    size = int(np.prod(shape))
    mask = np.zeros(size, dtype=bool)
    mask[rng.choice(size, size=k, replace=False)] = True
    return mask.reshape(shape)


def _trace_matrix(trace) -> np.ndarray:
    g = np.asarray([np.ravel(t) for t in trace], dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 2:
        raise UndefinedMetricError("gradient trace needs at least two snapshots")
    return g


def effective_rank(trace, kind: str = "participation") -> float:
    """Effective rank of the stacked T x d gradient matrix.

    ``participation``: (sum s^2)^2 / sum s^4 over singular values s.
    ``entropy``: exp of the Shannon entropy of the normalised s^2 spectrum.
    """
    g = _trace_matrix(trace)
    s = svd(g).s
    energy = s ** 2
    total = energy.sum()
    if total == 0:
        raise UndefinedMetricError("effective rank of an all-zero trace")
    if kind == "participation":
        return float(total ** 2 / np.sum(energy ** 2))
    if kind == "entropy":
        p = energy[energy > 0] / total
        return float(np.exp(-np.sum(p * np.log(p))))
    raise ValueError(f"unknown effective-rank kind {kind!r}")


def mean_cosine(trace) -> float:
    """Mean cosine similarity of consecutive snapshots; zero-norm pairs are skipped."""
    g = _trace_matrix(trace)
    norms = np.linalg.norm(g, axis=1)
    cos = []
    for t in range(len(g) - 1):
        if norms[t] == 0 or norms[t + 1] == 0:
            continue
        cos.append(float(g[t] @ g[t + 1]) / (norms[t] * norms[t + 1]))
    if not cos:
        raise UndefinedMetricError("no consecutive pair with non-zero gradients")
    return float(np.mean(cos))


def accumulation_efficiency(trace) -> float:
    """||sum_t g_t|| / sum_t ||g_t||."""
    g = _trace_matrix(trace)
    denom = float(np.sum(np.linalg.norm(g, axis=1)))
    if denom == 0:
        raise UndefinedMetricError("accumulation efficiency of an all-zero trace")
    return float(np.linalg.norm(g.sum(axis=0))) / denom


def init_gradient_trace(task: TaskInstance, config: TrainConfig, length: int = 50,
                        model: AdaptedModel | None = None) -> list:
    """Successive minibatch gradients at the zero-adapter point, as the regime's optimizer sees them.

    Each snapshot uses a fresh batch of ``config.batch`` examples; in the
    noisy regime the injected noise and clipping are applied, matching the
    update the optimizer would take from B = 0.
    """
    model = task.fresh_model() if model is None else model
    data_rng = make_rng(config.seed, _TRACE_STREAM, 0)
    noise_rng = make_rng(config.seed, _TRACE_STREAM, 1)
    trace = []
    for _ in range(length):
        g = backward(model, sample_batch(task, config.batch, data_rng)).d_b
        if config.regime == NOISY:
            g = clip_and_noise(g, config.noise_std, config.clip_norm, noise_rng)
        trace.append(g.ravel())
    return trace


@dataclass
class StructureReport:
    effective_rank: float
    mean_cosine: float
    accumulation_efficiency: float

    @classmethod
    def from_trace(cls, trace, rank_kind: str = "participation") -> "StructureReport":
        return cls(effective_rank(trace, rank_kind), mean_cosine(trace),
                   accumulation_efficiency(trace))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class KnockoutPoint:
    fraction_zeroed: float
    relative_mse: float


def knockout_count(fraction: float, size: int) -> int:
    # fractions like 0.07 * 100 land a hair above an integer in binary
    return min(size, math.ceil(round(fraction * size, 9)))


def knockout_sweep(trained: AdaptedModel, scores, fractions, task: TaskInstance,
                   rng: np.random.Generator | int = KNOCKOUT_SEED):
    """Zero the top-scored (or random) fraction of trained B and re-evaluate.

    Returns ``(circuit_curve, random_curve)`` as lists of KnockoutPoint. The
    random subsets come from one generator drawn in fraction order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != trained.b.shape:
        raise ValueError(f"scores shape {scores.shape} != B shape {trained.b.shape}")
    rng = make_rng(rng)
    size = trained.b.size
    flat_scores = scores.ravel()
    order = np.lexsort((np.arange(size), -flat_scores))
    circuit_curve, random_curve = [], []
    for f in fractions:
        if not 0 <= f <= 1:
            raise ValueError(f"knockout fraction {f} outside [0, 1]")
        n = knockout_count(f, size)
        keep_c = np.ones(size, dtype=bool)
        keep_c[order[:n]] = False
        keep_r = np.ones(size, dtype=bool)
        keep_r[rng.choice(size, size=n, replace=False)] = False
        for keep, curve in ((keep_c, circuit_curve), (keep_r, random_curve)):
            model = trained.copy(b=np.where(keep.reshape(trained.b.shape), trained.b, 0.0))
            curve.append(KnockoutPoint(float(f), relative_mse(task, model)))
    return circuit_curve, random_curve


def write_knockout_csv(circuit_curve, random_curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "circuit_mse", "random_mse"])
        for c, r in zip(circuit_curve, random_curve):
            w.writerow([c.fraction_zeroed, repr(c.relative_mse), repr(r.relative_mse)])


def sign_consistency(per_example_grads) -> np.ndarray:
    """Fraction of samples whose gradient sign agrees with the entry's majority sign.

    Zero gradients count as agreeing with the majority.
    """
    g = np.asarray(per_example_grads, dtype=np.float64)
    if g.shape[0] < 2:
        raise ValueError("sign consistency needs at least two samples")
    pos = np.sum(g > 0, axis=0)
    neg = np.sum(g < 0, axis=0)
    zero = g.shape[0] - pos - neg
    return (np.maximum(pos, neg) + zero) / g.shape[0]


def svd_alignment(delta_w, w0, r: int):
    """(left alignment with W0's top-r left singular subspace, top-r spectral ratio of delta_w)."""
    delta_w = np.asarray(delta_w, dtype=np.float64)
    w0 = np.asarray(w0, dtype=np.float64)
    if delta_w.shape != w0.shape:
        raise ValueError(f"shape mismatch {delta_w.shape} vs {w0.shape}")
    if not 1 <= r <= min(w0.shape):
        raise ValueError(f"r must lie in [1, {min(w0.shape)}]")
    total = float(np.sum(delta_w ** 2))
    if total == 0:
        raise UndefinedMetricError("alignment of a zero update is undefined")
    u_r = svd(w0).u[:, :r]
    left = float(np.sum((u_r.T @ delta_w) ** 2)) / total
    s = svd(delta_w).s
    spectral = float(np.sum(s[:r] ** 2) / np.sum(s ** 2))
    return min(left, 1.0), min(spectral, 1.0)


def adapter_update(model: AdaptedModel) -> np.ndarray:
    return merge_effective_weight(model) - model.w1
