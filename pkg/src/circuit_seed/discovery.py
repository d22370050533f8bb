"""Gradient statistics at the zero-adapter point and circuit selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_math import frobenius, make_rng
from .lora_mlp import AdaptedModel, backward
from .tasks import TaskInstance, sample_batch

ELEMENT_METHODS = ("s_hat", "f_hat", "magnitude", "wanda")
ROW_METHODS = ("row_f", "row_mag", "row_wanda")
METHODS = ELEMENT_METHODS + ROW_METHODS + ("random",)
_ROW_BASE = {"row_f": "f_hat", "row_mag": "magnitude", "row_wanda": "wanda"}


@dataclass
class GradStats:
    sum_g: np.ndarray
    sum_g2: np.ndarray
    n: int = 0

    @classmethod
    def zeros(cls, shape) -> "GradStats":
        return cls(np.zeros(shape), np.zeros(shape), 0)

    def add(self, g: np.ndarray) -> None:
        self.sum_g += g
        self.sum_g2 += g * g
        self.n += 1

    @property
    def mean(self) -> np.ndarray:
        return self.sum_g / self.n

    @property
    def second_moment(self) -> np.ndarray:
        return self.sum_g2 / self.n

    def variance(self) -> np.ndarray:
        """Population variance per entry, clamped at zero against rounding."""
        return np.maximum(self.second_moment - self.mean ** 2, 0.0)


def accumulate(model: AdaptedModel, task: TaskInstance, n: int, batch: int,
               rng: np.random.Generator, keep_samples: bool = False):
    """Run ``n`` forward/backward passes at B = 0 and accumulate dL/dB moments.

    Each pass draws a fresh batch; its batch-mean gradient counts as one
    sample. With ``keep_samples`` the per-pass gradients are returned too.
    """
    if np.any(model.b):
        raise ValueError("gradient statistics are only defined at the zero-adapter point (B = 0)")
    if n < 1:
        raise ValueError("n must be >= 1")
    stats = GradStats.zeros(model.b.shape)
    samples = []
    for _ in range(n):
        g = backward(model, sample_batch(task, batch, rng)).d_b
        stats.add(g)
        if keep_samples:
            samples.append(g)
    if keep_samples:
        return stats, samples
    return stats


def projected_weight(model: AdaptedModel) -> np.ndarray:
    """W1 A^T, the base weight seen through the adapter projection."""
    return model.w1 @ model.a.T


def score(stats: GradStats | None, method: str, model: AdaptedModel | None = None) -> np.ndarray:
    if method not in METHODS or method == "random":
        raise ValueError(f"unknown scoring method {method!r}")
    if method in ROW_METHODS:
        elem = score(stats, _ROW_BASE[method], model)
        return np.repeat(elem.sum(axis=1, keepdims=True), elem.shape[1], axis=1)
    if method == "magnitude":
        if model is None:
            raise ValueError("magnitude scoring needs the model")
        return np.abs(projected_weight(model))
    if stats is None or stats.n < 1:
        raise ValueError("scoring needs at least one accumulated pass")
    if method == "s_hat":
        return np.abs(stats.mean)
    if method == "f_hat":
        return stats.second_moment
    if model is None:
        raise ValueError("wanda scoring needs the model")
    return np.abs(projected_weight(model) * stats.mean)


@dataclass
class Circuit:
    entries: list  # [(row, col, score)], score desc then (row, col) asc
    shape: tuple = (64, 16)
    method: str = "s_hat"
    discovery_seed: int | None = None
    n_passes: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.entries)

    def coords(self) -> set:
        return {(r, c) for r, c, _ in self.entries}

    def mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        for r, c, _ in self.entries:
            m[r, c] = True
        return m

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "method": self.method,
            "k": self.k,
            "shape": list(self.shape),
            "n_passes": self.n_passes,
            "discovery_seed": self.discovery_seed,
            "entries": [[int(r), int(c), float(s)] for r, c, s in self.entries],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, data: dict) -> "Circuit":
        entries = [(int(r), int(c), float(s)) for r, c, s in data["entries"]]
        if len(entries) != data["k"]:
            raise ValueError("circuit file: k does not match number of entries")
        return cls(entries, tuple(data.get("shape", (64, 16))), data["method"],
                   data.get("discovery_seed"), data.get("n_passes", 0))

    @classmethod
    def load(cls, path) -> "Circuit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _ranked(scores: np.ndarray) -> np.ndarray:
    """Flat indices ordered by score descending, ties by flat (row, col) ascending."""
    flat = scores.ravel()
    # lexsort sorts by the last key first
    return np.lexsort((np.arange(flat.size), -flat))


def select_top_k(scores, k: int, method: str = "s_hat", rank: int | None = None,
                 discovery_seed: int | None = None, n_passes: int = 0) -> Circuit:
    scores = np.asarray(scores, dtype=np.float64)
    rows, cols = scores.shape
    if not 0 <= k <= scores.size:
        raise ValueError(f"k must lie in [0, {scores.size}], got {k}")
    if method in ROW_METHODS:
        rank = cols if rank is None else rank
        if k % rank:
            raise ValueError(f"row methods need k to be a multiple of the rank {rank}, got {k}")
        row_scores = scores.max(axis=1)
        order = np.lexsort((np.arange(rows), -row_scores))[: k // rank]
        entries = [(int(r), c, float(scores[r, c])) for r in order for c in range(cols)]
    else:
        order = _ranked(scores)[:k]
        entries = [(int(i // cols), int(i % cols), float(scores.flat[i])) for i in order]
    return Circuit(entries, (rows, cols), method, discovery_seed, n_passes)


def random_circuit(k: int, rng: np.random.Generator, shape=(64, 16),
                   discovery_seed: int | None = None) -> Circuit:
    size = shape[0] * shape[1]
    if not 0 <= k <= size:
        raise ValueError(f"k must lie in [0, {size}], got {k}")
    idx = np.sort(rng.choice(size, size=k, replace=False))
    entries = [(int(i // shape[1]), int(i % shape[1]), 0.0) for i in idx]
    return Circuit(entries, tuple(shape), "random", discovery_seed, 0)


def overlap(a: Circuit, b: Circuit) -> float:
    if a.k != b.k:
        raise ValueError(f"overlap needs equal budgets, got {a.k} and {b.k}")
    if a.k == 0:
        raise ValueError("overlap of empty circuits is undefined")
    return len(a.coords() & b.coords()) / a.k


def perturb_a(model: AdaptedModel, epsilon: float, rng: np.random.Generator) -> AdaptedModel:
    """Copy of ``model`` with A moved by a random direction of norm epsilon * ||A||_F."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if epsilon == 0:
        return model.copy()
    delta = rng.standard_normal(model.a.shape)
    a = model.a + epsilon * frobenius(model.a) * delta / frobenius(delta)
    return model.copy(a=a)


def discover(task: TaskInstance, method: str, k: int, n: int, batch: int,
             seed: int, model: AdaptedModel | None = None) -> Circuit:
    """accumulate + score + select_top_k (or a random draw) with one seed."""
    model = task.fresh_model() if model is None else model
    rng = make_rng(seed)
    if method == "random":
        return random_circuit(k, rng, model.b.shape, discovery_seed=seed)
    stats = None
    if method not in ("magnitude", "row_mag"):
        stats = accumulate(model, task, n, batch, rng)
    return select_top_k(score(stats, method, model), k, method, model.rank,
                        discovery_seed=seed, n_passes=n if stats else 0)
