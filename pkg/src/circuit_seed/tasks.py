"""Synthetic teacher/student regression tasks.

Two targets share one base network:

* ``dense_rank2`` - the teacher's first layer differs from the base by a
  rank-2 residual ``U V`` whose row space lies inside the adapter's
  frozen projection, so it is reachable by a dense (every hidden unit)
  rank-2 ``B``.
* ``sparse_b`` - the teacher is the base plus ``B* A`` with ``B*``
  near-sparse: a handful of large entries and many tiny ones.

Inputs are standard normal; targets are noiseless teacher outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core_math import make_rng
from .lora_mlp import AdaptedModel, Batch, forward, forward_merged, merge_effective_weight, mse_loss

DENSE = "dense_rank2"
SPARSE = "sparse_b"
HELDOUT_SIZE = 4096

# stream tags under the task seed
_BASE_STREAM = 0
_TARGET_STREAM = 1
_HELDOUT_STREAM = 2


class DegenerateTaskError(ValueError):
    pass


@dataclass(frozen=True)
class TargetSpec:
    kind: str = SPARSE
    residual_rank: int = 2
    sparse_fraction: float = 0.05
    large_std: float = 0.3
    small_std: float = 0.01
    residual_factor_std: float = 0.3
    residual_in_adapter_span: bool = True
    heldout_size: int = HELDOUT_SIZE
    seed: int = 0
    base_seed: int | None = None  # defaults to seed; set it to share a base across targets

    def __post_init__(self):
        if self.kind not in (DENSE, SPARSE):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not 0 < self.sparse_fraction < 1:
            raise ValueError("sparse_fraction must lie in (0, 1)")
        if min(self.large_std, self.small_std, self.residual_factor_std) < 0:
            raise ValueError("standard deviations must be non-negative")
        if self.residual_rank < 1:
            raise ValueError("residual_rank must be >= 1")


@dataclass
class TaskInstance:
    spec: TargetSpec
    base: AdaptedModel
    target_w1: np.ndarray
    heldout: Batch
    baseline_mse: float
    true_b: np.ndarray | None = None
    large_mask: np.ndarray | None = None

    def target_forward(self, x) -> np.ndarray:
        return forward_merged(self.target_w1, self.base.w2, x)

    def fresh_model(self) -> AdaptedModel:
        return self.base.copy()

    def manifest(self) -> dict:
        m = self.base
        return {
            "schema_version": 1,
            "kind": self.spec.kind,
            "seed": self.spec.seed,
            "dims": {"in": m.in_dim, "hidden": m.w1.shape[0], "out": m.out_dim, "rank": m.rank},
            "baseline_mse": self.baseline_mse,
            "heldout_size": self.heldout.size,
            "params": asdict(self.spec),
            "n_large": None if self.large_mask is None else int(self.large_mask.sum()),
        }

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))


def n_large_entries(spec: TargetSpec, size: int) -> int:
    return int(round(spec.sparse_fraction * size))


def _dense_residual(spec: TargetSpec, base: AdaptedModel, rng: np.random.Generator) -> np.ndarray:
    hidden, in_dim = base.w1.shape
    u = rng.normal(0.0, spec.residual_factor_std, size=(hidden, spec.residual_rank))
    if spec.residual_in_adapter_span:
        coef = rng.normal(size=(spec.residual_rank, base.rank))
        v = coef @ base.a
        # rescale so V's entries have the requested RMS
        v *= spec.residual_factor_std / np.sqrt(np.mean(np.square(v)))
    else:
        v = rng.normal(0.0, spec.residual_factor_std, size=(spec.residual_rank, in_dim))
    return u @ v


def _sparse_b(spec: TargetSpec, base: AdaptedModel, rng: np.random.Generator):
    shape = base.b.shape
    size = shape[0] * shape[1]
    n_large = n_large_entries(spec, size)
    idx = rng.choice(size, size=n_large, replace=False)
    large = np.zeros(size, dtype=bool)
    large[idx] = True
    vals = rng.normal(0.0, spec.small_std, size=size)
    vals[idx] = rng.normal(0.0, spec.large_std, size=n_large)
    return vals.reshape(shape), large.reshape(shape)


def make_task(spec: TargetSpec) -> TaskInstance:
    base_seed = spec.seed if spec.base_seed is None else spec.base_seed
    base = AdaptedModel.init(make_rng(base_seed, _BASE_STREAM))
    trng = make_rng(spec.seed, _TARGET_STREAM)
    true_b = large = None
    if spec.kind == DENSE:
        target_w1 = base.w1 + _dense_residual(spec, base, trng)
    else:
        true_b, large = _sparse_b(spec, base, trng)
        target_w1 = merge_effective_weight(base.copy(b=true_b))

    hrng = make_rng(spec.seed, _HELDOUT_STREAM)
    x = hrng.standard_normal((base.in_dim, spec.heldout_size))
    heldout = Batch(x, forward_merged(target_w1, base.w2, x))
    baseline = mse_loss(forward(base, heldout.x), heldout.y)
    if not baseline > 0:
        raise DegenerateTaskError("base model already matches the target (baseline MSE is 0)")
    return TaskInstance(spec, base, target_w1, heldout, baseline, true_b, large)


def sample_batch(task: TaskInstance, batch: int, rng: np.random.Generator) -> Batch:
    if batch < 1:
        raise ValueError("batch must be >= 1")
    x = rng.standard_normal((task.base.in_dim, batch))
    return Batch(x, task.target_forward(x))


def relative_mse(task: TaskInstance, model: AdaptedModel, eval_set: Batch | None = None) -> float:
    if not task.baseline_mse > 0:
        raise DegenerateTaskError("baseline MSE is zero")
    eval_set = task.heldout if eval_set is None else eval_set
    return mse_loss(forward(model, eval_set.x), eval_set.y) / task.baseline_mse
