"""Two-layer ReLU MLP with a rank-r LoRA adapter on the first layer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core_math import as_matrix, kaiming_normal

IN_DIM = 128
HIDDEN_DIM = 64
OUT_DIM = 32
RANK = 16


@dataclass
class AdaptedModel:
    w1: np.ndarray
    w2: np.ndarray
    a: np.ndarray
    b: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.w1 = as_matrix(self.w1, "w1")
        self.w2 = as_matrix(self.w2, "w2")
        self.a = as_matrix(self.a, "a")
        self.b = as_matrix(self.b, "b")
        hidden, in_dim = self.w1.shape
        if self.w2.shape[1] != hidden:
            raise ValueError(f"w2 {self.w2.shape} does not match hidden size {hidden}")
        if self.a.shape[1] != in_dim:
            raise ValueError(f"a {self.a.shape} does not match input size {in_dim}")
        if self.b.shape != (hidden, self.a.shape[0]):
            raise ValueError(f"b must be {(hidden, self.a.shape[0])}, got {self.b.shape}")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int = IN_DIM, hidden: int = HIDDEN_DIM,
             out_dim: int = OUT_DIM, rank: int = RANK, scale: float = 1.0) -> "AdaptedModel":
        w1 = kaiming_normal(rng, hidden, in_dim)
        w2 = kaiming_normal(rng, out_dim, hidden)
        a = kaiming_normal(rng, rank, in_dim)
        return cls(w1, w2, a, np.zeros((hidden, rank)), scale)

    def copy(self, **changes) -> "AdaptedModel":
        fields = dict(w1=self.w1.copy(), w2=self.w2.copy(), a=self.a.copy(), b=self.b.copy())
        fields.update(changes)
        return replace(self, **fields)


@dataclass
class Batch:
    x: np.ndarray  # in_dim x batch
    y: np.ndarray  # out_dim x batch

    def __post_init__(self):
        if self.x.shape[1] != self.y.shape[1]:
            raise ValueError("x and y must have the same number of columns")

    @property
    def size(self) -> int:
        return self.x.shape[1]


@dataclass
class Gradients:
    d_b: np.ndarray
    d_a: np.ndarray
    loss: float
    extra: dict = field(default_factory=dict)


def merge_effective_weight(model: AdaptedModel) -> np.ndarray:
    return model.w1 + model.scale * (model.b @ model.a)


def _check_input(model: AdaptedModel, x: np.ndarray) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[0] != model.in_dim:
        raise ValueError(f"x has {x.shape[0]} rows, model expects {model.in_dim}")
    return x


def forward(model: AdaptedModel, x) -> np.ndarray:
    x = _check_input(model, x)
    h = model.w1 @ x
    if model.scale != 0 and np.any(model.b):
        h = h + model.scale * (model.b @ (model.a @ x))
    return model.w2 @ np.maximum(h, 0.0)


def forward_merged(w1_eff: np.ndarray, w2: np.ndarray, x) -> np.ndarray:
    return w2 @ np.maximum(w1_eff @ x, 0.0)


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.square(pred - target)))


def backward(model: AdaptedModel, batch: Batch) -> Gradients:
    """Loss and analytic gradients w.r.t. B and A.

    The loss is the mean over output units and examples. ReLU'(0) is 0.
    """
    x = _check_input(model, batch.x)
    ax = model.a @ x
    h = model.w1 @ x
    if np.any(model.b):
        h = h + model.scale * (model.b @ ax)
    act = np.maximum(h, 0.0)
    pred = model.w2 @ act
    resid = pred - batch.y
    loss = float(np.mean(np.square(resid)))
    d_pred = (2.0 / resid.size) * resid
    d_h = (model.w2.T @ d_pred) * (h > 0)
    # d(loss)/d(W_eff) = d_h x^T; B and A only see it through scale * B A
    d_b = model.scale * (d_h @ ax.T)
    d_a = model.scale * ((model.b.T @ d_h) @ x.T)
    return Gradients(d_b=d_b, d_a=d_a, loss=loss)


def save_checkpoint(model: AdaptedModel, path, seed: int | None = None) -> None:
    payload = {
        "schema_version": 1,
        "dims": {"in": model.in_dim, "hidden": model.w1.shape[0], "out": model.out_dim,
                 "rank": model.rank},
        "seed": seed,
        "scale": model.scale,
        "w1": model.w1.tolist(),
        "w2": model.w2.tolist(),
        "a": model.a.tolist(),
        "b": model.b.tolist(),
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> AdaptedModel:
    data = json.loads(Path(path).read_text())
    return AdaptedModel(
        w1=np.array(data["w1"]), w2=np.array(data["w2"]),
        a=np.array(data["a"]), b=np.array(data["b"]), scale=float(data.get("scale", 1.0)),
    )
