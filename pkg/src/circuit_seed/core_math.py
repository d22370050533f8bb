"""Dense linear algebra, seeded generators and a one-sided Jacobi SVD.

Matrices are plain 2-D float64 numpy arrays. Random state is a
``numpy.random.Generator`` backed by PCG64; helpers below derive
independent child streams from integer seeds so that every experiment
cell owns its own stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

SeedLike = Union[int, np.random.Generator, np.random.SeedSequence]

MAX_SWEEPS = 100
ROTATION_TOL = 1e-12


class NumericalError(RuntimeError):
    """An iterative routine failed to converge."""

    def __init__(self, message: str, iterations: int):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


def make_rng(seed: SeedLike, *tags: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed``, optionally keyed by integer tags.

    Tags let callers carve independent streams out of one master seed,
    e.g. ``make_rng(seed, TASK_STREAM, cell_index)``.
    """
    if isinstance(seed, np.random.Generator):
        if tags:
            raise ValueError("tags cannot be combined with an existing Generator")
        return seed
    if isinstance(seed, np.random.SeedSequence):
        entropy = seed.entropy
        key = tuple(seed.spawn_key) + tuple(int(t) for t in tags)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy, spawn_key=key)))
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(t) for t in tags))
    return np.random.Generator(np.random.PCG64(ss))


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def gaussian_fill(rng: np.random.Generator, rows: int, cols: int,
                  mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError("std must be non-negative")
    if std == 0:
        return np.full((rows, cols), float(mean))
    return rng.normal(mean, std, size=(rows, cols))


def kaiming_normal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """He-normal init for a ``rows x cols`` weight with fan_in = cols."""
    return gaussian_fill(rng, rows, cols, 0.0, np.sqrt(2.0 / cols))


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray
    sweeps: int = 0

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds (n even) of n/2 disjoint column pairs."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        left = players[: m // 2]
        right = players[m // 2:][::-1]
        pairs = [(p, q) if p < q else (q, p) for p, q in zip(left, right) if p < n and q < n]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` flagged invalid by an orthonormal completion."""
    if valid.all():
        return u
    u = u.copy()
    basis = u[:, valid]
    rows = u.shape[0]
    for j in np.flatnonzero(~valid):
        for e in range(rows):
            cand = np.zeros(rows)
            cand[e] = 1.0
            for _ in range(2):
                cand -= basis @ (basis.T @ cand)
            nrm = np.linalg.norm(cand)
            if nrm > 1e-6:
                cand /= nrm
                break
        u[:, j] = cand
        basis = np.column_stack([basis, cand])
    return u


def _jacobi_tall(m: np.ndarray, max_sweeps: int, tol: float) -> SvdResult:
    rows, cols = m.shape
    work = m.copy()
    v = np.eye(cols)
    schedule = _round_robin(cols)
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for p, q in schedule:
            wp, wq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            denom = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                off = np.where(denom > 0, np.abs(gamma) / denom, 0.0)
            act = off > tol
            if not act.any():
                continue
            rotated = True
            p, q = p[act], q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp, wq = work[:, p], work[:, q]
            work[:, p] = c * wp - s * wq
            work[:, q] = s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericalError("one-sided Jacobi SVD did not converge", max_sweeps)

    s = np.linalg.norm(work, axis=0)
    order = np.argsort(-s, kind="stable")
    s = s[order]
    work = work[:, order]
    v = v[:, order]
    scale = s[0] if s.size and s[0] > 0 else 1.0
    valid = s > scale * 1e-14
    u = np.zeros_like(work)
    u[:, valid] = work[:, valid] / s[valid]
    s = np.where(valid, s, 0.0)
    u = _complete_basis(u, valid)
    return SvdResult(u=u, s=s, vt=v.T, sweeps=sweep)


def svd(m, max_sweeps: int = MAX_SWEEPS, tol: float = ROTATION_TOL) -> SvdResult:
    """Thin SVD by one-sided Jacobi rotations.

    Returns ``u`` (rows x p), ``s`` (p,) and ``vt`` (p x cols) with
    p = min(rows, cols). Wide inputs are handled through the transpose.
    """
    m = as_matrix(m)
    if m.size == 0:
        raise ValueError("svd of an empty matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("svd input contains non-finite entries")
    rows, cols = m.shape
    if cols > rows:
        r = _jacobi_tall(m.T, max_sweeps, tol)
        return SvdResult(u=r.vt.T, s=r.s, vt=r.u.T, sweeps=r.sweeps)
    return _jacobi_tall(m, max_sweeps, tol)


def singular_values(m) -> np.ndarray:
    return svd(m).s


def frobenius(m) -> float:
    return float(np.sqrt(np.sum(np.square(m))))


def flatten_all(mats: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(x) for x in mats])
