"""Gumbel-Max, Gumbel-Softmax, straight-through estimators and noise inference.

Logits ``a`` and noise ``g`` are vectors over the vocabulary (or ``(B, K)``
batches of them; every function works on the last axis).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

U_CLAMP = 1e-12
LOW_TEMPERATURE = 0.01


def _clamp(u):
    return np.clip(u, U_CLAMP, 1.0 - U_CLAMP)


def sample_gumbel(u):
    """Inverse-CDF transform ``-log(-log(u))`` with ``u`` clamped away from 0 and 1."""
    u = _clamp(np.asarray(u, dtype=np.float64))
    out = -np.log(-np.log(u))
    return float(out) if out.ndim == 0 else out


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    return sample_gumbel(rng.random(shape))


def _argmax_lowest(x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest index
    return np.argmax(x, axis=-1)


def gumbel_max(a, g) -> np.ndarray | int:
    """Index of ``argmax(g + a)``; ties resolve to the lowest index."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if a.shape != g.shape:
        raise ad.DimensionError(f"logits {a.shape} vs noise {g.shape}")
    if a.shape[-1] == 0:
        raise ad.DimensionError("gumbel_max of empty vectors")
    idx = _argmax_lowest(a + g)
    return int(idx) if idx.ndim == 0 else idx


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0:
        raise ad.DomainError(f"temperature must be positive, got {tau}")
    return tau


def check_temperature(tau: float) -> float:
    """Validate a configured temperature, warning when gradients will vanish."""
    tau = _check_tau(tau)
    if tau < LOW_TEMPERATURE:
        warnings.warn(
            f"temperature {tau} < {LOW_TEMPERATURE}: relaxed gradients will be vanishingly small",
            stacklevel=2,
        )
    return tau


def relaxed_softmax(a: Tensor, offset: np.ndarray | None, tau: float) -> Tensor:
    """``softmax((offset + a) / tau)`` with the Jacobian ``y_i (d_ij - y_j) / tau``.

    ``offset`` is treated as a constant (the Gumbel noise, or ``None`` for the
    plain straight-through estimator).
    """
    tau = _check_tau(tau)
    a = ad.as_tensor(a)
    x = a.data if offset is None else a.data + offset
    z = (x - x.max(axis=-1, keepdims=True)) / tau
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        # sum_j y_j (g_i - g_j) rather than g_i - sum_j y_j g_j: no cancellation when y_i ~ 1
        centred = np.einsum("...ij,...j->...i", g[..., :, None] - g[..., None, :], y)
        return (y * centred / tau,)

    return ad.custom_op(y, (a,), backward)


def gumbel_softmax(a, g, tau: float) -> Tensor:
    """Relaxed one-hot sample ``softmax((g + a) / tau)``."""
    g = np.asarray(g, dtype=np.float64)
    a = ad.as_tensor(a)
    if a.shape != g.shape:
        raise ad.DimensionError(f"logits {a.shape} vs noise {g.shape}")
    return relaxed_softmax(a, g, tau)


def gumbel_softmax_jacobian(y: np.ndarray, tau: float) -> np.ndarray:
    """Explicit ``K x K`` matrix ``dy_i/da_j = y_i (delta_ij - y_j) / tau``."""
    y = np.asarray(y, dtype=np.float64)
    J = -np.outer(y, y)
    # diagonal y_i (1 - y_i) with 1 - y_i summed from the other entries
    rest = np.array([np.delete(y, i).sum() for i in range(y.size)])
    J[np.diag_indices_from(J)] = y * rest
    return J / _check_tau(tau)


def st_gumbel(a, g, tau: float) -> tuple[Tensor, Tensor]:
    """Straight-through Gumbel: one-hot forward value, Gumbel-Softmax gradient.

    Returns ``(hard, soft)``; ``hard`` carries the value of ``one_hot(argmax(g + a))``
    and back-propagates into ``a`` through ``soft``.
    """
    soft = gumbel_softmax(a, g, tau)
    idx = gumbel_max(ad.as_tensor(a).data, g)
    hard = _one_hot_like(idx, soft.shape)
    return ad.straight_through(hard, soft), soft


def st_plain(a, tau: float, rng: np.random.Generator | None = None, index=None) -> tuple[Tensor, Tensor]:
    """Plain straight-through: categorical sample forward, ``softmax(a / tau)`` backward.

    The gradient does not depend on which word was drawn. Pass ``index`` to
    fix the forward sample instead of drawing one from ``rng``.
    """
    a = ad.as_tensor(a)
    soft = relaxed_softmax(a, None, tau)
    if index is None:
        if rng is None:
            raise ValueError("st_plain needs an rng or an explicit index")
        index = gumbel_max(a.data, gumbel_noise(rng, a.shape))
    hard = _one_hot_like(index, soft.shape)
    return ad.straight_through(hard, soft), soft


def _one_hot_like(idx, shape) -> np.ndarray:
    out = np.zeros(shape)
    idx = np.asarray(idx, dtype=np.int64)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=-1, keepdims=True)))[..., 0]


def truncated_gumbel_noise(selected, a, u_top, u) -> np.ndarray:
    """Noise ``g`` consistent with ``selected`` given explicit uniforms.

    ``u_top`` drives the top Gumbel ``g' = G(u_top) + logsumexp(a)`` (one per
    row); ``u`` drives the unconstrained ``G(u_i) + a_i``. Non-selected
    entries are truncated below ``g'``; the result is ``g* - a``.
    """
    a = np.asarray(a, dtype=np.float64)
    sel = np.asarray(selected, dtype=np.int64)
    top = sample_gumbel(u_top) + _logsumexp(a)
    top = np.asarray(top, dtype=np.float64)
    free = sample_gumbel(u) + a
    top_b = top[..., None]
    # g' - log(1 + exp(g' - g~)), written with logaddexp to stay finite
    g_star = top_b - np.logaddexp(0.0, top_b - free)
    np.put_along_axis(g_star, sel[..., None], top_b, axis=-1)
    return g_star - a


def infer_noise(selected, a, rng: np.random.Generator) -> np.ndarray:
    """Draw Gumbel noise under which ``argmax(g + a)`` picks ``selected``.

    Works for a single ``(K,)`` vector with an int index or a ``(B, K)``
    batch with a ``(B,)`` index array. The returned noise is a sample from
    the Gumbel posterior given the observed maximum, built top-down.
    """
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    sel = np.asarray(selected, dtype=np.int64)
    K = a.shape[-1]
    if np.any(sel < 0) or np.any(sel >= K):
        raise IndexError(f"selected index out of range for {K} categories")
    u_top = rng.random(a.shape[:-1])
    u = rng.random(a.shape)
    g = truncated_gumbel_noise(sel, a, u_top, u)
    return _enforce_strict_max(g, a, sel)


def _enforce_strict_max(g: np.ndarray, a: np.ndarray, sel: np.ndarray) -> np.ndarray:
    # Truncation gives g*_i < g' mathematically, but rounding in g* - a + a can
    # produce a tie when a truncated entry sits within an ulp of the top.
    is_sel = _one_hot_like(sel, a.shape) > 0
    for k in range(64):
        x = g + a
        top = np.take_along_axis(x, sel[..., None], axis=-1)
        bad = (x >= top) & ~is_sel
        if not bad.any():
            return g
        step = np.spacing(np.abs(top)) * 2.0**k
        g = np.where(bad, g - (x - top) - step, g)
    raise FloatingPointError("could not separate the selected entry")


@dataclass
class GumbelTrajectory:
    """Per-step hard word, relaxed word, noise and logits of one decoded sentence."""

    hard: list[int] = field(default_factory=list)
    soft: list[np.ndarray] = field(default_factory=list)
    noise: list[np.ndarray] = field(default_factory=list)
    logits: list[np.ndarray] = field(default_factory=list)
    tau: float = 1.0

    def __len__(self) -> int:
        return len(self.hard)

    def consistent(self) -> bool:
        """``argmax(g^t + a^t) == y^t`` at every step."""
        return all(
            gumbel_max(a, g) == y for y, g, a in zip(self.hard, self.noise, self.logits)
        )
