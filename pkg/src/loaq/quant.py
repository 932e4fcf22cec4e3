"""Uniform Min-Max grids, round-to-nearest, and the LDLQ/GPTQ sequential solver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ReverseCholeskyFactor, as_matrix, reverse_cholesky

CHANNEL = "channel"  # one grid per column of an N x M weight (output feature)
TOKEN = "token"  # one grid per row of a T x N activation


def round_half_away(x) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    r = np.floor(a)
    r += (a - r) >= 0.5
    return np.copysign(r, x)


@dataclass(frozen=True)
class QuantParams:
    bits: int
    scale: np.ndarray
    zero_point: np.ndarray
    axis: str = CHANNEL

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if self.axis not in (CHANNEL, TOKEN):
            raise ValueError(f"unknown quantization axis {self.axis!r}")
        if np.any(self.scale <= 0):
            raise ValueError("scale entries must be positive")
        if np.any((self.zero_point < 0) | (self.zero_point > self.maxq)):
            raise ValueError("zero_point out of range")

    @property
    def maxq(self) -> int:
        return 2**self.bits - 1

    def quantize(self, w) -> np.ndarray:
        """Integer codes for ``w`` (same layout the params were fitted on).

        ``w`` may also be a single row of an N x M weight when ``axis`` is
        per-channel; the per-column grids broadcast across it.
        """
        w = np.asarray(w, dtype=np.float64)
        if self.axis == CHANNEL:
            s, z = self.scale, self.zero_point
        else:
            s, z = self.scale[:, None], self.zero_point[:, None]
        return np.clip(round_half_away(w / s + z), 0, self.maxq).astype(np.int64)

    def dequantize(self, codes) -> np.ndarray:
        codes = np.asarray(codes)
        if self.axis == CHANNEL:
            return self.scale * (codes - self.zero_point)
        return self.scale[:, None] * (codes - self.zero_point[:, None])

    def snap(self, w) -> np.ndarray:
        """Nearest grid value, i.e. ``Quant(w)``."""
        return self.dequantize(self.quantize(w))


def minmax_params(w, bits: int, axis: str = CHANNEL) -> QuantParams:
    """Asymmetric Min-Max grid per output channel (columns) or per token (rows).

    The range is widened to contain zero so the zero point is always a valid
    code and every value lies within half a step of the grid.
    """
    w = as_matrix(w, "W")
    if not 2 <= bits <= 16:
        raise ValueError(f"bits must be in [2, 16], got {bits}")
    red = 0 if axis == CHANNEL else 1
    lo = np.minimum(w.min(axis=red), 0.0)
    hi = np.maximum(w.max(axis=red), 0.0)
    maxq = 2**bits - 1
    flat = hi == lo
    scale = np.where(flat, 1.0, (hi - lo) / maxq)
    zp = np.where(flat, 0.0, round_half_away(-lo / scale))
    zp = np.clip(zp, 0, maxq).astype(np.int64)
    return QuantParams(bits=bits, scale=scale, zero_point=zp, axis=axis)


def rtn_quantize(w, params: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """Round-to-nearest: returns ``(codes, dequantized)``."""
    codes = params.quantize(w)
    return codes, params.dequantize(codes)


def quantize_activations(x, bits: int) -> np.ndarray:
    """Dynamic per-token Min-Max fake quantization of a T x N activation."""
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    x2 = x.reshape(-1, shape[-1])
    params = minmax_params(x2, bits, axis=TOKEN)
    return params.snap(x2).reshape(shape)


@dataclass(frozen=True)
class GPTQConfig:
    perc_damp: float = 0.01
    reorder: bool = True

    def __post_init__(self):
        if not self.perc_damp > 0:
            raise ValueError("perc_damp must be positive")


def dampen(h, perc_damp: float) -> np.ndarray:
    """``H + lambda I`` with ``lambda = perc_damp * mean(diag H)``."""
    h = as_matrix(h, "H")
    lam = perc_damp * float(np.mean(np.diag(h)))
    if lam <= 0:
        # all-zero Hessian (dead inputs): any positive ridge keeps it SPD
        lam = perc_damp
    out = h.copy()
    out[np.diag_indices_from(out)] += lam
    return out


def hessian_order(h: np.ndarray, reorder: bool) -> np.ndarray:
    """Input-dimension processing order: diag(H) descending (stable)."""
    n = h.shape[0]
    if not reorder:
        return np.arange(n)
    return np.argsort(-np.diag(h), kind="stable")


def ldlq_target(w: np.ndarray, factor: ReverseCholeskyFactor, e: np.ndarray, i: int) -> np.ndarray:
    """Row ``i`` of ``W - D^{-1}(L - D)E`` where ``E = Q - W``.

    Shared by the solver and by fixed-point checks so both evaluate the
    compensation with the same floating-point operations.
    """
    row = factor.L[i].copy()
    row[i] = 0.0
    return w[i] - (row @ e) / factor.d[i]


def ldlq(w, factor: ReverseCholeskyFactor, params: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """Row-sequential LDLQ rounding in the given order.

    ``w`` is N x M and ``factor`` is the reverse Cholesky factor of the
    (already permuted and dampened) N x N Hessian. Returns ``(codes, Q)``.
    """
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[0]
    e = np.zeros_like(w)
    q = np.empty_like(w)
    codes = np.empty(w.shape, dtype=np.int64)
    for i in range(n):
        target = ldlq_target(w, factor, e, i)
        codes[i] = params.quantize(target)
        q[i] = params.dequantize(codes[i])
        e[i] = q[i] - w[i]
    return codes, q


def fixed_point_residual(w, factor: ReverseCholeskyFactor, params: QuantParams, q) -> np.ndarray:
    """``Quant(W - D^{-1}(L-D)(Q-W)) - Q`` evaluated at a final ``Q``."""
    w = np.asarray(w, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    e = q - w
    rhs = np.stack([params.snap(ldlq_target(w, factor, e, i)) for i in range(w.shape[0])])
    return rhs - q


@dataclass
class GPTQResult:
    codes: np.ndarray
    Q: np.ndarray
    perm: np.ndarray
    factor: ReverseCholeskyFactor


def gptq_solve(w, h, params: QuantParams, cfg: GPTQConfig = GPTQConfig(), context: str = "") -> GPTQResult:
    """GPTQ with its intermediate state (permutation and factor) exposed."""
    w = as_matrix(w, "W")
    h = as_matrix(h, "H")
    if h.shape != (w.shape[0], w.shape[0]):
        raise ValueError(f"H shape {h.shape} does not match W rows {w.shape[0]}")
    hd = dampen(h, cfg.perc_damp)
    perm = hessian_order(hd, cfg.reorder)
    factor = reverse_cholesky(hd[np.ix_(perm, perm)], context=context)
    codes_p, q_p = ldlq(w[perm], factor, params)
    inv = np.argsort(perm)
    return GPTQResult(codes=codes_p[inv], Q=q_p[inv], perm=perm, factor=factor)


def gptq_quantize(w, h, params: QuantParams, cfg: GPTQConfig = GPTQConfig(), context: str = "") -> np.ndarray:
    return gptq_solve(w, h, params, cfg, context).Q


def surrogate_loss(q, w, h) -> float:
    """``tr((Q - W)^T H (Q - W))``."""
    e = np.asarray(q, dtype=np.float64) - np.asarray(w, dtype=np.float64)
    return float(np.sum(e * (np.asarray(h) @ e)))
