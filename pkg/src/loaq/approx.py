"""Error-compensation statistics and the LLOA / SOA / NOA weight updates.

Each update rewrites a target weight ``W`` into ``W~`` so that a plain
activation-aware quantizer minimizing ``||X^(Q - W~)||`` solves the
corresponding output-matching problem.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .linalg import spd_solve
from .quant import dampen

METHODS = ("rtn", "gptq", "lloa", "loaq")


@dataclass
class OAState:
    """Running ``H = X^T X^`` and ``C = X^T (X - X^)`` plus optional residual term."""

    H: np.ndarray
    C: np.ndarray
    delta: np.ndarray | None = None
    token_count: int = 0

    @classmethod
    def empty(cls, n: int) -> "OAState":
        return cls(H=np.zeros((n, n)), C=np.zeros((n, n)))

    def update(self, x, x_hat) -> "OAState":
        x = np.asarray(x, dtype=np.float64)
        x_hat = np.asarray(x_hat, dtype=np.float64)
        if x.shape != x_hat.shape or x.ndim != 2 or x.shape[1] != self.H.shape[0]:
            raise ValueError(f"shape mismatch: X {x.shape}, X^ {x_hat.shape}, H {self.H.shape}")
        self.H += x_hat.T @ x_hat
        self.C += x_hat.T @ (x - x_hat)
        self.token_count += x.shape[0]
        return self

    def dampened(self, perc_damp: float) -> "OAState":
        return OAState(H=dampen(self.H, perc_damp), C=self.C, delta=self.delta, token_count=self.token_count)


def accumulate_stats(x, x_hat, batch_size: int | None = None) -> OAState:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: X {x.shape}, X^ {x_hat.shape}")
    state = OAState.empty(x.shape[1])
    step = batch_size or max(len(x), 1)
    for start in range(0, len(x), step):
        state.update(x[start : start + step], x_hat[start : start + step])
    return state


@dataclass(frozen=True)
class MethodConfig:
    method: str = "loaq"
    alpha: float = 0.0
    beta: float = 0.0
    use_hadamard: bool = False
    w4a4: bool = False
    act_bits: int | None = None
    # NOA rescaling of W_out statistics; only meaningful for "loaq"
    noa: bool = True
    # optional per-sub-layer-kind overrides: {"attn": (alpha, beta), ...}
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for kind, (a, b) in [("", (self.alpha, self.beta)), *self.overrides.items()]:
            if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
                raise ValueError(f"alpha/beta must lie in [0, 1]{' for ' + kind if kind else ''}")
        if self.w4a4 and self.act_bits is None:
            object.__setattr__(self, "act_bits", 4)
        if self.act_bits is not None and not 2 <= self.act_bits <= 16:
            raise ValueError("act_bits must be in [2, 16]")

    def coefficients(self, kind: str) -> tuple[float, float]:
        """Effective (alpha, beta) for a sub-layer kind after method selection."""
        a, b = self.overrides.get(kind, (self.alpha, self.beta))
        if self.method in ("rtn", "gptq"):
            return 0.0, 0.0
        if self.method == "lloa":
            return a, 0.0
        return a, b

    @property
    def activation_bits(self) -> int | None:
        return self.act_bits if self.w4a4 else None


def _correction(w, state: OAState) -> np.ndarray:
    return spd_solve(state.H, state.C @ w)


def lloa_update(w, state: OAState, alpha: float) -> np.ndarray:
    """``W + alpha H^{-1} C W``; ``state.H`` must already be SPD (dampened)."""
    w = np.asarray(w, dtype=np.float64)
    if alpha == 0.0:
        return w.copy()
    return w + alpha * _correction(w, state)


def residual_delta(h_matrix, x_hat, target_resid) -> np.ndarray:
    """``H^{-1} X^^T (h - h^)`` for a target residual ``h - h^``."""
    return spd_solve(h_matrix, np.asarray(x_hat).T @ np.asarray(target_resid))


def soa_update(w, state: OAState, alpha: float, beta: float) -> np.ndarray:
    """``(I + alpha H^{-1} C) W + beta * delta``."""
    out = lloa_update(w, state, alpha)
    if beta != 0.0:
        if state.delta is None:
            raise ValueError("soa_update needs state.delta")
        out = out + beta * state.delta
    return out


def rms_scale(x, eps: float) -> np.ndarray:
    """Per-row ``(mean(x^2) + eps)^{-1/2}``."""
    x = np.asarray(x, dtype=np.float64)
    return 1.0 / np.sqrt(np.mean(x * x, axis=-1) + eps)


def noa_rescale(h, h_hat, x, x_hat, w, eps: float = 1e-6):
    """Per-token rescaling that linearizes the normalized sub-layer objective.

    The normalization scalers are evaluated with the full-precision ``W`` on
    both branches. Returns ``(X', X^', s h - s^ h^)``.
    """
    w = np.asarray(w, dtype=np.float64)
    s = rms_scale(h + x @ w, eps)
    s_hat = rms_scale(h_hat + x_hat @ w, eps)
    return s[:, None] * x, s_hat[:, None] * x_hat, s[:, None] * h - s_hat[:, None] * h_hat


def ls_target(x_hat, y, perc_damp: float = 0.01) -> np.ndarray:
    """Normal-equations solution ``(X^T X)^{-1} X^T Y``.

    A rank-deficient Gram matrix is dampened (with a warning) instead of
    pseudo-inverted.
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    gram = x_hat.T @ x_hat
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        warnings.warn("X^T X is rank deficient; returning a dampened solution", RuntimeWarning, stacklevel=2)
        gram = dampen(gram, perc_damp)
    return spd_solve(gram, x_hat.T @ np.asarray(y, dtype=np.float64))
