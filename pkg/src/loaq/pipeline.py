"""Layer-wise quantization of a toy model, evaluation, and (alpha, beta) search."""

from __future__ import annotations

import logging
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .approx import MethodConfig, OAState, noa_rescale, residual_delta, soa_update
from .linalg import FactorizationError
from .model import (
    DualForward,
    QuantizedTensor,
    ToyModel,
    apply_hadamard,
    check_compatible,
    logits_from_state,
    residual_states,
    rmsnorm,
)
from .quant import GPTQConfig, gptq_solve, minmax_params, rtn_quantize, surrogate_loss

log = logging.getLogger(__name__)

ALPHA_GRID = tuple(round(0.1 * i, 10) for i in range(11))
BETA_GRID = tuple(round(0.05 * j, 10) for j in range(21))


@dataclass
class WeightRecord:
    name: str
    kind: str
    alpha: float
    beta: float
    loss_rtn: float | None
    loss_method: float | None
    noa: bool


@dataclass
class PipelineReport:
    config: dict
    weights: list[WeightRecord] = field(default_factory=list)
    metrics: dict | None = None
    grid: list[dict] | None = None
    timings: dict[str, float] = field(default_factory=lambda: defaultdict(float))

    def to_dict(self, include_timings: bool = False) -> dict:
        out = {"config": self.config, "weights": [asdict(w) for w in self.weights]}
        if self.metrics is not None:
            out["metrics"] = self.metrics
        if self.grid is not None:
            out["grid"] = self.grid
        if include_timings:
            out["timings"] = dict(self.timings)
        return out


class _Timer:
    def __init__(self, sink: dict, key: str):
        self.sink, self.key = sink, key

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.sink[self.key] += time.perf_counter() - self.t0


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def quantize_model(
    orig: ToyModel,
    calib,
    cfg: MethodConfig,
    bits: int,
    gptq: GPTQConfig = GPTQConfig(),
    eps: float | None = None,
) -> tuple[ToyModel, PipelineReport]:
    """Quantize every ``W_in``/``W_out`` in forward order.

    For each weight the activations of both branches are collected at the
    current frontier, the target is rewritten as
    ``(I + alpha H^-1 C) W + beta Delta`` and then rounded with GPTQ on ``H``.
    ``Delta`` (and the NOA per-token rescaling) only apply to ``W_out``.
    """
    calib = np.atleast_2d(np.asarray(calib))
    if calib.size == 0:
        raise ValueError("calibration set is empty")
    eps = orig.norm_eps if eps is None else eps
    report = PipelineReport(
        config={
            **asdict(cfg),
            "bits": bits,
            "perc_damp": gptq.perc_damp,
            "reorder": gptq.reorder,
            "eps": eps,
            "calib_shape": list(calib.shape),
        }
    )
    t = report.timings

    with _Timer(t, "hadamard"):
        base = apply_hadamard(orig) if cfg.use_hadamard and not orig.hadamard else orig.copy()
    quant = base.copy()
    quant.act_bits = cfg.activation_bits
    run = DualForward(base, quant, calib)

    def quantize_weight(k: int, which: str, x, x_hat, h=None, h_hat=None):
        sl = base.sublayers[k]
        w = getattr(sl, which)
        name = f"sublayers.{k}.{which}"
        alpha, beta = cfg.coefficients(sl.kind)
        if cfg.method == "rtn":
            params = minmax_params(w, bits)
            codes, q = rtn_quantize(w, params)
            quant.set_weight(k, which, q, QuantizedTensor(codes, params))
            report.weights.append(WeightRecord(name, sl.kind, 0.0, 0.0, None, None, False))
            return

        noa = which == "w_out" and cfg.method == "loaq" and cfg.noa and (alpha, beta) != (0.0, 0.0)
        with _Timer(t, "stats"):
            if noa:
                x, x_hat, target = noa_rescale(h, h_hat, x, x_hat, w, eps)
            elif which == "w_out":
                target = h - h_hat
            state = OAState.empty(w.shape[0]).update(x, x_hat)
            damped = state.dampened(gptq.perc_damp)
        try:
            with _Timer(t, "update"):
                if which == "w_in":
                    beta = 0.0  # no residual term for W_in
                elif beta != 0.0:
                    damped.delta = residual_delta(damped.H, x_hat, target)
                w_tilde = soa_update(w, damped, alpha, beta)
            with _Timer(t, "quantize"):
                params = minmax_params(w_tilde, bits)
                res = gptq_solve(w_tilde, state.H, params, gptq, context=name)
        except FactorizationError as exc:
            raise FactorizationError(exc.pivot, f"layer {name}") from None
        quant.set_weight(k, which, res.Q, QuantizedTensor(res.codes, params))
        _, q_rtn = rtn_quantize(w_tilde, params)
        report.weights.append(
            WeightRecord(
                name,
                sl.kind,
                alpha,
                beta,
                surrogate_loss(q_rtn, w_tilde, damped.H),
                surrogate_loss(res.Q, w_tilde, damped.H),
                noa,
            )
        )

    for k in range(len(run)):
        with _Timer(t, "forward"):
            x, x_hat = run.inputs()
        quantize_weight(k, "w_in", _flat(x), _flat(x_hat))
        with _Timer(t, "forward"):
            x, x_hat = run.hidden()
        quantize_weight(k, "w_out", _flat(x), _flat(x_hat), _flat(run.h), _flat(run.h_hat))
        with _Timer(t, "forward"):
            run.advance()
        log.debug("quantized sublayer %d/%d", k + 1, len(run))
    return quant, report


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layer_mse(h, h_hat, eps: float, outlier_mult: float | None = 5.0) -> dict:
    """Raw and RMS-normalized MSE between two residual states (tokens x N).

    Tokens whose reference norm exceeds ``outlier_mult`` times the median
    norm are left out.
    """
    a, b = _flat(h), _flat(h_hat)
    keep = np.ones(len(a), dtype=bool)
    if outlier_mult is not None:
        norms = np.linalg.norm(a, axis=1)
        keep = norms <= outlier_mult * np.median(norms)
    a, b = a[keep], b[keep]
    return {
        "mse_unnorm": float(np.mean((b - a) ** 2)),
        "mse_norm": float(np.mean((rmsnorm(b, eps) - rmsnorm(a, eps)) ** 2)),
        "tokens_excluded": int((~keep).sum()),
    }


def eval_model(orig: ToyModel, quant: ToyModel, heldout, outlier_mult: float | None = 5.0) -> dict:
    """Per-sub-layer output MSE (raw and normalized) plus logits MSE and KL."""
    check_compatible(orig, quant)
    heldout = np.atleast_2d(np.asarray(heldout))
    hs = residual_states(orig, heldout)
    hq = residual_states(quant, heldout)
    layers = [
        {"layer": k - 1, "kind": orig.sublayers[k - 1].kind, **layer_mse(hs[k], hq[k], orig.norm_eps, outlier_mult)}
        for k in range(1, len(hs))
    ]
    lo = logits_from_state(orig, hs[-1])
    lq = logits_from_state(quant, hq[-1])
    lp, lqq = _log_softmax(lo), _log_softmax(lq)
    kl = np.sum(np.exp(lp) * (lp - lqq), axis=-1)
    return {
        "layers": layers,
        "logits_mse": float(np.mean((lq - lo) ** 2)),
        "kl_mean": float(np.mean(kl)),
        "outlier_mult": outlier_mult,
        "outlier_rule": "stand-in: token excluded when its reference norm exceeds outlier_mult x median norm",
        "tokens": int(heldout.size),
    }


def logits_mse(orig: ToyModel, quant: ToyModel, tokens) -> float:
    tokens = np.atleast_2d(np.asarray(tokens))
    lo = logits_from_state(orig, residual_states(orig, tokens)[-1])
    lq = logits_from_state(quant, residual_states(quant, tokens)[-1])
    return float(np.mean((lq - lo) ** 2))


def split_calibration(calib, holdout: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Split sequences into (fit, score); the score part is the trailing share."""
    calib = np.atleast_2d(np.asarray(calib))
    n_score = max(1, int(round(len(calib) * holdout)))
    if n_score >= len(calib):
        raise ValueError("need at least two calibration sequences to hold some out")
    return calib[:-n_score], calib[-n_score:]


def score_point(orig: ToyModel, calib, cfg: MethodConfig, bits: int, score_tokens, gptq: GPTQConfig = GPTQConfig(), eps=None) -> float:
    """Held-out logits MSE of one quantization run."""
    q, _ = quantize_model(orig, calib, cfg, bits, gptq, eps)
    return logits_mse(orig, q, score_tokens)


def grid_search(
    orig: ToyModel,
    calib,
    cfg_base: MethodConfig,
    bits: int,
    score_tokens=None,
    gptq: GPTQConfig = GPTQConfig(),
    holdout: float = 0.25,
    table: list | None = None,
    eps: float | None = None,
) -> tuple[float, float, list[dict]]:
    """Coordinate search: alpha over 0..1 step 0.1 with beta=0, then beta over
    0..1 step 0.05 at the best alpha. Score is held-out logits MSE; ties go to
    the smaller value.
    """
    if score_tokens is None:
        calib, score_tokens = split_calibration(calib, holdout)
    base = replace(cfg_base, method="loaq", overrides={})
    table = [] if table is None else table

    def score(a, b):
        return score_point(orig, calib, replace(base, alpha=a, beta=b), bits, score_tokens, gptq, eps)

    best_a, best = None, np.inf
    for a in ALPHA_GRID:
        s = score(a, 0.0)
        table.append({"stage": "alpha", "alpha": a, "beta": 0.0, "score": s})
        if s < best:
            best_a, best = a, s
    best_b, best = None, np.inf
    for b in BETA_GRID:
        s = score(best_a, b)
        table.append({"stage": "beta", "alpha": best_a, "beta": b, "score": s})
        if s < best:
            best_b, best = b, s
    return best_a, best_b, table
