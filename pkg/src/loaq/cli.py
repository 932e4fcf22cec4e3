"""Command-line driver: ``loaq {gen-toy,quantize,eval,gridsearch}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import io
from .approx import METHODS, MethodConfig
from .model import gen_toy_model
from .pipeline import eval_model, grid_search, quantize_model, score_point, split_calibration
from .quant import GPTQConfig

log = logging.getLogger("loaq")


def _timings_path(report: str) -> Path:
    p = Path(report)
    return p.with_name(p.stem + ".timings.json")


def _add_quant_flags(p: argparse.ArgumentParser, with_coeffs: bool = True):
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--calib", default="synthetic:0:32x128", help="token file or synthetic:<seed>:<seqs>x<len>")
    p.add_argument("--bits", type=int, default=3)
    if with_coeffs:
        p.add_argument("--method", choices=METHODS, default="loaq")
        p.add_argument("--alpha", type=float, default=0.0)
        p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--hadamard", action="store_true", help="rotate linear inputs with a Hadamard transform")
    p.add_argument("--w4a4", action="store_true", help="also quantize activations token-wise")
    p.add_argument("--act-bits", type=int, default=None, help="activation bits in --w4a4 mode (default 4)")
    p.add_argument("--perc-damp", type=float, default=0.01)
    p.add_argument("--no-reorder", dest="reorder", action="store_false")
    p.add_argument("--eps", type=float, default=None, help="NOA rescaling epsilon (default: model norm_eps)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heldout", default=None, help="token source for evaluation metrics")
    p.add_argument("--outlier-mult", type=float, default=5.0)
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--csv", default=None, help="per-sub-layer MSE curve CSV path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loaq", description="Layer-wise output-approximation quantization on toy transformers.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy", help="generate a seeded toy model")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--vocab", type=int, default=256)
    g.add_argument("--d-model", type=int, default=64)
    g.add_argument("--d-ff", type=int, default=128)
    g.add_argument("--heads", type=int, default=2)
    g.add_argument("--layers", type=int, default=8)
    g.add_argument("--norm-eps", type=float, default=1e-6)
    g.add_argument("--out", required=True)

    q = sub.add_parser("quantize", help="quantize a model")
    _add_quant_flags(q)
    q.add_argument("--out", required=True, help="output model directory")

    e = sub.add_parser("eval", help="compare a quantized model against its original")
    e.add_argument("--orig", required=True)
    e.add_argument("--quant", required=True)
    e.add_argument("--heldout", default="synthetic:1:8x128")
    e.add_argument("--outlier-mult", type=float, default=5.0)
    e.add_argument("--report", required=True)
    e.add_argument("--csv", default=None)

    s = sub.add_parser("gridsearch", help="two-stage (alpha, beta) search")
    _add_quant_flags(s, with_coeffs=False)
    s.add_argument("--score", default=None, help="scoring tokens (default: hold out a quarter of --calib)")
    s.add_argument("--transfer-from", default=None, help="earlier gridsearch report whose (alpha, beta) is also scored")
    return parser


def _run_config(parser, args, **extra) -> io.RunConfig:
    fields = dict(
        bits=args.bits,
        use_hadamard=args.hadamard,
        w4a4=args.w4a4,
        act_bits=args.act_bits,
        perc_damp=args.perc_damp,
        reorder=args.reorder,
        seed=args.seed,
        eps=args.eps,
        outlier_mult=args.outlier_mult,
        calib=args.calib,
        heldout=args.heldout or "",
        **extra,
    )
    try:
        return io.RunConfig(**fields)
    except ValueError as exc:
        parser.error(str(exc))


def _method_config(rc: io.RunConfig) -> MethodConfig:
    return MethodConfig(
        method=rc.method,
        alpha=rc.alpha,
        beta=rc.beta,
        use_hadamard=rc.use_hadamard,
        w4a4=rc.w4a4,
        act_bits=rc.act_bits,
    )


def _write_metrics(report: dict, args):
    if args.csv and "metrics" in report:
        io.write_layer_csv(args.csv, report["metrics"]["layers"])


def cmd_gen_toy(parser, args) -> int:
    try:
        model = gen_toy_model(args.seed, args.vocab, args.d_model, args.d_ff, args.heads, args.layers, args.norm_eps)
    except ValueError as exc:
        parser.error(str(exc))
    io.save_model(model, args.out)
    return 0


def cmd_quantize(parser, args) -> int:
    rc = _run_config(parser, args, method=args.method, alpha=args.alpha, beta=args.beta)
    orig = io.load_model(args.model)
    calib = io.load_tokens(rc.calib, orig.vocab)
    quant, rep = quantize_model(orig, calib, _method_config(rc), rc.bits, GPTQConfig(rc.perc_damp, rc.reorder), rc.eps)
    io.save_model(quant, args.out)
    if args.heldout:
        rep.metrics = eval_model(orig, quant, io.load_tokens(args.heldout, orig.vocab), rc.outlier_mult)
    report = rep.to_dict()
    report["run"] = asdict(rc)
    io.write_json(args.report, report)
    io.write_json(_timings_path(args.report), dict(rep.timings))
    _write_metrics(report, args)
    return 0


def cmd_eval(parser, args) -> int:
    if not args.outlier_mult > 0:
        parser.error("outlier multiplier must be positive")
    orig = io.load_model(args.orig)
    quant = io.load_model(args.quant)
    heldout = io.load_tokens(args.heldout, orig.vocab)
    report = {
        "run": {"orig": args.orig, "quant": args.quant, "heldout": args.heldout, "outlier_mult": args.outlier_mult},
        "metrics": eval_model(orig, quant, heldout, args.outlier_mult),
    }
    io.write_json(args.report, report)
    _write_metrics(report, args)
    return 0


def _transferred_pair(path: str) -> tuple[float, float]:
    prev = json.loads(Path(path).read_text())
    try:
        a, b = float(prev["alpha"]), float(prev["beta"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: no chosen (alpha, beta) in report") from exc
    if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
        raise ValueError(f"{path}: transferred coefficients out of range")
    return a, b


def cmd_gridsearch(parser, args) -> int:
    rc = _run_config(parser, args)
    orig = io.load_model(args.model)
    calib = io.load_tokens(rc.calib, orig.vocab)
    transfer = _transferred_pair(args.transfer_from) if args.transfer_from else None
    if args.score:
        fit, score = calib, io.load_tokens(args.score, orig.vocab)
    else:
        fit, score = split_calibration(calib)
    gptq = GPTQConfig(rc.perc_damp, rc.reorder)
    table: list[dict] = []
    report = {"run": asdict(rc), "score": "logits_mse", "grid": table}
    try:
        alpha, beta, _ = grid_search(orig, fit, _method_config(rc), rc.bits, score, gptq, table=table, eps=rc.eps)
    except BaseException:
        report["error"] = "incomplete"
        io.write_json(args.report, report)
        raise
    report["alpha"], report["beta"] = alpha, beta
    best = min(r["score"] for r in table if r["stage"] == "beta" and r["beta"] == beta)
    report["searched"] = {"alpha": alpha, "beta": beta, "score": best}
    base = _method_config(rc)
    if transfer is not None:
        cfg = replace(base, method="loaq", alpha=transfer[0], beta=transfer[1])
        report["transferred"] = {
            "alpha": transfer[0],
            "beta": transfer[1],
            "score": score_point(orig, fit, cfg, rc.bits, score, gptq, rc.eps),
        }
    if args.heldout:
        quant, _ = quantize_model(orig, calib, replace(base, method="loaq", alpha=alpha, beta=beta), rc.bits, gptq, rc.eps)
        report["metrics"] = eval_model(orig, quant, io.load_tokens(args.heldout, orig.vocab), rc.outlier_mult)
    io.write_json(args.report, report)
    _write_metrics(report, args)
    return 0


COMMANDS = {"gen-toy": cmd_gen_toy, "quantize": cmd_quantize, "eval": cmd_eval, "gridsearch": cmd_gridsearch}


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](parser, args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"loaq: error: {exc}", file=sys.stderr)
        return 1


def main():  # pragma: no cover
    sys.exit(cli_main())
