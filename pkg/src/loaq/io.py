"""Model directories, calibration token sources, and report files.

A model directory holds ``manifest.json`` plus one little-endian blob per
tensor under ``tensors/``. Real tensors are 32-bit floats; quantized weights
are stored as int32 codes with float64 scales and int32 zero points, and are
dequantized on load.
"""

from __future__ import annotations

import csv
import io
import json
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import SubLayer, ToyModel, QuantizedTensor
from .quant import CHANNEL, QuantParams

FORMAT = "loaq-toy/1"
_DTYPES = {"f4": "<f4", "f8": "<f8", "i4": "<i4"}


class ModelFormatError(ValueError):
    """Corrupt, truncated or inconsistent model directory."""


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_text(path, text: str):
    _atomic_write(Path(path), text.encode())


def _blob_name(name: str, part: str | None = None) -> str:
    return f"{name}.{part}.bin" if part else f"{name}.bin"


def _real_dtype(a: np.ndarray) -> str:
    # fall back to 64-bit only when 32-bit storage would lose bits
    return "f4" if np.array_equal(a.astype(np.float32).astype(np.float64), a) else "f8"


def save_model(model: ToyModel, path) -> Path:
    path = Path(path)
    tensors = []
    blobs: dict[str, bytes] = {}

    def put(fname, arr, dtype):
        blobs[fname] = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        return {"file": fname, "dtype": dtype, "shape": list(arr.shape)}

    for name, arr in model.tensors().items():
        entry = {"name": name}
        qt = model.quantized.get(name)
        if qt is None:
            entry.update(put(_blob_name(name), arr, _real_dtype(arr)))
        else:
            p = qt.params
            entry.update(put(_blob_name(name, "codes"), qt.codes, "i4"))
            entry["quant"] = {
                "bits": p.bits,
                "axis": p.axis,
                "scale": put(_blob_name(name, "scale"), p.scale, "f8"),
                "zero_point": put(_blob_name(name, "zp"), p.zero_point, "i4"),
            }
        tensors.append(entry)

    manifest = {
        "format": FORMAT,
        "dims": {
            "vocab": model.vocab,
            "d_model": model.d_model,
            "heads": model.heads,
            "layers": model.n_layers,
        },
        "sublayers": [sl.kind for sl in model.sublayers],
        "norm_eps": model.norm_eps,
        "hadamard": model.hadamard,
        "act_bits": model.act_bits,
        "byteorder": "little",
        "tensors": tensors,
    }
    for fname, data in blobs.items():
        _atomic_write(path / "tensors" / fname, data)
    _atomic_write(path / "manifest.json", (json.dumps(manifest, indent=2) + "\n").encode())
    return path


def _read_blob(root: Path, name: str, entry: dict) -> np.ndarray:
    try:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        shape = tuple(int(s) for s in entry["shape"])
        fpath = root / "tensors" / entry["file"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"tensor {name}: malformed manifest entry ({exc})") from None
    if not fpath.is_file():
        raise ModelFormatError(f"tensor {name}: missing blob {entry['file']}")
    data = fpath.read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) != expected:
        raise ModelFormatError(f"tensor {name}: blob has {len(data)} bytes, manifest shape {list(shape)} needs {expected}")
    arr = np.frombuffer(data, dtype=dtype).reshape(shape)
    return arr.astype(np.float64) if dtype.kind == "f" else arr.astype(np.int64)


def load_model(path) -> ToyModel:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise ModelFormatError(f"{root}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{root}: corrupt manifest ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise ModelFormatError(f"{root}: unsupported format {manifest.get('format')!r}")

    arrays: dict[str, np.ndarray] = {}
    quantized: dict[str, QuantizedTensor] = {}
    for entry in manifest["tensors"]:
        name = entry.get("name", "?")
        q = entry.get("quant")
        if q is None:
            arrays[name] = _read_blob(root, name, entry)
            continue
        codes = _read_blob(root, name, entry)
        scale = _read_blob(root, name + ".scale", q["scale"])
        zp = _read_blob(root, name + ".zero_point", q["zero_point"])
        try:
            params = QuantParams(bits=int(q["bits"]), scale=scale, zero_point=zp, axis=q.get("axis", CHANNEL))
        except ValueError as exc:
            raise ModelFormatError(f"tensor {name}: {exc}") from None
        if scale.shape != (codes.shape[1],):
            raise ModelFormatError(f"tensor {name}: scale length does not match {codes.shape[1]} channels")
        qt = QuantizedTensor(codes, params)
        quantized[name] = qt
        arrays[name] = qt.dequantize()

    kinds = manifest["sublayers"]
    try:
        subs = [
            SubLayer(kind, arrays[f"sublayers.{k}.w_in"], arrays[f"sublayers.{k}.w_out"])
            for k, kind in enumerate(kinds)
        ]
        model = ToyModel(
            embed=arrays["embed"],
            head=arrays["head"],
            sublayers=subs,
            heads=int(manifest["dims"]["heads"]),
            norm_eps=float(manifest["norm_eps"]),
            hadamard=bool(manifest.get("hadamard", False)),
            act_bits=manifest.get("act_bits"),
            quantized=quantized,
        )
    except KeyError as exc:
        raise ModelFormatError(f"{root}: missing tensor {exc.args[0]}") from None
    except ValueError as exc:
        raise ModelFormatError(f"{root}: {exc}") from None
    return model


# -- calibration tokens -------------------------------------------------------

_SYNTH = re.compile(r"^synthetic:(\d+):(\d+)x(\d+)$")


def synthetic_tokens(seed: int, seqs: int, length: int, vocab: int, zipf: float = 1.0) -> np.ndarray:
    """Seeded categorical sampler with a Zipf-shaped token distribution."""
    rng = np.random.default_rng(seed)
    probs = 1.0 / np.arange(1, vocab + 1) ** zipf
    probs /= probs.sum()
    ranks = rng.permutation(vocab)
    return ranks[rng.choice(vocab, size=(seqs, length), p=probs)]


def read_token_file(path, vocab: int | None = None) -> np.ndarray:
    """One sequence per line, whitespace-separated integer ids; equal lengths."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([int(t) for t in line.split()])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-integer token id") from None
    if not rows:
        raise ValueError(f"{path}: no token sequences")
    if len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: sequences must all have the same length")
    tokens = np.array(rows, dtype=np.int64)
    if tokens.min() < 0 or (vocab is not None and tokens.max() >= vocab):
        raise ValueError(f"{path}: token id out of range for vocab {vocab}")
    return tokens


def load_tokens(source: str, vocab: int) -> np.ndarray:
    """``synthetic:<seed>:<seqs>x<len>`` or a path to a token-id file."""
    m = _SYNTH.match(source)
    if m:
        seed, seqs, length = map(int, m.groups())
        if seqs < 1 or length < 1:
            raise ValueError(f"empty synthetic source {source!r}")
        return synthetic_tokens(seed, seqs, length, vocab)
    if not Path(source).is_file():
        raise FileNotFoundError(f"token source not found: {source}")
    return read_token_file(source, vocab)


def write_tokens(path, tokens: np.ndarray):
    write_text(path, "".join(" ".join(map(str, row)) + "\n" for row in np.atleast_2d(tokens)))


# -- reports ------------------------------------------------------------------

CSV_COLUMNS = ("layer", "kind", "mse_unnorm", "mse_norm", "tokens_excluded")


def write_json(path, obj):
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_layer_csv(path, layers: list[dict]):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in layers:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    write_text(path, buf.getvalue())


@dataclass(frozen=True)
class RunConfig:
    """Every knob the CLI exposes, validated on construction."""

    method: str = "loaq"
    bits: int = 3
    alpha: float = 0.0
    beta: float = 0.0
    use_hadamard: bool = False
    w4a4: bool = False
    act_bits: int | None = None
    perc_damp: float = 0.01
    reorder: bool = True
    seed: int = 0
    eps: float | None = None
    outlier_mult: float = 5.0
    calib: str = "synthetic:0:32x128"
    heldout: str = "synthetic:1:8x128"

    def __post_init__(self):
        from .approx import METHODS

        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not 2 <= self.bits <= 16:
            raise ValueError("bits must be in [2, 16]")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.act_bits is not None and not 2 <= self.act_bits <= 16:
            raise ValueError("act_bits must be in [2, 16]")
        if not self.perc_damp > 0:
            raise ValueError("perc_damp must be positive")
        if self.eps is not None and not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.outlier_mult > 0:
            raise ValueError("outlier multiplier must be positive")
