"""A minimal pre-norm transformer with gainless RMSNorm and simplified sub-layers.

Every sub-layer has the form ``X_out = phi(Norm(h) W_in)``, ``h <- h + X_out W_out``
where ``W_in`` is the concatenation ``[Wq Wk Wv]`` (attention) or ``[Wgate Wup]``
(gated MLP). Activations are laid out ``(sequences, tokens, features)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .linalg import fwht, is_power_of_two
from .quant import QuantParams, quantize_activations

ATTN = "attn"
MLP = "mlp"


@dataclass
class QuantizedTensor:
    codes: np.ndarray
    params: QuantParams

    def dequantize(self) -> np.ndarray:
        return self.params.dequantize(self.codes)


@dataclass
class SubLayer:
    kind: str
    w_in: np.ndarray
    w_out: np.ndarray

    def __post_init__(self):
        if self.kind not in (ATTN, MLP):
            raise ValueError(f"unknown sub-layer kind {self.kind!r}")


@dataclass
class ToyModel:
    embed: np.ndarray  # vocab x N
    head: np.ndarray  # N x vocab
    sublayers: list[SubLayer]
    heads: int
    norm_eps: float = 1e-6
    # weights are stored as R W and inputs rotated online (see apply_hadamard)
    hadamard: bool = False
    # token-wise dynamic activation quantization before every quantized linear
    act_bits: int | None = None
    quantized: dict[str, QuantizedTensor] = field(default_factory=dict)

    def __post_init__(self):
        n = self.embed.shape[1]
        if not is_power_of_two(n):
            raise ValueError(f"d_model must be a power of two, got {n}")
        if self.head.shape[0] != n:
            raise ValueError("head does not match d_model")
        if n % self.heads:
            raise ValueError("d_model must be divisible by heads")
        for k, sl in enumerate(self.sublayers):
            if sl.w_in.shape[0] != n or sl.w_out.shape[1] != n:
                raise ValueError(f"sublayer {k} does not match d_model {n}")

    @property
    def d_model(self) -> int:
        return self.embed.shape[1]

    @property
    def vocab(self) -> int:
        return self.embed.shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.sublayers) // 2

    def copy(self) -> "ToyModel":
        return copy.deepcopy(self)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed}
        for k, sl in enumerate(self.sublayers):
            out[f"sublayers.{k}.w_in"] = sl.w_in
            out[f"sublayers.{k}.w_out"] = sl.w_out
        out["head"] = self.head
        return out

    def set_weight(self, k: int, which: str, value: np.ndarray, qt: QuantizedTensor | None = None):
        setattr(self.sublayers[k], which, value)
        name = f"sublayers.{k}.{which}"
        if qt is None:
            self.quantized.pop(name, None)
        else:
            self.quantized[name] = qt


def rmsnorm(x, eps: float) -> np.ndarray:
    """Gainless RMSNorm over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def silu(z):
    return z / (1.0 + np.exp(-z))


def phi_mlp(z: np.ndarray) -> np.ndarray:
    gate, up = np.split(z, 2, axis=-1)
    return silu(gate) * up


def phi_attn(z: np.ndarray, heads: int) -> np.ndarray:
    """Causal softmax attention over the Q/K/V column blocks of ``z``."""
    s, t, width = z.shape
    dh = width // (3 * heads)
    q, k, v = (a.reshape(s, t, heads, dh).transpose(0, 2, 1, 3) for a in np.split(z, 3, axis=-1))
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
    mask = np.triu(np.ones((t, t), dtype=bool), 1)
    scores = np.where(mask, -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    return (p @ v).transpose(0, 2, 1, 3).reshape(s, t, heads * dh)


def phi(z: np.ndarray, kind: str, heads: int) -> np.ndarray:
    return phi_attn(z, heads) if kind == ATTN else phi_mlp(z)


def linear_input(x: np.ndarray, model: ToyModel) -> np.ndarray:
    """What a quantizable linear actually sees: rotated, then act-quantized."""
    if model.hadamard:
        x = fwht(x, axis=-1)
    if model.act_bits is not None:
        x = quantize_activations(x, model.act_bits)
    return x


def sublayer_input(h: np.ndarray, model: ToyModel) -> np.ndarray:
    return linear_input(rmsnorm(h, model.norm_eps), model)


def sublayer_hidden(x_in: np.ndarray, k: int, model: ToyModel) -> np.ndarray:
    sl = model.sublayers[k]
    return linear_input(phi(x_in @ sl.w_in, sl.kind, model.heads), model)


def sublayer_forward(h: np.ndarray, k: int, model: ToyModel):
    """Returns ``(h_next, X_in, X_out)`` for sub-layer ``k``."""
    x_in = sublayer_input(h, model)
    x_out = sublayer_hidden(x_in, k, model)
    return h + x_out @ model.sublayers[k].w_out, x_in, x_out


def embed(model: ToyModel, tokens) -> np.ndarray:
    tokens = np.atleast_2d(np.asarray(tokens))
    return model.embed[tokens].astype(np.float64)


def residual_states(model: ToyModel, tokens) -> list[np.ndarray]:
    """``[h_0, h_1, ..., h_K]`` through all sub-layers."""
    h = embed(model, tokens)
    states = [h]
    for k in range(len(model.sublayers)):
        h = sublayer_forward(h, k, model)[0]
        states.append(h)
    return states


def logits_from_state(model: ToyModel, h: np.ndarray) -> np.ndarray:
    return rmsnorm(h, model.norm_eps) @ model.head


def forward(model: ToyModel, tokens) -> np.ndarray:
    return logits_from_state(model, residual_states(model, tokens)[-1])


def check_compatible(a: ToyModel, b: ToyModel):
    ta, tb = a.tensors(), b.tensors()
    if ta.keys() != tb.keys() or any(ta[k].shape != tb[k].shape for k in ta) or a.heads != b.heads:
        raise ValueError("models are structurally different")
    if [s.kind for s in a.sublayers] != [s.kind for s in b.sublayers]:
        raise ValueError("models are structurally different")


@dataclass
class Capture:
    """Activations at one sub-layer on both branches (flattened to tokens x features)."""

    index: int
    kind: str
    h: np.ndarray
    h_hat: np.ndarray
    x_in: np.ndarray
    x_in_hat: np.ndarray
    x_out: np.ndarray
    x_out_hat: np.ndarray


class DualForward:
    """Lock-step forward of an original and a partially quantized model.

    The quantization frontier is sub-layer ``index``. ``inputs()`` gives the
    ``W_in`` inputs there, ``hidden()`` the ``W_out`` inputs (using whatever
    ``W_in`` the quantized model currently holds), and ``advance()`` moves the
    residual states past the sub-layer.
    """

    def __init__(self, orig: ToyModel, quant: ToyModel, tokens):
        check_compatible(orig, quant)
        self.orig = orig
        self.quant = quant
        self.h = embed(orig, tokens)
        self.h_hat = embed(quant, tokens)
        self.index = 0
        self._x_in = None

    def __len__(self):
        return len(self.orig.sublayers)

    def inputs(self) -> tuple[np.ndarray, np.ndarray]:
        self._x_in = (sublayer_input(self.h, self.orig), sublayer_input(self.h_hat, self.quant))
        return self._x_in

    def hidden(self) -> tuple[np.ndarray, np.ndarray]:
        x_in, x_in_hat = self._x_in if self._x_in is not None else self.inputs()
        return (
            sublayer_hidden(x_in, self.index, self.orig),
            sublayer_hidden(x_in_hat, self.index, self.quant),
        )

    def capture(self) -> Capture:
        x_in, x_in_hat = self.inputs()
        x_out, x_out_hat = self.hidden()
        flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
        return Capture(
            self.index,
            self.orig.sublayers[self.index].kind,
            flat(self.h),
            flat(self.h_hat),
            flat(x_in),
            flat(x_in_hat),
            flat(x_out),
            flat(x_out_hat),
        )

    def advance(self):
        k = self.index
        self.h = sublayer_forward(self.h, k, self.orig)[0]
        self.h_hat = sublayer_forward(self.h_hat, k, self.quant)[0]
        self.index += 1
        self._x_in = None


def dual_forward(orig: ToyModel, quant: ToyModel, tokens) -> list[Capture]:
    """Capture both branches at every sub-layer (small inputs only)."""
    run = DualForward(orig, quant, tokens)
    out = []
    for _ in range(len(run)):
        out.append(run.capture())
        run.advance()
    return out


def _f32(a: np.ndarray) -> np.ndarray:
    # keep weights exactly representable in the 32-bit storage format
    return a.astype(np.float32).astype(np.float64)


def gen_toy_model(
    seed: int,
    vocab: int = 256,
    d_model: int = 64,
    d_ff: int = 128,
    heads: int = 2,
    layers: int = 8,
    norm_eps: float = 1e-6,
) -> ToyModel:
    """Seeded random model; weights i.i.d. normal with std ``1/sqrt(fan_in)``."""
    if min(vocab, d_model, d_ff, heads, layers) < 1:
        raise ValueError("all dimensions must be positive")
    if not is_power_of_two(d_model):
        raise ValueError(f"d_model must be a power of two, got {d_model}")
    if d_model % heads:
        raise ValueError("d_model must be divisible by heads")
    rng = np.random.default_rng(seed)

    def w(fan_in, fan_out):
        return _f32(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))

    emb = _f32(rng.standard_normal((vocab, d_model)))
    subs = []
    for _ in range(layers):
        subs.append(SubLayer(ATTN, w(d_model, 3 * d_model), w(d_model, d_model)))
        subs.append(SubLayer(MLP, w(d_model, 2 * d_ff), w(d_ff, d_model)))
    return ToyModel(embed=emb, head=w(d_model, vocab), sublayers=subs, heads=heads, norm_eps=norm_eps)


def apply_hadamard(model: ToyModel) -> ToyModel:
    """Rotate the input side of every sub-layer linear by the orthonormal Hadamard R.

    Weights become ``R W`` and the forward pass rotates each linear input
    online (``X R``), so ``(X R)(R W) = X W`` and the function is unchanged.
    Because ``R`` is its own inverse, applying this twice restores the model.
    """
    if model.quantized:
        raise ValueError("apply_hadamard must run before quantization")
    for sl in model.sublayers:
        for w in (sl.w_in, sl.w_out):
            if not is_power_of_two(w.shape[0]):
                raise ValueError(f"Hadamard needs power-of-two input dims, got {w.shape[0]}")
    out = model.copy()
    for sl in out.sublayers:
        sl.w_in = fwht(sl.w_in, axis=0)
        sl.w_out = fwht(sl.w_out, axis=0)
    out.hadamard = not model.hadamard
    return out
