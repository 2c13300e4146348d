"""Sequence encoders (gated recurrent and causal attention) and the outcome head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import ContractError, ShapeError, Tensor

VARIANTS = ("recurrent", "attention")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _ones(shape, name: str) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``rate`` is 0."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return tn.mul(x, keep)


@dataclass
class EncoderParams:
    variant: str
    input_width: int
    hidden_width: int = 32
    n_layers: int = 1
    n_heads: int = 2
    dropout_rate: float = 0.1
    weights: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown encoder variant {self.variant!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError("dropout_rate must lie in [0, 1)")
        if self.variant == "attention" and self.hidden_width % self.n_heads:
            raise ShapeError("hidden_width must be divisible by n_heads")

    def tensors(self) -> list[Tensor]:
        return [self.weights[k] for k in sorted(self.weights)]

    def check(self) -> None:
        """Verify mutual consistency of all weight shapes."""
        h = self.hidden_width
        if self.variant == "recurrent":
            width = self.input_width
            for layer in range(self.n_layers):
                expected = {f"gru{layer}.W": (width, 3 * h), f"gru{layer}.U": (h, 3 * h), f"gru{layer}.b": (3 * h,)}
                for name, shape in expected.items():
                    if self.weights[name].shape != shape:
                        raise ShapeError(f"{name}: {self.weights[name].shape} != {shape}")
                width = h
        else:
            if self.weights["in.W"].shape != (self.input_width, h):
                raise ShapeError("in.W does not match input/hidden widths")
            for layer in range(self.n_layers):
                for nm in ("q", "k", "v", "o"):
                    if self.weights[f"att{layer}.W{nm}"].shape != (h, h):
                        raise ShapeError(f"att{layer}.W{nm} must be ({h}, {h})")


def init_encoder(variant: str, input_width: int, rng: np.random.Generator, hidden_width: int = 32,
                 n_layers: int = 1, n_heads: int = 2, dropout_rate: float = 0.1) -> EncoderParams:
    h = hidden_width
    w: dict[str, Tensor] = {}
    if variant == "recurrent":
        width = input_width
        for layer in range(n_layers):
            w[f"gru{layer}.W"] = _glorot(rng, width, 3 * h, f"gru{layer}.W")
            w[f"gru{layer}.U"] = _glorot(rng, h, 3 * h, f"gru{layer}.U")
            w[f"gru{layer}.b"] = _zeros((3 * h,), f"gru{layer}.b")
            width = h
    elif variant == "attention":
        w["in.W"] = _glorot(rng, input_width, h, "in.W")
        w["in.b"] = _zeros((h,), "in.b")
        for layer in range(n_layers):
            p = f"att{layer}."
            for nm in ("q", "k", "v", "o"):
                w[p + "W" + nm] = _glorot(rng, h, h, p + "W" + nm)
            w[p + "ln1.g"] = _ones((h,), p + "ln1.g")
            w[p + "ln1.b"] = _zeros((h,), p + "ln1.b")
            w[p + "ff.W1"] = _glorot(rng, h, 2 * h, p + "ff.W1")
            w[p + "ff.b1"] = _zeros((2 * h,), p + "ff.b1")
            w[p + "ff.W2"] = _glorot(rng, 2 * h, h, p + "ff.W2")
            w[p + "ff.b2"] = _zeros((h,), p + "ff.b2")
            w[p + "ln2.g"] = _ones((h,), p + "ln2.g")
            w[p + "ln2.b"] = _zeros((h,), p + "ln2.b")
    params = EncoderParams(variant, input_width, hidden_width, n_layers, n_heads, dropout_rate, w)
    params.check()
    return params


# ---------------------------------------------------------------------------
# recurrent variant


def gru_cell(x_t: Tensor, h_prev: Tensor, W: Tensor, U: Tensor, b: Tensor) -> Tensor:
    """One gated recurrent update.

    Gates are ordered (update, reset, candidate) along the last axis of W, U, b:
    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    c = tanh(x Wc + (r * h) Uc + bc), h_new = (1 - z) * h + z * c.
    """
    h = h_prev.shape[-1]
    if W.shape[-1] != 3 * h or U.shape != (h, 3 * h) or b.shape != (3 * h,) or x_t.shape[-1] != W.shape[0]:
        raise ShapeError(f"gru_cell: x {x_t.shape}, h {h_prev.shape}, W {W.shape}, U {U.shape}, b {b.shape}")
    gx = tn.matmul(x_t, W) + b
    return _gru_update(gx, h_prev, U)


def _gru_update(gx: Tensor, h_prev: Tensor, U: Tensor) -> Tensor:
    h = h_prev.shape[-1]
    gates = tn.sigmoid(gx[..., : 2 * h] + tn.matmul(h_prev, U[:, : 2 * h]))
    z, r = gates[..., :h], gates[..., h:]
    cand = tn.tanh(gx[..., 2 * h:] + tn.matmul(r * h_prev, U[:, 2 * h:]))
    return h_prev + z * (cand - h_prev)


def _encode_recurrent(x: Tensor, params: EncoderParams, train: bool, rng) -> Tensor:
    n, length, _ = x.shape
    seq = x
    for layer in range(params.n_layers):
        W, U, b = (params.weights[f"gru{layer}.{k}"] for k in "WUb")
        gx_all = tn.matmul(seq, W) + b
        Uzr, Uc = U[:, : 2 * params.hidden_width], U[:, 2 * params.hidden_width:]
        h = Tensor(np.zeros((n, params.hidden_width)))
        hs = []
        hw = params.hidden_width
        for t in range(length):
            gx = gx_all[:, t, :]
            gates = tn.sigmoid(gx[:, : 2 * hw] + tn.matmul(h, Uzr))
            z, r = gates[:, :hw], gates[:, hw:]
            cand = tn.tanh(gx[:, 2 * hw:] + tn.matmul(r * h, Uc))
            h = h + z * (cand - h)
            hs.append(h)
        seq = tn.stack(hs, axis=1)
        seq = dropout(seq, params.dropout_rate, train, rng)
    return seq


# ---------------------------------------------------------------------------
# attention variant


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def positional_encoding(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def attention_block(seq: Tensor, weights: dict[str, Tensor], mask: np.ndarray, n_heads: int,
                    dropout_rate: float = 0.0, train: bool = False,
                    rng: np.random.Generator | None = None, prefix: str = "att0.") -> tuple[Tensor, np.ndarray]:
    """Causal multi-head self-attention followed by a feed-forward sublayer.

    Returns the residual-added, layer-normed sequence and the attention
    weights, shape (batch, heads, length, length).
    """
    n, length, width = seq.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (length, length):
        raise ShapeError(f"mask {mask.shape} does not match sequence length {length}")
    if np.any(np.triu(mask, k=1)):
        raise ContractError("attention mask must be lower-triangular")
    dh = width // n_heads

    def heads(t: Tensor) -> Tensor:
        return tn.transpose(tn.reshape(t, (n, length, n_heads, dh)), (0, 2, 1, 3))

    q = heads(tn.matmul(seq, weights[prefix + "Wq"]))
    k = heads(tn.matmul(seq, weights[prefix + "Wk"]))
    v = heads(tn.matmul(seq, weights[prefix + "Wv"]))
    scores = tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = tn.softmax(tn.masked_fill(scores, ~mask, -np.inf), axis=-1)
    ctx = tn.matmul(attn, v)
    ctx = tn.reshape(tn.transpose(ctx, (0, 2, 1, 3)), (n, length, width))
    ctx = dropout(tn.matmul(ctx, weights[prefix + "Wo"]), dropout_rate, train, rng)
    out = tn.layer_norm(seq + ctx, weights[prefix + "ln1.g"], weights[prefix + "ln1.b"])
    ff = tn.elu(tn.matmul(out, weights[prefix + "ff.W1"]) + weights[prefix + "ff.b1"])
    ff = dropout(tn.matmul(ff, weights[prefix + "ff.W2"]) + weights[prefix + "ff.b2"], dropout_rate, train, rng)
    out = tn.layer_norm(out + ff, weights[prefix + "ln2.g"], weights[prefix + "ln2.b"])
    return out, attn.data


def _encode_attention(x: Tensor, params: EncoderParams, train: bool, rng) -> tuple[Tensor, np.ndarray]:
    n, length, _ = x.shape
    seq = tn.matmul(x, params.weights["in.W"]) + params.weights["in.b"]
    seq = seq + positional_encoding(length, params.hidden_width)
    mask = causal_mask(length)
    attn = None
    for layer in range(params.n_layers):
        seq, attn = attention_block(seq, params.weights, mask, params.n_heads, params.dropout_rate,
                                    train, rng, prefix=f"att{layer}.")
    return seq, attn


def encode_history(covariates, treatments, params: EncoderParams, mode: str = "eval",
                   rng: np.random.Generator | None = None, return_attention: bool = False):
    """Encode (batch, length, .) covariate and previous-treatment channels.

    Returns one representation per step, computed causally. With
    ``return_attention`` the final-layer attention weights (attention variant)
    are returned as well.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    cov, trt = tn.as_tensor(covariates), tn.as_tensor(treatments)
    if cov.ndim != 3 or trt.ndim != 3 or cov.shape[:2] != trt.shape[:2]:
        raise ShapeError(f"covariates {cov.shape} and treatments {trt.shape} are not aligned")
    x = tn.concat([cov, trt], axis=-1)
    if x.shape[-1] != params.input_width:
        raise ShapeError(f"input width {x.shape[-1]} != encoder input width {params.input_width}")
    train = mode == "train"
    if params.variant == "recurrent":
        rep, attn = _encode_recurrent(x, params, train, rng), None
    else:
        rep, attn = _encode_attention(x, params, train, rng)
    if return_attention:
        return rep, attn
    return rep


# ---------------------------------------------------------------------------
# outcome head


@dataclass
class RegressorParams:
    representation_width: int
    treatment_width: int
    layers: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    def tensors(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def check(self) -> None:
        width = self.representation_width + self.treatment_width
        for i, (W, b) in enumerate(self.layers):
            if W.shape[0] != width or b.shape != (W.shape[1],):
                raise ShapeError(f"head layer {i}: W {W.shape}, b {b.shape}, expected input {width}")
            width = W.shape[1]
        if width != 1:
            raise ShapeError("head must end in a single output")


def init_regressor(representation_width: int, treatment_width: int, rng: np.random.Generator,
                   hidden: tuple[int, ...] = (32,)) -> RegressorParams:
    widths = [representation_width + treatment_width, *hidden, 1]
    layers = [(_glorot(rng, a, b, f"head{i}.W"), _zeros((b,), f"head{i}.b"))
              for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
    head = RegressorParams(representation_width, treatment_width, layers)
    head.check()
    return head


def predict_outcome(representation, treatment, head: RegressorParams) -> Tensor:
    """Map (representation, current treatment encoding) to a scalar per row."""
    rep, trt = tn.as_tensor(representation), tn.as_tensor(treatment)
    if rep.shape[:-1] != trt.shape[:-1]:
        raise ShapeError(f"representation {rep.shape} and treatment {trt.shape} disagree")
    if rep.shape[-1] != head.representation_width or trt.shape[-1] != head.treatment_width:
        raise ShapeError("representation/treatment widths do not match the head")
    z = tn.concat([rep, trt], axis=-1)
    for i, (W, b) in enumerate(head.layers):
        z = tn.matmul(z, W) + b
        if i < len(head.layers) - 1:
            z = tn.elu(z)
    return tn.reshape(z, z.shape[:-1])
