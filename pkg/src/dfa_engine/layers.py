"""Layer forward passes and their hand-derived local backward passes.

Conventions: activations are row-major, one sample (node, token) per row.
Dense weights are ``(out_dim, in_dim)`` so ``a = h_prev @ W.T + b``; graph
convolution weights are ``(in_dim, out_dim)`` so ``a = A_hat @ h_prev @ W + b``.
Every backward returns plain gradients dL/dparam (positive sign).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, ParameterError, SeededRng, ShapeError, softmax_rows

ACTIVATIONS = ("identity", "relu", "elu", "tanh")


@dataclass(frozen=True)
class Activation:
    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.kind!r}; expected one of {ACTIVATIONS}")

    def __call__(self, a: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return a.copy()
        if self.kind == "relu":
            return np.maximum(a, 0.0)
        if self.kind == "elu":
            return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))
        return np.tanh(a)

    def derivative(self, a: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return np.ones_like(a)
        if self.kind == "relu":
            return (a > 0).astype(DTYPE)
        if self.kind == "elu":
            # alpha = 1
            return np.where(a > 0, 1.0, np.exp(np.minimum(a, 0.0)))
        return 1.0 - np.tanh(a) ** 2


def dropout_mask(rng: SeededRng | None, shape, p: float) -> np.ndarray | None:
    """Inverted-dropout mask, or None when dropout is inactive."""
    if rng is None or p <= 0.0:
        return None
    if p >= 1.0:
        raise ParameterError(f"dropout probability must be < 1, got {p}")
    keep = rng.random(shape) >= p
    return keep.astype(DTYPE) / (1.0 - p)


def fan_in_uniform(rng: SeededRng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


# --------------------------------------------------------------------------
# dense


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: Activation = field(default_factory=Activation)
    dropout: float = 0.0

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"dense weight {self.weight.shape} and bias {self.bias.shape} disagree")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, rng: SeededRng, in_dim: int, out_dim: int, activation: str = "identity", dropout: float = 0.0):
        w = fan_in_uniform(rng, (out_dim, in_dim), in_dim)
        b = fan_in_uniform(rng, (out_dim,), in_dim)
        return cls(w, b, Activation(activation), dropout)


def dense_forward(layer: DenseLayer, h_prev: np.ndarray, mask: np.ndarray | None = None):
    """Return ``(a, h)`` with ``a = h_prev W^T + b`` and ``h = f(a)`` (times the dropout mask)."""
    if h_prev.shape[-1] != layer.in_dim:
        raise ShapeError(f"dense input has {h_prev.shape[-1]} features, layer expects {layer.in_dim} "
                         f"(input {h_prev.shape}, weight {layer.weight.shape})")
    a = h_prev @ layer.weight.T + layer.bias
    h = layer.activation(a)
    if mask is not None:
        h = h * mask
    return a, h


def dense_backward(layer: DenseLayer, h_prev, a, grad_h, mask=None):
    """Gradients ``(grad_w, grad_b, grad_h_prev)`` given dL/dh."""
    if grad_h.shape != a.shape:
        raise ShapeError(f"dense grad {grad_h.shape} does not match pre-activation {a.shape}")
    if mask is not None:
        grad_h = grad_h * mask
    delta = grad_h * layer.activation.derivative(a)
    d2 = delta.reshape(-1, layer.out_dim)
    grad_w = d2.T @ h_prev.reshape(-1, layer.in_dim)
    grad_b = d2.sum(axis=0)
    grad_prev = delta @ layer.weight
    return grad_w, grad_b, grad_prev


# --------------------------------------------------------------------------
# graph convolution


def normalize_adjacency(adjacency) -> np.ndarray:
    """Symmetric normalisation with self loops: D^-1/2 (A + I) D^-1/2."""
    a = np.asarray(adjacency, dtype=DTYPE)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ParameterError(f"adjacency must be square, got {a.shape}")
    if not np.array_equal(a, a.T):
        raise ParameterError("adjacency must be symmetric")
    if np.any(np.diag(a) != 0):
        raise ParameterError("adjacency must have a zero diagonal")
    if np.any((a != 0) & (a != 1)):
        raise ParameterError("adjacency entries must be 0 or 1")
    a_tilde = a + np.eye(a.shape[0], dtype=DTYPE)
    d_inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    out = a_tilde * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]
    # exact symmetry despite rounding in the two scalings
    return 0.5 * (out + out.T)


@dataclass
class GraphConvLayer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    normalized_adjacency: np.ndarray  # (n, n)
    activation: Activation = field(default_factory=Activation)
    dropout: float = 0.0

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, rng: SeededRng, in_dim: int, out_dim: int, normalized_adjacency,
             activation: str = "identity", dropout: float = 0.0):
        # Glorot uniform, as in the reference GCN implementation
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-bound, bound, size=(in_dim, out_dim)).astype(DTYPE)
        return cls(w, np.zeros(out_dim, dtype=DTYPE), normalized_adjacency, Activation(activation), dropout)


def graphconv_forward(layer: GraphConvLayer, h_prev: np.ndarray, mask: np.ndarray | None = None):
    n = layer.normalized_adjacency.shape[0]
    if h_prev.ndim != 2 or h_prev.shape[0] != n or h_prev.shape[1] != layer.in_dim:
        raise ShapeError(f"graphconv input {h_prev.shape} incompatible with {n} nodes x {layer.in_dim} features")
    # A (H W) is far cheaper than (A H) W when in_dim >> out_dim
    a = layer.normalized_adjacency @ (h_prev @ layer.weight) + layer.bias
    h = layer.activation(a)
    if mask is not None:
        h = h * mask
    return a, h


def graphconv_backward(layer: GraphConvLayer, h_prev, a, grad_h, mask=None):
    if grad_h.shape != a.shape:
        raise ShapeError(f"graphconv grad {grad_h.shape} does not match pre-activation {a.shape}")
    if mask is not None:
        grad_h = grad_h * mask
    delta = grad_h * layer.activation.derivative(a)
    propagated = layer.normalized_adjacency.T @ delta
    grad_w = h_prev.T @ propagated
    grad_b = delta.sum(axis=0)
    grad_prev = propagated @ layer.weight.T
    return grad_w, grad_b, grad_prev


# --------------------------------------------------------------------------
# multi-head attention


@dataclass
class AttentionLayer:
    w_q: np.ndarray  # (d_model, n_heads * d_k), heads stacked along columns
    w_k: np.ndarray
    w_v: np.ndarray
    w_out: np.ndarray  # (n_heads * d_k, d_model)
    n_heads: int
    dropout: float = 0.0

    def __post_init__(self):
        d_model, width = self.w_q.shape
        if width % self.n_heads:
            raise ShapeError(f"projection width {width} not divisible by {self.n_heads} heads")
        for w in (self.w_k, self.w_v):
            if w.shape != self.w_q.shape:
                raise ShapeError(f"attention projections disagree: {self.w_q.shape} vs {w.shape}")
        if self.w_out.shape != (width, d_model):
            raise ShapeError(f"w_out {self.w_out.shape} should be {(width, d_model)}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1] // self.n_heads

    @classmethod
    def init(cls, rng: SeededRng, d_model: int, n_heads: int, dropout: float = 0.0):
        if d_model % n_heads:
            raise ParameterError(f"d_model={d_model} must split evenly over {n_heads} heads")
        ws = [fan_in_uniform(rng, (d_model, d_model), d_model) for _ in range(4)]
        return cls(ws[0], ws[1], ws[2], ws[3], n_heads, dropout)


@dataclass
class AttentionCache:
    layer: AttentionLayer
    x: np.ndarray  # (B, T, d_model)
    q: np.ndarray  # (B, H, T, d_k)
    k: np.ndarray
    v: np.ndarray
    weights: np.ndarray  # post-softmax (B, H, T, T)
    drop_mask: np.ndarray | None
    concat: np.ndarray  # (B, T, H*d_k)
    squeeze: bool


def _split_heads(t: np.ndarray, n_heads: int) -> np.ndarray:
    b, s, w = t.shape
    return t.reshape(b, s, n_heads, w // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    b, h, s, dk = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, s, h * dk)


def causal_mask(seq: int) -> np.ndarray:
    """Boolean (seq, seq) matrix, True where attention is forbidden."""
    return np.triu(np.ones((seq, seq), dtype=bool), k=1)


def attention_forward(layer: AttentionLayer, x: np.ndarray, causal: bool = True,
                      rng: SeededRng | None = None):
    """Scaled dot-product multi-head attention. Accepts (T, d) or (B, T, d)."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != layer.d_model:
        raise ShapeError(f"attention input {x.shape} incompatible with d_model={layer.d_model}")
    seq = x.shape[1]
    q = _split_heads(x @ layer.w_q, layer.n_heads)
    k = _split_heads(x @ layer.w_k, layer.n_heads)
    v = _split_heads(x @ layer.w_v, layer.n_heads)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(layer.d_k)
    if causal:
        scores = np.where(causal_mask(seq), -np.inf, scores)
    weights = softmax_rows(scores)
    drop = dropout_mask(rng, weights.shape, layer.dropout)
    used = weights * drop if drop is not None else weights
    concat = _merge_heads(used @ v)
    out = concat @ layer.w_out
    cache = AttentionCache(layer, x, q, k, v, weights, drop, concat, squeeze)
    return (out[0] if squeeze else out), cache


def attention_backward(cache: AttentionCache, grad_output: np.ndarray):
    """Exact gradients ``(grad_wq, grad_wk, grad_wv, grad_wout, grad_x)``."""
    layer = cache.layer
    g = grad_output[None] if cache.squeeze else grad_output
    if g.shape != cache.x.shape[:2] + (layer.d_model,):
        raise ShapeError(f"attention grad {grad_output.shape} does not match cached input {cache.x.shape}")
    width = layer.w_q.shape[1]
    x2 = cache.x.reshape(-1, layer.d_model)

    grad_wout = cache.concat.reshape(-1, width).T @ g.reshape(-1, layer.d_model)
    g_ctx = _split_heads(g @ layer.w_out.T, layer.n_heads)

    used = cache.weights * cache.drop_mask if cache.drop_mask is not None else cache.weights
    g_used = g_ctx @ cache.v.transpose(0, 1, 3, 2)
    g_v = used.transpose(0, 1, 3, 2) @ g_ctx
    g_w = g_used * cache.drop_mask if cache.drop_mask is not None else g_used
    # softmax Jacobian-vector product, row by row
    p = cache.weights
    g_scores = p * (g_w - (g_w * p).sum(axis=-1, keepdims=True))
    g_scores /= np.sqrt(layer.d_k)
    g_q = g_scores @ cache.k
    g_k = g_scores.transpose(0, 1, 3, 2) @ cache.q

    g_q, g_k, g_v = (_merge_heads(t).reshape(-1, width) for t in (g_q, g_k, g_v))
    grad_wq = x2.T @ g_q
    grad_wk = x2.T @ g_k
    grad_wv = x2.T @ g_v
    grad_x = (g_q @ layer.w_q.T + g_k @ layer.w_k.T + g_v @ layer.w_v.T).reshape(cache.x.shape)
    if cache.squeeze:
        grad_x = grad_x[0]
    return grad_wq, grad_wk, grad_wv, grad_wout, grad_x


# --------------------------------------------------------------------------
# layer norm and embeddings

LAYER_NORM_EPS = 1e-10


@dataclass
class LayerNorm:
    gain: np.ndarray
    bias: np.ndarray
    eps: float = LAYER_NORM_EPS

    @classmethod
    def init(cls, dim: int):
        return cls(np.ones(dim, dtype=DTYPE), np.zeros(dim, dtype=DTYPE))


def layernorm_forward(ln: LayerNorm, x: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + ln.eps)
    xhat = centered * inv_std
    return xhat * ln.gain + ln.bias, (xhat, inv_std)


def layernorm_backward(ln: LayerNorm, cache, grad_y):
    xhat, inv_std = cache
    d = xhat.shape[-1]
    grad_gain = (grad_y * xhat).reshape(-1, d).sum(axis=0)
    grad_bias = grad_y.reshape(-1, d).sum(axis=0)
    gx = grad_y * ln.gain
    grad_x = inv_std * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    return grad_gain, grad_bias, grad_x


@dataclass
class Embedding:
    tokens: np.ndarray  # (vocab, d_model)
    positions: np.ndarray  # (max_len, d_model)

    @classmethod
    def init(cls, rng: SeededRng, vocab: int, d_model: int, max_len: int):
        return cls(rng.normal(0.0, 0.02, size=(vocab, d_model)),
                   rng.normal(0.0, 0.02, size=(max_len, d_model)))


def embedding_forward(emb: Embedding, ids: np.ndarray) -> np.ndarray:
    seq = ids.shape[-1]
    if seq > emb.positions.shape[0]:
        raise ShapeError(f"sequence length {seq} exceeds positional table {emb.positions.shape[0]}")
    return emb.tokens[ids] + emb.positions[:seq]


def embedding_backward(emb: Embedding, ids: np.ndarray, grad_x: np.ndarray):
    d = emb.tokens.shape[1]
    grad_tokens = np.zeros_like(emb.tokens)
    np.add.at(grad_tokens, ids.reshape(-1), grad_x.reshape(-1, d))
    grad_positions = np.zeros_like(emb.positions)
    seq = ids.shape[-1]
    grad_positions[:seq] = grad_x.reshape(-1, seq, d).sum(axis=0)
    return grad_tokens, grad_positions


# --------------------------------------------------------------------------
# transformer block


@dataclass
class TransformerBlock:
    attention: AttentionLayer
    ffn_in: DenseLayer  # d_model -> d_ff, relu
    ffn_out: DenseLayer  # d_ff -> d_model, identity
    ln1: LayerNorm
    ln2: LayerNorm
    causal_mask: bool = True
    block_norm: str = "pre"

    def __post_init__(self):
        if self.block_norm not in ("pre", "post"):
            raise ParameterError(f"block_norm must be 'pre' or 'post', got {self.block_norm!r}")

    @classmethod
    def init(cls, rng: SeededRng, d_model: int, n_heads: int, d_ff: int, causal: bool = True,
             block_norm: str = "pre", dropout: float = 0.0, attn_dropout: float = 0.0):
        return cls(
            AttentionLayer.init(rng, d_model, n_heads, attn_dropout),
            DenseLayer.init(rng, d_model, d_ff, "relu", dropout),
            DenseLayer.init(rng, d_ff, d_model, "identity"),
            LayerNorm.init(d_model),
            LayerNorm.init(d_model),
            causal,
            block_norm,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {
            "attn.w_q": self.attention.w_q, "attn.w_k": self.attention.w_k,
            "attn.w_v": self.attention.w_v, "attn.w_out": self.attention.w_out,
            "ln1.gain": self.ln1.gain, "ln1.bias": self.ln1.bias,
            "ffn.w_in": self.ffn_in.weight, "ffn.b_in": self.ffn_in.bias,
            "ffn.w_out": self.ffn_out.weight, "ffn.b_out": self.ffn_out.bias,
            "ln2.gain": self.ln2.gain, "ln2.bias": self.ln2.bias,
        }


def attn_sublayer_forward(block: TransformerBlock, x, causal=None, rng=None):
    causal = block.causal_mask if causal is None else causal
    if block.block_norm == "pre":
        n, ln_cache = layernorm_forward(block.ln1, x)
        att, att_cache = attention_forward(block.attention, n, causal, rng)
        return x + att, (ln_cache, att_cache, None)
    att, att_cache = attention_forward(block.attention, x, causal, rng)
    u, ln_cache = layernorm_forward(block.ln1, x + att)
    return u, (ln_cache, att_cache, None)


def attn_sublayer_backward(block: TransformerBlock, cache, grad_u):
    ln_cache, att_cache, _ = cache
    if block.block_norm == "pre":
        g_wq, g_wk, g_wv, g_wo, g_n = attention_backward(att_cache, grad_u)
        g_gain, g_bias, g_x = layernorm_backward(block.ln1, ln_cache, g_n)
        g_x = g_x + grad_u
    else:
        g_gain, g_bias, g_s = layernorm_backward(block.ln1, ln_cache, grad_u)
        g_wq, g_wk, g_wv, g_wo, g_x = attention_backward(att_cache, g_s)
        g_x = g_x + g_s
    grads = {"attn.w_q": g_wq, "attn.w_k": g_wk, "attn.w_v": g_wv, "attn.w_out": g_wo,
             "ln1.gain": g_gain, "ln1.bias": g_bias}
    return grads, g_x


def _ffn_forward(block, z, rng):
    mask = dropout_mask(rng, z.shape[:-1] + (block.ffn_in.out_dim,), block.ffn_in.dropout)
    a1, h1 = dense_forward(block.ffn_in, z, mask)
    a2, h2 = dense_forward(block.ffn_out, h1)
    return h2, (z, a1, h1, mask, a2)


def _ffn_backward(block, cache, grad):
    z, a1, h1, mask, a2 = cache
    g_w2, g_b2, g_h1 = dense_backward(block.ffn_out, h1, a2, grad)
    g_w1, g_b1, g_z = dense_backward(block.ffn_in, z, a1, g_h1, mask)
    return {"ffn.w_in": g_w1, "ffn.b_in": g_b1, "ffn.w_out": g_w2, "ffn.b_out": g_b2}, g_z


def ffn_sublayer_forward(block: TransformerBlock, u, rng=None):
    if block.block_norm == "pre":
        n, ln_cache = layernorm_forward(block.ln2, u)
        f, f_cache = _ffn_forward(block, n, rng)
        return u + f, (ln_cache, f_cache)
    f, f_cache = _ffn_forward(block, u, rng)
    out, ln_cache = layernorm_forward(block.ln2, u + f)
    return out, (ln_cache, f_cache)


def ffn_sublayer_backward(block: TransformerBlock, cache, grad_out):
    ln_cache, f_cache = cache
    if block.block_norm == "pre":
        grads, g_n = _ffn_backward(block, f_cache, grad_out)
        g_gain, g_bias, g_u = layernorm_backward(block.ln2, ln_cache, g_n)
        g_u = g_u + grad_out
    else:
        g_gain, g_bias, g_s = layernorm_backward(block.ln2, ln_cache, grad_out)
        grads, g_u = _ffn_backward(block, f_cache, g_s)
        g_u = g_u + g_s
    grads.update({"ln2.gain": g_gain, "ln2.bias": g_bias})
    return grads, g_u


def transformer_block_forward(block: TransformerBlock, x, causal=None, rng=None):
    if x.shape[-1] != block.attention.d_model:
        raise ShapeError(f"block input {x.shape} incompatible with d_model={block.attention.d_model}")
    u, c1 = attn_sublayer_forward(block, x, causal, rng)
    out, c2 = ffn_sublayer_forward(block, u, rng)
    return out, (c1, c2)


def transformer_block_backward(block: TransformerBlock, cache, grad_out):
    c1, c2 = cache
    grads, g_u = ffn_sublayer_backward(block, c2, grad_out)
    g_attn, g_x = attn_sublayer_backward(block, c1, g_u)
    grads.update(g_attn)
    return grads, g_x
