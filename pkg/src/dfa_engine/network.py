"""Networks as ordered attachment regions.

A network is a chain of *steps* (a dense layer, a graph convolution, an
attention or feed-forward sub-layer, ...). Consecutive steps are grouped
into *regions*: the unit that receives one feedback signal in DFA mode and
one update task in the parallel engine. The last region is the output head;
its output is the logit matrix ``a_y`` that the loss consumes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .feedback import (FeedbackMatrix, FeedbackPlacement, broadcast_error, init_feedback,
                       init_shared_master)
from .tensor import ParameterError, SeededRng, ShapeError, content_hash

MODES = ("bp", "dfa", "shallow")


class ContractError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# steps


class DenseStep:
    def __init__(self, name: str, layer: L.DenseLayer):
        self.name, self.layer = name, layer

    def params(self):
        return {f"{self.name}.weight": self.layer.weight, f"{self.name}.bias": self.layer.bias}

    def forward(self, x, rng):
        mask = L.dropout_mask(rng, x.shape[:-1] + (self.layer.out_dim,), self.layer.dropout)
        a, h = L.dense_forward(self.layer, x, mask)
        return h, (x, a, h, mask)

    def backward(self, cache, grad):
        x, a, _, mask = cache
        gw, gb, gx = L.dense_backward(self.layer, x, a, grad, mask)
        return {f"{self.name}.weight": gw, f"{self.name}.bias": gb}, gx


class GraphConvStep:
    def __init__(self, name: str, layer: L.GraphConvLayer, input_dropout: float = 0.0):
        self.name, self.layer, self.input_dropout = name, layer, input_dropout

    def params(self):
        return {f"{self.name}.weight": self.layer.weight, f"{self.name}.bias": self.layer.bias}

    def forward(self, x, rng):
        in_mask = L.dropout_mask(rng, x.shape, self.input_dropout)
        if in_mask is not None:
            x = x * in_mask
        mask = L.dropout_mask(rng, (x.shape[0], self.layer.out_dim), self.layer.dropout)
        a, h = L.graphconv_forward(self.layer, x, mask)
        return h, (x, a, h, mask, in_mask)

    def backward(self, cache, grad):
        x, a, _, mask, in_mask = cache
        gw, gb, gx = L.graphconv_backward(self.layer, x, a, grad, mask)
        if in_mask is not None:
            gx = gx * in_mask
        return {f"{self.name}.weight": gw, f"{self.name}.bias": gb}, gx


class EmbeddingStep:
    def __init__(self, name: str, emb: L.Embedding):
        self.name, self.emb = name, emb

    def params(self):
        return {f"{self.name}.tokens": self.emb.tokens, f"{self.name}.positions": self.emb.positions}

    def forward(self, ids, rng):
        return L.embedding_forward(self.emb, ids), ids

    def backward(self, ids, grad):
        gt, gp = L.embedding_backward(self.emb, ids, grad)
        return {f"{self.name}.tokens": gt, f"{self.name}.positions": gp}, None


class _BlockStep:
    def __init__(self, name: str, block: L.TransformerBlock):
        self.name, self.block = name, block

    def _prefixed(self, grads):
        return {f"{self.name}.{k}": v for k, v in grads.items()}


class AttnSublayerStep(_BlockStep):
    def params(self):
        return {f"{self.name}.{k}": v for k, v in self.block.params().items()
                if k.startswith(("attn.", "ln1."))}

    def forward(self, x, rng):
        return L.attn_sublayer_forward(self.block, x, None, rng)

    def backward(self, cache, grad):
        grads, gx = L.attn_sublayer_backward(self.block, cache, grad)
        return self._prefixed(grads), gx


class FfnSublayerStep(_BlockStep):
    def params(self):
        return {f"{self.name}.{k}": v for k, v in self.block.params().items()
                if k.startswith(("ffn.", "ln2."))}

    def forward(self, x, rng):
        return L.ffn_sublayer_forward(self.block, x, rng)

    def backward(self, cache, grad):
        grads, gx = L.ffn_sublayer_backward(self.block, cache, grad)
        return self._prefixed(grads), gx


class LayerNormStep:
    def __init__(self, name: str, ln: L.LayerNorm):
        self.name, self.ln = name, ln

    def params(self):
        return {f"{self.name}.gain": self.ln.gain, f"{self.name}.bias": self.ln.bias}

    def forward(self, x, rng):
        return L.layernorm_forward(self.ln, x)

    def backward(self, cache, grad):
        gg, gb, gx = L.layernorm_backward(self.ln, cache, grad)
        return {f"{self.name}.gain": gg, f"{self.name}.bias": gb}, gx


# --------------------------------------------------------------------------
# regions


@dataclass
class Region:
    name: str
    steps: list
    out_dim: int

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for s in self.steps:
            out.update(s.params())
        return out

    def forward(self, x, rng):
        caches = []
        for s in self.steps:
            x, c = s.forward(x, rng)
            caches.append(c)
        return x, caches

    def backward(self, caches, grad):
        """Internal exact backward. Returns (param grads, grad w.r.t. region input)."""
        grads = {}
        for s, c in zip(reversed(self.steps), reversed(caches)):
            g, grad = s.backward(c, grad)
            grads.update(g)
        return grads, grad


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    outputs: list  # h_i per region; outputs[-1] is a_y
    caches: list

    def __len__(self):
        return len(self.outputs)

    @property
    def predictions(self) -> np.ndarray:
        return self.outputs[-1]

    def pairs(self):
        """(a_i, h_i) for regions made of a single dense/graph step."""
        out = []
        for caches in self.caches:
            c = caches[-1]
            dense_like = isinstance(c, tuple) and len(c) in (4, 5) and isinstance(c[1], np.ndarray)
            out.append((c[1], c[2]) if dense_like else (None, None))
        return out


@dataclass
class Network:
    regions: list[Region]
    mode: str = "bp"
    loss: str = "softmax_cross_entropy"
    error_dim: int = 0
    feedback: dict[str, FeedbackMatrix] = field(default_factory=dict)
    placement: FeedbackPlacement | None = None
    kind: str = "mlp"
    feedback_storage: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        names = [r.name for r in self.regions]
        if len(set(names)) != len(names):
            raise ParameterError(f"duplicate region names: {names}")
        self.params = {}
        for r in self.regions:
            for k, v in r.params().items():
                if k in self.params:
                    raise ParameterError(f"parameter {k!r} owned by two regions")
                self.params[k] = v

    @property
    def top(self) -> Region:
        return self.regions[-1]

    @property
    def hidden(self) -> list[Region]:
        return self.regions[:-1]

    def region_params(self, idx: int) -> list[str]:
        return list(self.regions[idx].params())

    def forward_trace(self, x, rng: SeededRng | None = None) -> ForwardTrace:
        """Run the forward pass keeping every region's output and cache.

        ``rng`` drives dropout; pass None for a deterministic evaluation pass.
        """
        outputs, caches = [], []
        h = x
        for r in self.regions:
            h, c = r.forward(h, rng)
            outputs.append(h)
            caches.append(c)
        return ForwardTrace(x, outputs, caches)

    def predict(self, x) -> np.ndarray:
        return self.forward_trace(x).predictions

    def check_feedback(self) -> None:
        if self.mode != "dfa":
            return
        for r in self.hidden:
            fb = self.feedback.get(r.name)
            if fb is None:
                raise ContractError(f"DFA network has no feedback matrix for {r.name!r}")
            if fb.shape != (r.out_dim, self.error_dim):
                raise ContractError(f"feedback for {r.name!r} has shape {fb.shape}, "
                                    f"expected {(r.out_dim, self.error_dim)}")

    def dfa_signal(self, idx: int, delta_ay: np.ndarray, out_shape) -> np.ndarray:
        """The signal injected at region ``idx``'s output: B_i delta_ay, or delta_ay at the top."""
        if idx == len(self.regions) - 1:
            return delta_ay.reshape(out_shape)
        name = self.regions[idx].name
        fb = self.feedback.get(name)
        if fb is None:
            raise ContractError(f"missing feedback matrix for attachment point {name!r}")
        flat = delta_ay.reshape(-1, delta_ay.shape[-1])
        return broadcast_error(fb, flat).reshape(out_shape)

    def param_hash(self, names=None) -> str:
        names = sorted(self.params) if names is None else names
        return content_hash(*(self.params[n] for n in names))

    def hidden_param_names(self) -> list[str]:
        top = set(self.top.params())
        return [n for n in self.params if n not in top]


# --------------------------------------------------------------------------
# builders


def attach_feedback(net: Network, rng: SeededRng, scale_rule: str = "target",
                    shared_master: bool = False, granularity: str = "per_layer") -> None:
    points = [r.name for r in net.hidden]
    net.placement = FeedbackPlacement(granularity, points)
    if not points:
        return
    if shared_master:
        master = init_shared_master(rng, max(r.out_dim for r in net.hidden), net.error_dim, scale_rule)
        net.feedback = {r.name: master.view(r.out_dim, r.name) for r in net.hidden}
        net.feedback_storage = master.storage_size
    else:
        net.feedback = {r.name: init_feedback(rng, r.out_dim, net.error_dim, r.name, scale_rule)
                        for r in net.hidden}
        net.feedback_storage = sum(fb.raw.size for fb in net.feedback.values())
    net.placement.validate(net.feedback, net.top.name)


def build_mlp(rng: SeededRng, dims: list[int], activation: str = "relu", mode: str = "bp",
              loss: str = "softmax_cross_entropy", dropout: float = 0.0,
              feedback_rng: SeededRng | None = None, scale_rule: str = "target",
              shared_master: bool = False) -> Network:
    """Fully connected net; ``dims`` = [in, hidden..., out]. The top layer is linear."""
    if len(dims) < 2:
        raise ParameterError(f"an MLP needs at least input and output dims, got {dims}")
    regions = []
    n = len(dims) - 1
    for i in range(n):
        top = i == n - 1
        layer = L.DenseLayer.init(rng, dims[i], dims[i + 1], "identity" if top else activation,
                                  0.0 if top else dropout)
        regions.append(Region(f"dense{i}", [DenseStep(f"dense{i}", layer)], dims[i + 1]))
    net = Network(regions, mode, loss, dims[-1], kind="mlp")
    if mode == "dfa":
        attach_feedback(net, feedback_rng or rng, scale_rule, shared_master)
    return net


def build_gcn(rng: SeededRng, normalized_adjacency: np.ndarray, dims: list[int], activation: str = "relu",
              mode: str = "bp", dropout: float = 0.0, input_dropout: float = 0.0,
              feedback_rng: SeededRng | None = None, scale_rule: str = "target",
              shared_master: bool = False) -> Network:
    if len(dims) < 2:
        raise ParameterError(f"a graph network needs at least input and output dims, got {dims}")
    regions = []
    n = len(dims) - 1
    for i in range(n):
        top = i == n - 1
        layer = L.GraphConvLayer.init(rng, dims[i], dims[i + 1], normalized_adjacency,
                                      "identity" if top else activation, 0.0 if top else dropout)
        # input dropout applies to every graph layer's incoming features
        step = GraphConvStep(f"gc{i}", layer, input_dropout)
        regions.append(Region(f"gc{i}", [step], dims[i + 1]))
    net = Network(regions, mode, "softmax_cross_entropy", dims[-1], kind="gcn")
    if mode == "dfa":
        attach_feedback(net, feedback_rng or rng, scale_rule, shared_master)
    return net


def build_transformer_lm(rng: SeededRng, vocab: int, d_model: int, n_heads: int, d_ff: int, n_blocks: int,
                         max_len: int, mode: str = "bp", granularity: str = "macro_block",
                         block_norm: str = "pre", causal: bool = True, dropout: float = 0.0,
                         attn_dropout: float = 0.0, feedback_rng: SeededRng | None = None,
                         scale_rule: str = "target", shared_master: bool = False) -> Network:
    """Decoder-only character LM.

    ``macro_block``: one region per block. ``micro_sublayer``: one region per
    attention / feed-forward sub-layer. Either way the embedding belongs to
    the first region, so it is trained by backprop through that region.
    """
    if granularity not in ("macro_block", "micro_sublayer"):
        raise ParameterError(f"transformer granularity must be macro_block or micro_sublayer, got {granularity!r}")
    emb = EmbeddingStep("embed", L.Embedding.init(rng, vocab, d_model, max_len))
    blocks = [L.TransformerBlock.init(rng, d_model, n_heads, d_ff, causal, block_norm, dropout, attn_dropout)
              for _ in range(n_blocks)]
    regions: list[Region] = []
    for i, b in enumerate(blocks):
        attn, ffn = AttnSublayerStep(f"block{i}", b), FfnSublayerStep(f"block{i}", b)
        lead = [emb] if i == 0 else []
        if granularity == "macro_block":
            regions.append(Region(f"block{i}", lead + [attn, ffn], d_model))
        else:
            regions.append(Region(f"block{i}.attn", lead + [attn], d_model))
            regions.append(Region(f"block{i}.ffn", [ffn], d_model))
    head_steps = []
    if block_norm == "pre":
        head_steps.append(LayerNormStep("head.ln", L.LayerNorm.init(d_model)))
    head_steps.append(DenseStep("head", L.DenseLayer.init(rng, d_model, vocab)))
    regions.append(Region("head", head_steps, vocab))
    net = Network(regions, mode, "softmax_cross_entropy", vocab, kind="transformer")
    if mode == "dfa":
        attach_feedback(net, feedback_rng or rng, scale_rule, shared_master, granularity)
    return net


def check_shapes(net: Network, trace: ForwardTrace) -> None:
    if len(trace) != len(net.regions):
        raise ContractError(f"trace has {len(trace)} entries for a network of {len(net.regions)} regions")
    for r, out in zip(net.regions, trace.outputs):
        if out.shape[-1] != r.out_dim:
            raise ShapeError(f"region {r.name!r} produced width {out.shape[-1]}, declared {r.out_dim}")
