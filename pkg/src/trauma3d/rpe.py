"""Set-prediction decoder with 3D vertex relative-position attention bias.

Each decoder layer computes, for every (query box, token) pair, the offsets
from the token position to the 8 box vertices, maps them through a signed log
and 8 small MLPs, and adds the summed result per head to the cross-attention
logits.  Boxes are refined every layer and the bias is recomputed from the
incoming boxes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import VERTEX_SIGNS, BBox3D, Detection
from .networks import PredictionHeads
from .nn import LayerNorm, Linear, Module, Parameter
from .tensor import DimensionError, Tensor


@dataclass
class RPEConfig:
    d_model: int = 32
    heads: int = 4
    rpe_hidden: int = 16
    n_layers: int = 2
    n_queries: int = 16
    n_classes: int = 7
    ffn_dim: int = 64
    feature_dim: int = 32
    tau: float = 0.1
    init_center: float = 0.5
    init_size: float = 0.25
    refine: str = "relative"

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads:
            raise DimensionError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.refine not in ("relative", "absolute"):
            raise ValueError(f"refine must be 'relative' or 'absolute', got {self.refine!r}")


@dataclass
class DetectionOutput:
    logits: Tensor   # (K, C+1), last column is no-object
    centers: Tensor  # (K, 3) model frame
    sizes: Tensor    # (K, 3) model frame

    def probabilities(self):
        z = self.logits.data.astype(np.float64)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def detections(self, dims=None, min_score=0.0):
        """One Detection per query: best real category, softmax score (no-object excluded)."""
        p = self.probabilities()[:, :-1]
        cats = p.argmax(axis=1)
        out = []
        for k, cat in enumerate(cats):
            score = float(p[k, cat])
            if score < min_score:
                continue
            box = BBox3D(self.centers.data[k], self.sizes.data[k], "model")
            out.append(Detection(box.to_voxel(dims) if dims is not None else box, int(cat), score))
        return out


@dataclass
class QueryState:
    """Query embeddings plus boxes kept as pre-activations (logistic centres, softplus sizes)."""
    embeddings: Tensor
    center_pre: Tensor
    size_pre: Tensor

    @property
    def centers(self):
        return T.sigmoid(self.center_pre)

    @property
    def sizes(self):
        return T.softplus(self.size_pre)

    def boxes(self):
        return [BBox3D(c, s, "model") for c, s in zip(self.centers.data, self.sizes.data)]


def _box_arrays(boxes):
    c = np.array([b.center for b in boxes], dtype=T.default_dtype())
    s = np.array([b.size for b in boxes], dtype=T.default_dtype())
    return Tensor(c), Tensor(s)


def vertex_offsets(centers, sizes, positions):
    """ΔP[k, n, i] = position_n - vertex_i(box_k), shape (K, N, 8, 3).

    ``centers``/``sizes`` are (K, 3) tensors; a list of BBox3D may be passed as
    ``centers`` with ``sizes=None``.
    """
    if sizes is None:
        centers, sizes = _box_arrays(centers)
    centers, sizes = T.as_tensor(centers), T.as_tensor(sizes)
    pos = T.as_tensor(positions)
    K, N = centers.shape[0], pos.shape[0]
    signs = Tensor(VERTEX_SIGNS.astype(centers.dtype)[None])
    verts = T.reshape(centers, (K, 1, 3)) + signs * T.reshape(sizes * 0.5, (K, 1, 3))
    return T.reshape(pos, (1, N, 1, 3)) - T.reshape(verts, (K, 1, 8, 3))


class VertexMLP(Module):
    def __init__(self, hidden, heads, rng):
        self.fc1 = Linear(3, hidden, rng)
        self.fc2 = Linear(hidden, heads, rng)

    def forward(self, x):
        return self.fc2(T.relu(self.fc1(x)))


class VertexRPE(Module):
    """Eight independent MLPs, one per vertex index."""

    def __init__(self, hidden, heads, rng, tau=0.1):
        self.tau = tau
        self.heads = heads
        self.mlps = []
        for i in range(8):
            m = VertexMLP(hidden, heads, rng)
            setattr(self, f"mlp{i}", m)
            self.mlps.append(m)

    def forward(self, dp):
        return rpe_bias(dp, self.mlps, self.tau)


def rpe_bias(dp, mlps, tau=0.1):
    """R = sum_i MLP_i(F(ΔP_i)) with F(d) = sign(d) log(1 + |d|/tau); shape (K, N, h)."""
    K, N = dp.shape[:2]
    f = T.transpose(T.reshape(T.signed_log(dp, tau), (K * N, 8, 3)), (1, 0, 2))
    total = None
    for i, mlp in enumerate(mlps):
        r = mlp(T.index(f, i))
        total = r if total is None else total + r
    return T.reshape(total, (K, N, total.shape[-1]))


def attention(q, k, v, heads, bias=None):
    """Scaled dot-product attention on projected (K,d), (N,d), (N,d); returns (out, per-head weights)."""
    Kq, d = q.shape
    N = k.shape[0]
    if d % heads or k.shape[1] != d or v.shape[0] != N:
        raise DimensionError(f"attention shapes q{q.shape} k{k.shape} v{v.shape} heads={heads}")
    if bias is not None and tuple(bias.shape) != (Kq, N, heads):
        raise DimensionError(f"bias shape {bias.shape} != {(Kq, N, heads)}")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    outs, weights = [], []
    for h in range(heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        logits = T.matmul(T.index(q, cols), T.transpose(T.index(k, cols))) * scale
        if bias is not None:
            logits = logits + T.index(bias, (slice(None), slice(None), h))
        a = T.softmax(logits, axis=-1)
        weights.append(a)
        outs.append(T.matmul(a, T.index(v, cols)))
    return T.concatenate(outs, axis=1), weights


class MultiHeadAttention(Module):
    def __init__(self, d, heads, rng):
        self.heads = heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.last_weights = None

    def forward(self, queries, keys, values, bias=None):
        out, self.last_weights = attention(self.wq(queries), self.wk(keys), self.wv(values), self.heads, bias)
        return self.wo(out)


def biased_cross_attention(mha, queries, keys, values, R):
    return mha(queries, keys, values, R)


class DecoderLayer(Module):
    def __init__(self, cfg, rng):
        d = cfg.d_model
        self.self_attn = MultiHeadAttention(d, cfg.heads, rng)
        self.norm1 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, rng)
        self.norm2 = LayerNorm(d)
        self.rpe = VertexRPE(cfg.rpe_hidden, cfg.heads, rng, cfg.tau)
        self.ffn1 = Linear(d, cfg.ffn_dim, rng)
        self.ffn2 = Linear(cfg.ffn_dim, d, rng)
        self.norm3 = LayerNorm(d)
        self.use_rpe = True
        self.relative = cfg.refine == "relative"

    def forward(self, state, memory, positions, heads):
        x = state.embeddings
        x = self.norm1(x + self.self_attn(x, x, x))
        R = None
        if self.use_rpe:
            R = self.rpe(vertex_offsets(state.centers, state.sizes, positions))
        x = self.norm2(x + self.cross_attn(x, memory, memory, R))
        x = self.norm3(x + self.ffn2(T.relu(self.ffn1(x))))
        z, dc, ds = heads.raw(x)
        if self.relative:
            # head output is a step in pre-activation space from the incoming box
            dc, ds = state.center_pre + dc, state.size_pre + ds
        new = QueryState(x, dc, ds)
        return new, DetectionOutput(z, new.centers, new.sizes)


def decoder_layer(layer, state, tokens, heads, memory=None):
    if memory is None:
        memory = tokens.features
    return layer(state, memory, tokens.positions, heads)[0]


def _inv_softplus(y):
    return float(np.log(np.expm1(y)))


def _logit(p):
    return float(np.log(p / (1.0 - p)))


class RPEDecoder(Module):
    """Learned queries and initial boxes, L refinement layers, shared prediction heads."""

    def __init__(self, cfg=None, seed=0):
        cfg = cfg or RPEConfig()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        d = cfg.d_model
        self.feature_norm = LayerNorm(cfg.feature_dim)
        self.input_proj = Linear(cfg.feature_dim, d, rng)
        self.pos_proj = Linear(3, d, rng)
        self.memory_norm = LayerNorm(d)
        self.query_embed = Parameter(rng.normal(0.0, 1.0, (cfg.n_queries, d)))
        self.init_center = Parameter(np.full((cfg.n_queries, 3), _logit(cfg.init_center)))
        self.init_size = Parameter(np.full((cfg.n_queries, 3), _inv_softplus(cfg.init_size)))
        self.layers = []
        for i in range(cfg.n_layers):
            layer = DecoderLayer(cfg, rng)
            setattr(self, f"layer{i}", layer)
            self.layers.append(layer)
        self.heads = PredictionHeads(d, cfg.n_classes, rng)

    def initial_state(self):
        return QueryState(self.query_embed, self.init_center, self.init_size)

    def memory(self, tokens):
        feats = tokens.features
        if feats.shape[1] != self.cfg.feature_dim:
            raise DimensionError(f"token width {feats.shape[1]} != feature_dim {self.cfg.feature_dim}")
        pos = Tensor(np.asarray(tokens.positions, dtype=feats.dtype))
        return self.memory_norm(self.input_proj(self.feature_norm(feats)) + self.pos_proj(pos))

    def forward(self, tokens):
        memory = self.memory(tokens)
        state = self.initial_state()
        outputs = []
        for layer in self.layers:
            state, out = layer(state, memory, tokens.positions, self.heads)
            outputs.append(out)
        return outputs


def decoder_forward(decoder, tokens):
    """Per-layer list of DetectionOutput (final entry is used for inference)."""
    return decoder(tokens)
