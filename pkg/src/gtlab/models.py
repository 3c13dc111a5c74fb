"""Network architectures: MLPs, message passing, virtual nodes, attention, GPS.

Every spec is a plain dataclass tree whose leaves are parameter arrays.  The
same forward code runs on numpy leaves (inference) and on tape variables
(training): :func:`bind` swaps each leaf for a tracked tensor.

Weights of MLP layers are stored as (out, in) and applied row-wise
(``X @ W.T + b``); attention and GCN matrices are stored as (in, out) and
right-multiplied, matching how each is usually written down.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Callable, Iterator, Union

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParseError
from .graphs import FeaturedGraph, GraphBatch, as_batch
from .tensor import Tape, Tensor

Array = Union[np.ndarray, Tensor]


@dataclass
class MLPSpec:
    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("MLP needs one bias per weight matrix and at least one layer")
        for i in range(1, len(self.weights)):
            if _shape(self.weights[i])[1] != _shape(self.weights[i - 1])[0]:
                raise DimensionError(f"MLP layer {i} does not chain")
        for W, b in zip(self.weights, self.biases):
            if _shape(b) != (1, _shape(W)[0]):
                raise DimensionError("MLP bias must be 1 x out")

    @property
    def in_dim(self) -> int:
        return _shape(self.weights[0])[1]

    @property
    def out_dim(self) -> int:
        return _shape(self.weights[-1])[0]


@dataclass
class MPGSpec:
    """Message-passing gadget: U(Z_v, AGG{Z_u : u in N(v)}) with U of I/O 2d;d."""

    update: MLPSpec
    agg: str = "sum"

    def __post_init__(self):
        if self.update.in_dim != 2 * self.update.out_dim:
            raise DimensionError("update MLP must map 2d -> d")


@dataclass
class GCNSpec:
    """Kipf-Welling convolution ReLU(D^-1/2 (A+I) D^-1/2 X W); weight is (d_in, d_out)."""

    weight: object


@dataclass
class ReadoutSpec:
    mlp: MLPSpec
    agg: str = "sum"


@dataclass
class AttentionHead:
    w_q: object
    w_k: object
    w_v: object


@dataclass
class SelfAttentionSpec:
    heads: list
    w_o: object

    def __post_init__(self):
        dh = {_shape(h.w_v)[1] for h in self.heads}
        if len(dh) != 1:
            raise DimensionError("heads must share d_h")
        if _shape(self.w_o)[0] != len(self.heads) * dh.pop():
            raise DimensionError("W_O must have k*d_h rows")


@dataclass
class NormSpec:
    kind: str = "identity"
    gamma: object = None
    beta: object = None


@dataclass
class MPLayer:
    mp: Union[MPGSpec, GCNSpec]


@dataclass
class MPVNLayer:
    mp: Union[MPGSpec, GCNSpec]
    vn: ReadoutSpec


@dataclass
class TransformerLayer:
    sa: SelfAttentionSpec
    ff: MLPSpec
    norm1: NormSpec = field(default_factory=NormSpec)
    norm2: NormSpec = field(default_factory=NormSpec)


@dataclass
class GPSLayer:
    sa: SelfAttentionSpec
    mp: Union[MPGSpec, GCNSpec]
    ff: MLPSpec
    norm1: NormSpec = field(default_factory=NormSpec)
    norm2: NormSpec = field(default_factory=NormSpec)
    norm3: NormSpec = field(default_factory=NormSpec)


@dataclass
class NetworkSpec:
    """N = (P, L_1..L_k, R); PE columns are concatenated to the raw features."""

    prep: MLPSpec
    layers: list
    readout: ReadoutSpec
    pe_kind: str = "none"
    pe_dim: int = 0
    notes: str = ""


SPEC_TYPES = {cls.__name__: cls for cls in (
    MLPSpec, MPGSpec, GCNSpec, ReadoutSpec, AttentionHead, SelfAttentionSpec, NormSpec,
    MPLayer, MPVNLayer, TransformerLayer, GPSLayer, NetworkSpec)}


def _shape(x) -> tuple:
    return x.shape if isinstance(x, Tensor) else np.shape(x)


# ---------------------------------------------------------- parameter trees


def parameters(spec) -> Iterator:
    """Parameter leaves in declaration order (layer-major)."""
    if isinstance(spec, (np.ndarray, Tensor)):
        yield spec
    elif is_dataclass(spec):
        for f in fields(spec):
            yield from parameters(getattr(spec, f.name))
    elif isinstance(spec, list):
        for x in spec:
            yield from parameters(x)


def map_params(spec, fn: Callable):
    if isinstance(spec, (np.ndarray, Tensor)):
        return fn(spec)
    if is_dataclass(spec):
        return type(spec)(**{f.name: map_params(getattr(spec, f.name), fn) for f in fields(spec)})
    if isinstance(spec, list):
        return [map_params(x, fn) for x in spec]
    return spec


def bind(spec, tape: Tape):
    """Copy of ``spec`` with every parameter replaced by a tape variable."""
    return map_params(spec, tape.variable)


def num_params(spec) -> int:
    return sum(int(np.prod(_shape(p))) for p in parameters(spec))


def flat_params(spec) -> np.ndarray:
    parts = [np.asarray(p.data if isinstance(p, Tensor) else p).ravel() for p in parameters(spec)]
    return np.concatenate(parts) if parts else np.zeros(0)


def with_flat_params(spec, flat: np.ndarray):
    flat = np.asarray(flat, dtype=np.float64)
    pos = 0

    def take(p):
        nonlocal pos
        k = int(np.prod(p.shape))
        out = flat[pos:pos + k].reshape(p.shape).copy()
        pos += k
        return out

    out = map_params(spec, take)
    if pos != len(flat):
        raise DimensionError(f"parameter vector has {len(flat)} entries, spec needs {pos}")
    return out


# ----------------------------------------------------------- initialisation


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_mlp(rng: np.random.Generator, dims: list[int]) -> MLPSpec:
    Ws, bs = [], []
    for i, o in zip(dims[:-1], dims[1:]):
        Ws.append(glorot(rng, (o, i), i, o))
        bs.append(np.zeros((1, o)))
    return MLPSpec(Ws, bs)


def init_norm(kind: str, d: int) -> NormSpec:
    if kind == "identity":
        return NormSpec()
    if kind == "layernorm":
        return NormSpec("layernorm", np.ones((1, d)), np.zeros((1, d)))
    raise ValueError(f"unknown norm {kind!r}")


def init_gadget(rng, kind: str, d: int, agg: str = "sum"):
    if kind == "gcn":
        return GCNSpec(glorot(rng, (d, d), d, d))
    if kind == "mpg":
        return MPGSpec(init_mlp(rng, [2 * d, d, d]), agg)
    raise ValueError(f"unknown message-passing module {kind!r}")


def init_self_attention(rng, d: int, heads: int) -> SelfAttentionSpec:
    dh = max(d // heads, 1)
    hs = [AttentionHead(glorot(rng, (d, dh), d, dh), glorot(rng, (d, dh), d, dh), glorot(rng, (d, dh), d, dh))
          for _ in range(heads)]
    return SelfAttentionSpec(hs, glorot(rng, (heads * dh, d), heads * dh, d))


def init_network(kind: str, p: int, d: int, q: int, depth: int, rng: np.random.Generator, *,
                 mp: str = "gcn", agg: str = "sum", vn_agg: str = "sum", readout_agg: str = "sum",
                 heads: int = 1, norm: str = "identity", ff_mult: int = 2,
                 pe_kind: str = "none", pe_dim: int = 0) -> NetworkSpec:
    """Random network of the given kind: mpgnn | mpgnn_vn | gt | gps.

    ``p`` is the width of the features after PE attachment.
    """
    prep = init_mlp(rng, [p, d])
    layers = []
    for _ in range(depth):
        if kind == "mpgnn":
            layers.append(MPLayer(init_gadget(rng, mp, d, agg)))
        elif kind == "mpgnn_vn":
            layers.append(MPVNLayer(init_gadget(rng, mp, d, agg), ReadoutSpec(init_mlp(rng, [d, d, d]), vn_agg)))
        elif kind == "gt":
            layers.append(TransformerLayer(init_self_attention(rng, d, heads), init_mlp(rng, [d, ff_mult * d, d]),
                                           init_norm(norm, d), init_norm(norm, d)))
        elif kind == "gps":
            layers.append(GPSLayer(init_self_attention(rng, d, heads), init_gadget(rng, mp, d, agg),
                                   init_mlp(rng, [d, ff_mult * d, d]),
                                   init_norm(norm, d), init_norm(norm, d), init_norm(norm, d)))
        else:
            raise ValueError(f"unknown network kind {kind!r}")
    readout = ReadoutSpec(init_mlp(rng, [d, d, q]), readout_agg)
    return NetworkSpec(prep, layers, readout, pe_kind, pe_dim)


# ------------------------------------------------------------------ forward


def mlp_forward(spec: MLPSpec, X) -> Tensor:
    X = T.as_tensor(X)
    if X.cols != spec.in_dim:
        raise DimensionError(f"MLP expects {spec.in_dim} input columns, got {X.cols}")
    last = len(spec.weights) - 1
    for i, (W, b) in enumerate(zip(spec.weights, spec.biases)):
        X = T.linear(X, W, b)
        if i < last:
            X = T.relu(X)
    return X


def neighbor_aggregate(Z, batch: GraphBatch, kind: str) -> Tensor:
    if kind == "sum":
        return T.sparse_matmul(batch.adjacency, Z)
    if kind == "mean":
        return T.sparse_matmul(batch.mean_operator, Z)
    if kind == "max":
        A = batch.adjacency
        return T.neighbor_max(Z, A.indptr, A.indices)
    raise ValueError(f"unknown aggregation {kind!r}")


def mpg_forward(spec: MPGSpec, g, Z) -> Tensor:
    batch = as_batch(g)
    Z = T.as_tensor(Z)
    if Z.rows != batch.n_total:
        raise DimensionError("state matrix does not match the graph")
    return mlp_forward(spec.update, T.concat_cols([Z, neighbor_aggregate(Z, batch, spec.agg)]))


def gcn_conv(W, g, X) -> Tensor:
    batch = as_batch(g)
    return T.relu(T.matmul(T.sparse_matmul(batch.gcn_operator, X), W))


def gadget_forward(mp, g, Z) -> Tensor:
    if isinstance(mp, MPGSpec):
        return mpg_forward(mp, g, Z)
    if isinstance(mp, GCNSpec):
        return gcn_conv(mp.weight, g, Z)
    raise TypeError(f"not a message-passing module: {type(mp).__name__}")


def mp_layer_forward(spec, g, Z) -> Tensor:
    mp = spec.mp if isinstance(spec, (MPLayer, MPVNLayer)) else spec
    return T.add(gadget_forward(mp, g, Z), Z)


def readout_forward(spec: ReadoutSpec, g, Z) -> Tensor:
    """One row per graph: F(AGG over all vertices)."""
    batch = as_batch(g)
    return mlp_forward(spec.mlp, T.segment_reduce(Z, batch.offsets, spec.agg))


def vn_layer_forward(spec: MPVNLayer, g, Z) -> Tensor:
    batch = as_batch(g)
    H = mp_layer_forward(spec, batch, Z)
    return T.add(H, T.segment_broadcast(readout_forward(spec.vn, batch, H), batch.offsets))


def attention_head(w_q, w_k, w_v, X) -> Tensor:
    """softmax((X W_Q)(X W_K)^T / sqrt(d_h)) X W_V on a single graph."""
    X = T.as_tensor(X)
    dh = _shape(w_v)[1]
    logits = T.matmul(T.matmul(X, w_q), T.transpose(T.matmul(X, w_k)))
    if dh != 1:
        logits = T.scale(logits, 1.0 / math.sqrt(dh))
    return T.matmul(T.row_softmax(logits), T.matmul(X, w_v))


def _offsets(g, X) -> np.ndarray:
    if g is None:
        return np.array([0, T.as_tensor(X).rows])
    return as_batch(g).offsets


def self_attention(spec: SelfAttentionSpec, X, g=None) -> Tensor:
    """[H_1(X), ..., H_k(X)] W_O with attention confined to each graph of the batch."""
    X = T.as_tensor(X)
    offsets = _offsets(g, X)
    outs = []
    for h in spec.heads:
        dh = _shape(h.w_v)[1]
        outs.append(T.grouped_attention(T.matmul(X, h.w_q), T.matmul(X, h.w_k), T.matmul(X, h.w_v),
                                        offsets, 1.0 / math.sqrt(dh)))
    cat = outs[0] if len(outs) == 1 else T.concat_cols(outs)
    return T.matmul(cat, spec.w_o)


def norm_forward(spec: NormSpec, X) -> Tensor:
    if spec.kind == "identity":
        return T.as_tensor(X)
    if spec.kind == "layernorm":
        return T.layer_norm(X, spec.gamma, spec.beta, 1e-5)
    raise ValueError(f"unknown norm {spec.kind!r}")


def transformer_layer(spec: TransformerLayer, X, g=None) -> Tensor:
    X = T.as_tensor(X)
    Y = norm_forward(spec.norm1, T.add(X, self_attention(spec.sa, X, g)))
    return norm_forward(spec.norm2, T.add(Y, mlp_forward(spec.ff, Y)))


def gps_layer(spec: GPSLayer, g, X) -> Tensor:
    """Y = norm1(X + SA(X)) + norm2(X + M(X)); Z = norm3(Y + FF(Y))."""
    batch = as_batch(g)
    X = T.as_tensor(X)
    att = norm_forward(spec.norm1, T.add(X, self_attention(spec.sa, X, batch)))
    loc = norm_forward(spec.norm2, T.add(X, gadget_forward(spec.mp, batch, X)))
    Y = T.add(att, loc)
    return norm_forward(spec.norm3, T.add(Y, mlp_forward(spec.ff, Y)))


def layer_forward(layer, batch: GraphBatch, Z) -> Tensor:
    if isinstance(layer, MPLayer):
        return mp_layer_forward(layer, batch, Z)
    if isinstance(layer, MPVNLayer):
        return vn_layer_forward(layer, batch, Z)
    if isinstance(layer, TransformerLayer):
        return transformer_layer(layer, Z, batch)
    if isinstance(layer, GPSLayer):
        return gps_layer(layer, batch, Z)
    raise TypeError(f"unknown layer {type(layer).__name__}")


def forward_states(net: NetworkSpec, batch: GraphBatch, features=None) -> list[Tensor]:
    """Vertex states after P and after every layer (features must already carry PE columns)."""
    X = batch.x if features is None else features
    states = [mlp_forward(net.prep, X)]
    for layer in net.layers:
        states.append(layer_forward(layer, batch, states[-1]))
    return states


def forward_batch(net: NetworkSpec, batch: GraphBatch, features=None) -> Tensor:
    """Graph-level outputs, one row per graph of the batch."""
    return readout_forward(net.readout, batch, forward_states(net, batch, features)[-1])


def prepare_graph(net: NetworkSpec, g: FeaturedGraph) -> FeaturedGraph:
    if net.pe_kind == "none":
        return g
    from .encodings import attach_pe

    return attach_pe(g, net.pe_kind, net.pe_dim)


def network_forward(net: NetworkSpec, g: FeaturedGraph) -> np.ndarray:
    g = prepare_graph(net, g)
    if g.p != net.prep.in_dim:
        raise DimensionError(f"network expects {net.prep.in_dim} input features, graph has {g.p}")
    return forward_batch(net, GraphBatch([g])).data[0].copy()


def predict(net: NetworkSpec, graphs, batch_size: int = 256) -> np.ndarray:
    """Outputs for many prepared graphs (PE already attached), row per graph."""
    out = []
    for i in range(0, len(graphs), batch_size):
        out.append(forward_batch(net, GraphBatch(graphs[i:i + batch_size])).data)
    return np.vstack(out)


# ------------------------------------------------------------ serialization


def _manifest(obj):
    if isinstance(obj, (np.ndarray, Tensor)):
        return {"param": list(_shape(obj))}
    if is_dataclass(obj):
        d = {"type": type(obj).__name__}
        for f in fields(obj):
            d[f.name] = _manifest(getattr(obj, f.name))
        return d
    if isinstance(obj, list):
        return [_manifest(x) for x in obj]
    return obj


def _rebuild(node, take):
    if isinstance(node, dict) and "param" in node and len(node) == 1:
        return take(tuple(node["param"]))
    if isinstance(node, dict) and "type" in node:
        cls = SPEC_TYPES[node["type"]]
        return cls(**{k: _rebuild(v, take) for k, v in node.items() if k != "type"})
    if isinstance(node, list):
        return [_rebuild(x, take) for x in node]
    return node


MAGIC = "GTLAB-NETWORK 1"


def save_network(net: NetworkSpec, path, binary: bool = True) -> None:
    """Manifest line (JSON) followed by the flat parameter blob, layer-major, row-major."""
    flat = flat_params(net)
    head = f"{MAGIC}\n{json.dumps(_manifest(net))}\n"
    if binary:
        blob = (head + f"PARAMS binary {len(flat)}\n").encode() + flat.astype("<f8").tobytes()
        Path(path).write_bytes(blob)
    else:
        body = "\n".join(repr(float(x)) for x in flat)
        Path(path).write_text(head + f"PARAMS text {len(flat)}\n" + body + ("\n" if len(flat) else ""))


def load_network(path) -> NetworkSpec:
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n", 3)
    if len(lines) < 3 or lines[0].decode() != MAGIC:
        raise ParseError("not a network checkpoint", 1)
    manifest = json.loads(lines[1])
    hdr = lines[2].decode().split()
    if len(hdr) != 3 or hdr[0] != "PARAMS":
        raise ParseError("bad PARAMS header", 3)
    count = int(hdr[2])
    rest = lines[3] if len(lines) > 3 else b""
    if hdr[1] == "binary":
        flat = np.frombuffer(rest[:8 * count], dtype="<f8").astype(np.float64)
    else:
        flat = np.array([float(x) for x in rest.decode().split()], dtype=np.float64)
    if len(flat) != count:
        raise ParseError(f"expected {count} parameters, found {len(flat)}", 3)
    pos = 0

    def take(shape):
        nonlocal pos
        k = int(np.prod(shape))
        arr = flat[pos:pos + k].reshape(shape).copy()
        pos += k
        return arr

    return _rebuild(manifest, take)
