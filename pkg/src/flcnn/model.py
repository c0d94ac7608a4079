"""Network graphs: construction, initialization, execution, checkpoints.

A model is an explicit topologically-ordered list of primitive nodes
(conv / bn / relu / concat / add / sub) over node indices, plus a named
parameter store. The two builders produce denoisers of the form
yhat = z - f(z): the final node subtracts the conv path from the input.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

CHECKPOINT_MAGIC = b"FLCN"
CHECKPOINT_VERSION = 1

DEFAULT_BN_EPSILON = 1e-5
DEFAULT_BN_MOMENTUM = 0.1

TRAINABLE_KINDS = ("weight", "bias", "bn_gamma", "bn_beta")
PARAM_KINDS = TRAINABLE_KINDS + ("bn_running_mean", "bn_running_var")

_DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(dtype) -> type:
    """Map 'f32'/'f64' (or a numpy dtype) to the numpy scalar type."""
    if isinstance(dtype, str):
        try:
            return _DTYPE_NAMES[dtype]
        except KeyError:
            raise ValueError(f"dtype must be 'f32' or 'f64', got {dtype!r}") from None
    dt = np.dtype(dtype).type
    if dt not in T.SUPPORTED_DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    return dt


def dtype_name(dtype) -> str:
    return "f64" if np.dtype(dtype).itemsize == 8 else "f32"


class CheckpointError(Exception):
    """Base class for checkpoint file problems."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ManifestMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    """Stage depths: l 3x3 warmup convs, m 5x5 warmup convs, n inception layers."""

    l: int = 5
    m: int = 4
    n: int = 6

    def __post_init__(self):
        for name in ("l", "m", "n"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")


@dataclass
class ParamEntry:
    name: str
    kind: str
    array: np.ndarray


class ParamStore:
    """Ordered, uniquely named collection of parameter arrays."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, kind: str, array: np.ndarray) -> np.ndarray:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if kind not in PARAM_KINDS:
            raise ValueError(f"unknown parameter kind {kind!r}")
        self._entries[name] = ParamEntry(name, kind, array)
        return array

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].array

    def __setitem__(self, name: str, array: np.ndarray) -> None:
        entry = self._entries[name]
        if entry.array.shape != array.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        entry.array = array

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[ParamEntry]:
        return list(self._entries.values())

    def trainable_entries(self) -> list[ParamEntry]:
        return [e for e in self._entries.values() if e.kind in TRAINABLE_KINDS]

    def trainable_count(self) -> int:
        return sum(e.array.size for e in self.trainable_entries())

    def total_count(self) -> int:
        return sum(e.array.size for e in self._entries.values())


@dataclass
class Node:
    op: str                      # input | conv | bn | relu | concat | add | sub
    inputs: tuple[int, ...]
    name: str = ""               # parameter prefix for conv/bn nodes
    kernel: int = 0              # conv only
    c_in: int = 0
    c_out: int = 0


@dataclass
class ModelGraph:
    nodes: list[Node]
    params: ParamStore
    in_channels: int
    dtype: type
    arch: dict | None = None     # {"l","m","n"} or {"dncnn_middle"}; None for raw graphs
    bn_epsilon: float = DEFAULT_BN_EPSILON
    bn_momentum: float = DEFAULT_BN_MOMENTUM
    sigma: float | None = None

    def conv_params(self, node: Node) -> T.ConvParams:
        return T.ConvParams(self.params[f"{node.name}.weight"],
                            self.params[f"{node.name}.bias"])

    def bn_params(self, node: Node) -> T.BnParams:
        return T.BnParams(
            gamma=self.params[f"{node.name}.gamma"],
            beta=self.params[f"{node.name}.beta"],
            running_mean=self.params[f"{node.name}.running_mean"],
            running_var=self.params[f"{node.name}.running_var"],
            momentum=self.bn_momentum,
            epsilon=self.bn_epsilon,
        )


def new_graph(in_channels: int, dtype="f32",
              bn_epsilon: float = DEFAULT_BN_EPSILON,
              bn_momentum: float = DEFAULT_BN_MOMENTUM) -> ModelGraph:
    """Empty graph holding only the input node, ready for appending."""
    return ModelGraph(nodes=[Node("input", ())], params=ParamStore(),
                      in_channels=in_channels, dtype=resolve_dtype(dtype),
                      bn_epsilon=bn_epsilon, bn_momentum=bn_momentum)


def orthogonal_init(shape, rng, dtype=np.float32) -> np.ndarray:
    """Orthogonally initialized conv weight tensor (gain 1).

    The (c_out, c_in, k, k) weight is flattened to (c_out, c_in*k*k),
    filled with i.i.d. standard normals, and orthogonalized with a QR
    factorization whose signs are fixed by the diagonal of R. The short
    side of the matrix ends up orthonormal: rows when c_out <= c_in*k*k,
    columns otherwise.
    """
    dt = resolve_dtype(dtype)
    c_out, c_in, kh, kw = shape
    rows, cols = c_out, c_in * kh * kw
    rng = np.random.default_rng(rng)
    a = rng.standard_normal((rows, cols), dtype=dt)
    q, r = np.linalg.qr(a.T if rows <= cols else a)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0).astype(dt)
    w = q.T if rows <= cols else q
    return np.ascontiguousarray(w.reshape(shape), dtype=dt)


# -- graph appending helpers -------------------------------------------------

def _add_conv(g: ModelGraph, src: int, name: str, c_in: int, c_out: int,
              k: int, rng) -> int:
    w = orthogonal_init((c_out, c_in, k, k), rng, g.dtype)
    g.params.add(f"{name}.weight", "weight", w)
    g.params.add(f"{name}.bias", "bias", np.zeros(c_out, dtype=g.dtype))
    g.nodes.append(Node("conv", (src,), name, kernel=k, c_in=c_in, c_out=c_out))
    return len(g.nodes) - 1


def _add_bn(g: ModelGraph, src: int, name: str, c: int) -> int:
    g.params.add(f"{name}.gamma", "bn_gamma", np.ones(c, dtype=g.dtype))
    g.params.add(f"{name}.beta", "bn_beta", np.zeros(c, dtype=g.dtype))
    g.params.add(f"{name}.running_mean", "bn_running_mean", np.zeros(c, dtype=g.dtype))
    g.params.add(f"{name}.running_var", "bn_running_var", np.ones(c, dtype=g.dtype))
    g.nodes.append(Node("bn", (src,), name, c_in=c, c_out=c))
    return len(g.nodes) - 1


def _add_simple(g: ModelGraph, op: str, inputs: tuple[int, ...], c_out: int) -> int:
    for i in inputs:
        if not 0 <= i < len(g.nodes):
            raise ValueError(f"node input {i} out of range")
    g.nodes.append(Node(op, inputs, c_out=c_out))
    return len(g.nodes) - 1


def _conv_bn_relu(g: ModelGraph, src: int, name: str, c_in: int, c_out: int,
                  k: int, rng) -> int:
    node = _add_conv(g, src, f"{name}.conv", c_in, c_out, k, rng)
    node = _add_bn(g, node, f"{name}.bn", c_out)
    return _add_simple(g, "relu", (node,), c_out)


# Branch plans of the inception block: (kernel, out_channels) chains that
# all start from the block input. Terminal widths 64+64+64+32 concatenate
# to 224 channels ahead of the 1x1 projection back to 64.
_INCEPTION_BRANCHES = (
    ("b1", ((1, 32), (3, 32), (3, 48), (3, 64), (3, 64))),
    ("b2", ((1, 32), (3, 48), (3, 64))),
    ("b3", ((1, 32), (3, 64))),
    ("b4", ((1, 32),)),
)
INCEPTION_CONCAT_CHANNELS = 224


def build_inception_layer(g: ModelGraph, src: int, name: str,
                          in_channels: int = 64, rng=None) -> int:
    """Append one residual inception block; returns its output node index.

    Four parallel branches of bias-carrying convs (each conv -> bn -> relu)
    are concatenated and projected by a 1x1 conv with bn but no relu; the
    projection is added back onto the block input, renormalized by one
    more bn, and passed through a final relu.
    """
    if in_channels != 64:
        raise ValueError(f"inception layer requires 64 input channels, got {in_channels}")
    rng = np.random.default_rng(rng)
    branch_outputs = []
    for branch_name, chain in _INCEPTION_BRANCHES:
        node = src
        c_in = in_channels
        for j, (k, c_out) in enumerate(chain):
            node = _add_conv(g, node, f"{name}.{branch_name}.conv{j}", c_in, c_out, k, rng)
            node = _add_bn(g, node, f"{name}.{branch_name}.bn{j}", c_out)
            node = _add_simple(g, "relu", (node,), c_out)
            c_in = c_out
        branch_outputs.append(node)
    cat = _add_simple(g, "concat", tuple(branch_outputs), INCEPTION_CONCAT_CHANNELS)
    proj = _add_conv(g, cat, f"{name}.proj.conv", INCEPTION_CONCAT_CHANNELS, 64, 1, rng)
    proj = _add_bn(g, proj, f"{name}.proj.bn", 64)
    merged = _add_simple(g, "add", (src, proj), 64)
    post = _add_bn(g, merged, f"{name}.post.bn", 64)
    return _add_simple(g, "relu", (post,), 64)


def build_flashlight(cfg: ArchConfig = ArchConfig(), dtype="f32", seed=0,
                     bn_epsilon: float = DEFAULT_BN_EPSILON,
                     bn_momentum: float = DEFAULT_BN_MOMENTUM) -> ModelGraph:
    """Denoiser with an l/m warmup stage and n residual inception layers.

    Topology: conv3x3 1->64 + relu (no bn), l times [conv3x3 64->64, bn,
    relu], m times [conv5x5 64->64, bn, relu], n inception layers, conv3x3
    64->1 (no bn, no activation), then yhat = z - conv_path(z).
    """
    rng = np.random.default_rng(seed)
    g = new_graph(1, dtype, bn_epsilon, bn_momentum)
    node = _add_conv(g, 0, "first.conv", 1, 64, 3, rng)
    node = _add_simple(g, "relu", (node,), 64)
    for i in range(cfg.l):
        node = _conv_bn_relu(g, node, f"warmup3.{i}", 64, 64, 3, rng)
    for i in range(cfg.m):
        node = _conv_bn_relu(g, node, f"warmup5.{i}", 64, 64, 5, rng)
    for i in range(cfg.n):
        node = build_inception_layer(g, node, f"boost.{i}", 64, rng)
    node = _add_conv(g, node, "last.conv", 64, 1, 3, rng)
    _add_simple(g, "sub", (0, node), 1)
    g.arch = {"l": cfg.l, "m": cfg.m, "n": cfg.n}
    return g


def build_dncnn_like(middle_layers: int, dtype="f32", seed=0,
                     bn_epsilon: float = DEFAULT_BN_EPSILON,
                     bn_momentum: float = DEFAULT_BN_MOMENTUM) -> ModelGraph:
    """Plain residual denoiser: a chain of 3x3 convs with no inception stage."""
    if middle_layers < 0:
        raise ValueError("middle_layers must be non-negative")
    rng = np.random.default_rng(seed)
    g = new_graph(1, dtype, bn_epsilon, bn_momentum)
    node = _add_conv(g, 0, "first.conv", 1, 64, 3, rng)
    node = _add_simple(g, "relu", (node,), 64)
    for i in range(middle_layers):
        node = _conv_bn_relu(g, node, f"mid.{i}", 64, 64, 3, rng)
    node = _add_conv(g, node, "last.conv", 64, 1, 3, rng)
    _add_simple(g, "sub", (0, node), 1)
    g.arch = {"dncnn_middle": middle_layers}
    return g


# -- execution ---------------------------------------------------------------

class ForwardCache:
    """Per-node activations and layer caches of a train-mode forward."""

    __slots__ = ("outputs", "bn_caches", "conv_cols", "mode", "n_nodes")

    def __init__(self, outputs, bn_caches, conv_cols, mode, n_nodes):
        self.outputs = outputs
        self.bn_caches = bn_caches
        self.conv_cols = conv_cols
        self.mode = mode
        self.n_nodes = n_nodes


def forward(g: ModelGraph, z: np.ndarray, mode: str = "infer"):
    """Evaluate the graph on a batch; returns (output, cache).

    ``cache`` is a ForwardCache in train mode and None in inference.
    Train mode updates the batchnorm running statistics stored in the
    graph's parameter store.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    z = T.check_nchw(z, "z")
    if z.shape[1] != g.in_channels:
        raise ValueError(f"input has {z.shape[1]} channels, graph expects {g.in_channels}")
    z = np.ascontiguousarray(z, dtype=g.dtype)
    training = mode == "train"
    outputs: list[np.ndarray] = [z]
    bn_caches: dict[int, T.BnCache] = {}
    conv_cols: dict[int, np.ndarray] = {}
    for idx, node in enumerate(g.nodes[1:], start=1):
        if node.op == "conv":
            out, cols = T._forward_impl(outputs[node.inputs[0]], g.conv_params(node),
                                        keep_cols=training)
            if cols is not None:
                conv_cols[idx] = cols
        elif node.op == "bn":
            out, cache = T.batchnorm_forward(outputs[node.inputs[0]], g.bn_params(node), mode)
            if cache is not None:
                bn_caches[idx] = cache
        elif node.op == "relu":
            out = T.relu_forward(outputs[node.inputs[0]])
        elif node.op == "concat":
            out = T.concat_channels([outputs[i] for i in node.inputs])
        elif node.op == "add":
            out = T.elementwise_add(outputs[node.inputs[0]], outputs[node.inputs[1]])
        elif node.op == "sub":
            a, b = outputs[node.inputs[0]], outputs[node.inputs[1]]
            if a.shape != b.shape:
                raise ValueError(f"shape mismatch in sub: {a.shape} vs {b.shape}")
            out = a - b
        else:
            raise ValueError(f"unknown node op {node.op!r}")
        outputs.append(out)
    if training:
        return outputs[-1], ForwardCache(outputs, bn_caches, conv_cols, mode,
                                         len(g.nodes))
    return outputs[-1], None


def backward(g: ModelGraph, cache: ForwardCache, grad_y: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse-mode gradients for every trainable parameter.

    Accumulates cotangents in reverse topological order; the final
    subtraction routes -grad_y into the conv path and +grad_y toward the
    input, whose gradient is discarded. Returns {name: gradient} aligned
    with the store's trainable entries.
    """
    if cache is None or cache.mode != "train":
        raise ValueError("backward requires the cache of a train-mode forward")
    if cache.n_nodes != len(g.nodes) or len(cache.outputs) != len(g.nodes):
        raise ValueError("stale cache: graph and cache disagree")
    grad_y = np.asarray(grad_y, dtype=g.dtype)
    if grad_y.shape != cache.outputs[-1].shape:
        raise ValueError(
            f"grad_y shape {grad_y.shape} does not match output {cache.outputs[-1].shape}")

    node_grads: list[np.ndarray | None] = [None] * len(g.nodes)
    node_grads[-1] = grad_y
    param_grads: dict[str, np.ndarray] = {}

    def send(dst: int, grad: np.ndarray) -> None:
        if node_grads[dst] is None:
            node_grads[dst] = grad
        else:
            node_grads[dst] = node_grads[dst] + grad

    for idx in range(len(g.nodes) - 1, 0, -1):
        grad = node_grads[idx]
        if grad is None:
            continue
        node = g.nodes[idx]
        if node.op == "conv":
            gin, gw, gb = T.conv2d_backward(grad, cache.outputs[node.inputs[0]],
                                            g.conv_params(node),
                                            cols=cache.conv_cols.get(idx))
            param_grads[f"{node.name}.weight"] = gw
            param_grads[f"{node.name}.bias"] = gb
            send(node.inputs[0], gin)
        elif node.op == "bn":
            gin, gg, gb = T.batchnorm_backward(grad, cache.bn_caches.get(idx))
            param_grads[f"{node.name}.gamma"] = gg
            param_grads[f"{node.name}.beta"] = gb
            send(node.inputs[0], gin)
        elif node.op == "relu":
            send(node.inputs[0], T.relu_backward(grad, cache.outputs[node.inputs[0]]))
        elif node.op == "concat":
            splits = [cache.outputs[i].shape[1] for i in node.inputs]
            for src, piece in zip(node.inputs, T.concat_backward(grad, splits)):
                send(src, piece)
        elif node.op == "add":
            send(node.inputs[0], grad)
            send(node.inputs[1], grad)
        elif node.op == "sub":
            send(node.inputs[0], grad)
            send(node.inputs[1], -grad)

    grads = {}
    for e in g.params.trainable_entries():
        got = param_grads.get(e.name)
        grads[e.name] = got if got is not None else np.zeros_like(e.array)
    return grads


def count_params(g: ModelGraph) -> tuple[int, int]:
    """(trainable, total) parameter counts; running stats only count as total."""
    return g.params.trainable_count(), g.params.total_count()


def receptive_field(g: ModelGraph) -> int:
    """Input extent influencing one output pixel, via the widest kernel path."""
    rf = [0] * len(g.nodes)
    rf[0] = 1
    for idx, node in enumerate(g.nodes[1:], start=1):
        if node.op == "conv":
            rf[idx] = rf[node.inputs[0]] + node.kernel - 1
        else:
            rf[idx] = max(rf[i] for i in node.inputs)
    return rf[-1]


def enumerate_architectures(l_set, m_set, n_set, dtype="f32"):
    """All (l, m, n, trainable_params) combinations, ascending by count."""
    l_set, m_set, n_set = list(l_set), list(m_set), list(n_set)
    if not l_set or not m_set or not n_set:
        raise ValueError("architecture sets must be non-empty")
    rows = []
    for l in l_set:
        for m in m_set:
            for n in n_set:
                g = build_flashlight(ArchConfig(l, m, n), dtype=dtype, seed=0)
                rows.append((l, m, n, count_params(g)[0]))
    rows.sort(key=lambda r: r[3])
    return rows


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(g: ModelGraph, path) -> None:
    """Write magic/version, a JSON manifest, and raw little-endian payloads."""
    if g.arch is None:
        raise ValueError("only graphs built with an architecture config can be saved")
    byte_order_dtype = "<f4" if dtype_name(g.dtype) == "f32" else "<f8"
    descriptors = []
    payloads = []
    offset = 0
    for e in g.params.entries():
        raw = np.ascontiguousarray(e.array, dtype=byte_order_dtype).tobytes()
        descriptors.append({
            "name": e.name,
            "kind": e.kind,
            "shape": list(e.array.shape),
            "byte_offset": offset,
            "byte_length": len(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    manifest = {
        "arch": g.arch,
        "bn_epsilon": g.bn_epsilon,
        "bn_momentum": g.bn_momentum,
        "dtype": dtype_name(g.dtype),
        "sigma": g.sigma,
        "tensors": descriptors,
    }
    mjson = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(mjson)))
        fh.write(mjson)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path) -> ModelGraph:
    """Rebuild the saved graph bit-exactly; raises a distinct CheckpointError
    subclass for bad magic, version mismatch, truncation, and manifest
    disagreements."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise TruncatedPayloadError(f"file is only {len(blob)} bytes, header needs 12")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {CHECKPOINT_VERSION}")
    (mlen,) = struct.unpack_from("<I", blob, 8)
    if len(blob) < 12 + mlen:
        raise TruncatedPayloadError("manifest extends past end of file")
    try:
        manifest = json.loads(blob[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestMismatchError(f"manifest is not valid JSON: {exc}") from None

    for key in ("arch", "bn_epsilon", "bn_momentum", "dtype", "tensors"):
        if key not in manifest:
            raise ManifestMismatchError(f"manifest lacks required key {key!r}")
    arch = manifest["arch"]
    if "dncnn_middle" in arch:
        g = build_dncnn_like(int(arch["dncnn_middle"]), dtype=manifest["dtype"], seed=0,
                             bn_epsilon=manifest["bn_epsilon"],
                             bn_momentum=manifest["bn_momentum"])
    elif all(k in arch for k in ("l", "m", "n")):
        g = build_flashlight(ArchConfig(int(arch["l"]), int(arch["m"]), int(arch["n"])),
                             dtype=manifest["dtype"], seed=0,
                             bn_epsilon=manifest["bn_epsilon"],
                             bn_momentum=manifest["bn_momentum"])
    else:
        raise ManifestMismatchError(f"unrecognized architecture description {arch!r}")
    g.sigma = manifest.get("sigma")

    descriptors = manifest["tensors"]
    entries = g.params.entries()
    if len(descriptors) != len(entries):
        raise ManifestMismatchError(
            f"manifest lists {len(descriptors)} tensors, architecture has {len(entries)}")
    byte_order_dtype = "<f4" if manifest["dtype"] == "f32" else "<f8"
    itemsize = 4 if manifest["dtype"] == "f32" else 8
    payload = blob[12 + mlen:]
    for desc, entry in zip(descriptors, entries):
        if desc["name"] != entry.name or desc["kind"] != entry.kind:
            raise ManifestMismatchError(
                f"manifest entry {desc['name']!r}/{desc['kind']!r} does not match "
                f"expected {entry.name!r}/{entry.kind!r}")
        shape = tuple(desc["shape"])
        if shape != entry.array.shape:
            raise ManifestMismatchError(
                f"{entry.name!r} has shape {shape} in manifest, expected {entry.array.shape}")
        expected_len = int(np.prod(shape, dtype=np.int64)) * itemsize if shape else itemsize
        if desc["byte_length"] != expected_len:
            raise ManifestMismatchError(
                f"{entry.name!r} declares {desc['byte_length']} bytes, shape needs {expected_len}")
        start, end = desc["byte_offset"], desc["byte_offset"] + desc["byte_length"]
        if end > len(payload):
            raise TruncatedPayloadError(
                f"payload ends at byte {len(payload)} but {entry.name!r} needs bytes "
                f"{start}..{end}")
        arr = np.frombuffer(payload[start:end], dtype=byte_order_dtype).reshape(shape)
        g.params[entry.name] = np.ascontiguousarray(arr, dtype=g.dtype)
    return g
