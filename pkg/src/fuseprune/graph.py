"""Computation-graph IR: typed nodes, validation, execution, file format.

A Graph is a DAG of named nodes over the kinds
{input, output, conv, bn, relu, add, concat, maxpool, gavgpool, fc}.
Exactly one input and one output node exist. Conv nodes carry a ConvSpec
in attrs["spec"] plus "weight" (and optional "bias") parameter tensors;
bn nodes carry attrs["eps"], a per-channel attrs["frozen"] tuple of 0/1
flags, and the four per-channel parameter tensors stored as (1, c, 1, 1).

Execution is a pure function of the graph and the input tensor: repeated
calls give bit-identical results, and any valid topological order computes
the same values. The batch dimension of the input is free; the declared
input_shape fixes (c, h, w) and a nominal batch size used for validation.

Model files (.fpm) are a single container: the magic bytes "FPM1", a
little-endian u32 manifest length, a UTF-8 JSON manifest (nodes, kinds,
attributes, tags, and a tensor table of name/shape/dtype/offset/length),
then one raw blob of little-endian IEEE-754 values concatenated in
manifest order. The manifest carries a format version and a SHA-256
checksum of the blob.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DTYPE_FROM_NAME,
    DTYPE_NAMES,
    BnParams,
    ConvSpec,
    Tensor,
    batch_norm_inference,
    concat_channels,
    conv2d,
    elementwise_add,
    fully_connected,
    global_avg_pool,
    max_pool,
    relu,
)

KINDS = ("input", "output", "conv", "bn", "relu", "add", "concat", "maxpool", "gavgpool", "fc")

FORMAT_MAGIC = b"FPM1"
FORMAT_VERSION = 1


class GraphError(Exception):
    """Base class for graph construction, validation and format errors."""


class CycleDetected(GraphError):
    pass


class ShapeMismatch(GraphError):
    pass


class DanglingInput(GraphError):
    pass


class UnreachableNode(GraphError):
    pass


class ModelFormatError(GraphError):
    """Malformed model file: bad manifest, blob, checksum or version."""


@dataclass
class Node:
    id: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    params: dict[str, Tensor] = field(default_factory=dict)
    tags: list[str] = field(default_factory=list)

    def copy(self) -> "Node":
        # tensors are immutable and shared; containers are copied one level deep
        return Node(
            id=self.id,
            kind=self.kind,
            inputs=list(self.inputs),
            attrs=dict(self.attrs),
            params=dict(self.params),
            tags=list(self.tags),
        )


@dataclass
class Graph:
    nodes: dict[str, Node]
    input_id: str
    output_id: str
    input_shape: tuple[int, int, int, int]

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise GraphError(f"no node named {node_id!r}") from None

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for src in node.inputs:
                if src in out:
                    out[src].append(node.id)
        return out

    def copy(self) -> "Graph":
        return Graph(
            nodes={nid: n.copy() for nid, n in self.nodes.items()},
            input_id=self.input_id,
            output_id=self.output_id,
            input_shape=tuple(self.input_shape),
        )

    def topo_order(self) -> list[str]:
        return _topo_order(self)


def _topo_order(g: Graph) -> list[str]:
    """Deterministic Kahn topological sort (insertion order breaks ties)."""
    indeg = {nid: 0 for nid in g.nodes}
    for node in g.nodes.values():
        for src in node.inputs:
            if src not in g.nodes:
                raise DanglingInput(f"node {node.id!r} reads undefined node {src!r}")
            indeg[node.id] += 1
    consumers = g.consumers()
    ids = list(g.nodes)
    pos = {nid: i for i, nid in enumerate(ids)}
    ready = [pos[nid] for nid in ids if indeg[nid] == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        nid = ids[heapq.heappop(ready)]
        order.append(nid)
        for cons in consumers[nid]:
            indeg[cons] -= 1
            if indeg[cons] == 0:
                heapq.heappush(ready, pos[cons])
    if len(order) != len(g.nodes):
        done = set(order)
        rest = [nid for nid in g.nodes if nid not in done]
        raise CycleDetected(f"cycle through nodes {rest}")
    return order


def _bn_params(node: Node) -> BnParams:
    return BnParams(
        gamma=node.params["gamma"].data.reshape(-1),
        beta=node.params["beta"].data.reshape(-1),
        mean=node.params["mean"].data.reshape(-1),
        var=node.params["var"].data.reshape(-1),
        eps=float(node.attrs["eps"]),
    )


def _conv_bias(node: Node):
    if node.attrs["spec"].has_bias:
        return node.params["bias"].data.reshape(-1)
    return None


_ARITY = {"input": 0, "output": 1, "conv": 1, "bn": 1, "relu": 1, "add": 2,
          "maxpool": 1, "gavgpool": 1, "fc": 1}


def validate(g: Graph) -> dict[str, tuple[int, int, int, int]]:
    """Check structure and infer every node's output shape.

    Returns a map node id -> (n, c, h, w). Raises CycleDetected,
    DanglingInput, UnreachableNode or ShapeMismatch (naming the node).
    """
    if not g.nodes:
        raise GraphError("graph has no nodes")
    for nid, node in g.nodes.items():
        if nid != node.id:
            raise GraphError(f"node key {nid!r} does not match node id {node.id!r}")
        if node.kind not in KINDS:
            raise GraphError(f"node {nid!r} has unknown kind {node.kind!r}")
    if g.input_id not in g.nodes or g.nodes[g.input_id].kind != "input":
        raise GraphError(f"input_id {g.input_id!r} is not an input node")
    if g.output_id not in g.nodes or g.nodes[g.output_id].kind != "output":
        raise GraphError(f"output_id {g.output_id!r} is not an output node")
    inputs = [n for n in g.nodes.values() if n.kind == "input"]
    outputs = [n for n in g.nodes.values() if n.kind == "output"]
    if len(inputs) != 1 or len(outputs) != 1:
        raise GraphError("graph must have exactly one input and one output node")
    if len(g.input_shape) != 4 or any(d < 1 for d in g.input_shape):
        raise GraphError(f"bad input_shape {g.input_shape}")

    for node in g.nodes.values():
        want = _ARITY.get(node.kind)
        if node.kind == "concat":
            if len(node.inputs) < 2:
                raise GraphError(f"concat node {node.id!r} needs >= 2 inputs")
        elif len(node.inputs) != want:
            raise GraphError(
                f"node {node.id!r} kind {node.kind} takes {want} inputs, has {len(node.inputs)}"
            )

    order = _topo_order(g)  # raises on cycles and dangling inputs

    # reachability in both directions
    reachable = {g.input_id}
    for nid in order:
        node = g.nodes[nid]
        if node.inputs and any(src in reachable for src in node.inputs):
            reachable.add(nid)
    reaching = {g.output_id}
    for nid in reversed(order):
        node = g.nodes[nid]
        if nid in reaching:
            reaching.update(node.inputs)
    for nid in g.nodes:
        if nid not in reachable:
            raise UnreachableNode(f"node {nid!r} is not reachable from the input")
        if nid not in reaching:
            raise UnreachableNode(f"node {nid!r} does not reach the output")

    shapes: dict[str, tuple[int, int, int, int]] = {}
    for nid in order:
        node = g.nodes[nid]
        try:
            shapes[nid] = _infer_shape(g, node, shapes)
        except ShapeMismatch:
            raise
        except (GraphError, ValueError) as exc:
            raise ShapeMismatch(f"node {nid!r}: {exc}") from exc
    return shapes


def _infer_shape(g: Graph, node: Node, shapes) -> tuple[int, int, int, int]:
    ins = [shapes[src] for src in node.inputs]
    kind = node.kind
    if kind == "input":
        return tuple(g.input_shape)
    if kind in ("output", "relu"):
        return ins[0]
    if kind == "conv":
        spec: ConvSpec = node.attrs["spec"]
        n, c, h, w = ins[0]
        if c != spec.c:
            raise ShapeMismatch(f"node {node.id!r}: conv expects {spec.c} channels, got {c}")
        weight = node.params.get("weight")
        if weight is None or weight.shape != spec.weight_shape:
            raise ShapeMismatch(
                f"node {node.id!r}: weight shape "
                f"{None if weight is None else weight.shape} != {spec.weight_shape}"
            )
        if spec.has_bias:
            bias = node.params.get("bias")
            if bias is None or bias.shape != (1, spec.k, 1, 1):
                raise ShapeMismatch(f"node {node.id!r}: bias must be (1, {spec.k}, 1, 1)")
        ho, wo = spec.out_hw(h, w)
        return (n, spec.k, ho, wo)
    if kind == "bn":
        n, c, h, w = ins[0]
        for name in ("gamma", "beta", "mean", "var"):
            p = node.params.get(name)
            if p is None or p.shape != (1, c, 1, 1):
                raise ShapeMismatch(
                    f"node {node.id!r}: bn param {name} must be (1, {c}, 1, 1)"
                )
        frozen = node.attrs.get("frozen", ())
        if frozen and len(frozen) != c:
            raise ShapeMismatch(f"node {node.id!r}: frozen flags cover {len(frozen)} of {c} channels")
        if not float(node.attrs.get("eps", 0.0)) > 0:
            raise ShapeMismatch(f"node {node.id!r}: bn eps must be > 0")
        return ins[0]
    if kind == "add":
        if ins[0] != ins[1]:
            raise ShapeMismatch(f"node {node.id!r}: add operands {ins[0]} vs {ins[1]}")
        return ins[0]
    if kind == "concat":
        n, _, h, w = ins[0]
        for shp in ins[1:]:
            if (shp[0], shp[2], shp[3]) != (n, h, w):
                raise ShapeMismatch(f"node {node.id!r}: concat operands {ins}")
        return (n, sum(shp[1] for shp in ins), h, w)
    if kind == "maxpool":
        n, c, h, w = ins[0]
        r, s = node.attrs["window"]
        sh, sw = node.attrs["stride"]
        ph, pw = node.attrs["pad"]
        ho = (h + 2 * ph - r) // sh + 1
        wo = (w + 2 * pw - s) // sw + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"node {node.id!r}: pool output collapses to {ho}x{wo}")
        return (n, c, ho, wo)
    if kind == "gavgpool":
        n, c, _, _ = ins[0]
        return (n, c, 1, 1)
    if kind == "fc":
        n, c, h, w = ins[0]
        weight = node.params.get("weight")
        fin = c * h * w
        if weight is None or weight.shape[1] != fin or weight.shape[2:] != (1, 1):
            raise ShapeMismatch(
                f"node {node.id!r}: fc weight "
                f"{None if weight is None else weight.shape} incompatible with input {ins[0]}"
            )
        return (n, weight.shape[0], 1, 1)
    raise GraphError(f"node {node.id!r}: unhandled kind {kind}")


def _eval_node(node: Node, args: list[Tensor]) -> Tensor:
    kind = node.kind
    if kind in ("input", "output"):
        return args[0] if args else None
    if kind == "conv":
        return conv2d(args[0], node.params["weight"], _conv_bias(node), node.attrs["spec"])
    if kind == "bn":
        return batch_norm_inference(args[0], _bn_params(node))
    if kind == "relu":
        return relu(args[0])
    if kind == "add":
        return elementwise_add(args[0], args[1])
    if kind == "concat":
        return concat_channels(args)
    if kind == "maxpool":
        return max_pool(args[0], node.attrs["window"], node.attrs["stride"], node.attrs["pad"])
    if kind == "gavgpool":
        return global_avg_pool(args[0])
    if kind == "fc":
        bias = node.params["bias"].data.reshape(-1) if "bias" in node.params else None
        return fully_connected(args[0], node.params["weight"], bias)
    raise GraphError(f"cannot execute kind {kind}")


def execute(g: Graph, x: Tensor, timings: dict[str, float] | None = None) -> Tensor:
    """Run the graph on x (inference mode; bn uses stored statistics).

    The batch dimension of x is free; channels and spatial dims must match
    the declared input_shape. When `timings` is given, the wall time of each
    node's kernel is added to it keyed by node id.
    """
    validate(g)
    if tuple(x.shape[1:]) != tuple(g.input_shape[1:]):
        raise ShapeMismatch(
            f"input (c, h, w) {x.shape[1:]} does not match declared {g.input_shape[1:]}"
        )
    values: dict[str, Tensor] = {}
    for nid in _topo_order(g):
        node = g.nodes[nid]
        if node.kind == "input":
            values[nid] = x
            continue
        args = [values[src] for src in node.inputs]
        if timings is None:
            values[nid] = _eval_node(node, args)
        else:
            t0 = time.perf_counter()
            values[nid] = _eval_node(node, args)
            timings[nid] = timings.get(nid, 0.0) + (time.perf_counter() - t0)
    return values[g.output_id]


# --- serialization ---------------------------------------------------------

_PARAM_ORDER = {
    "conv": ("weight", "bias"),
    "bn": ("gamma", "beta", "mean", "var"),
    "fc": ("weight", "bias"),
}


def _attrs_to_json(node: Node) -> dict:
    if node.kind == "conv":
        spec: ConvSpec = node.attrs["spec"]
        return {
            "k": spec.k, "c": spec.c, "r": spec.r, "s": spec.s,
            "stride": list(spec.stride), "pad": list(spec.pad),
            "has_bias": bool(spec.has_bias),
        }
    if node.kind == "bn":
        return {"eps": float(node.attrs["eps"]), "frozen": list(node.attrs.get("frozen", ()))}
    if node.kind == "maxpool":
        return {
            "window": list(node.attrs["window"]),
            "stride": list(node.attrs["stride"]),
            "pad": list(node.attrs["pad"]),
        }
    return {}


def _attrs_from_json(kind: str, raw: dict) -> dict:
    if kind == "conv":
        return {
            "spec": ConvSpec(
                k=int(raw["k"]), c=int(raw["c"]), r=int(raw["r"]), s=int(raw["s"]),
                stride=tuple(raw["stride"]), pad=tuple(raw["pad"]),
                has_bias=bool(raw["has_bias"]),
            )
        }
    if kind == "bn":
        return {"eps": float(raw["eps"]), "frozen": tuple(int(f) for f in raw.get("frozen", ()))}
    if kind == "maxpool":
        return {
            "window": tuple(raw["window"]),
            "stride": tuple(raw["stride"]),
            "pad": tuple(raw["pad"]),
        }
    return {}


def save(g: Graph, path) -> None:
    """Write the graph to a .fpm container (see module docstring)."""
    validate(g)
    order = _topo_order(g)
    tensor_entries = []
    chunks = []
    offset = 0
    for nid in order:
        node = g.nodes[nid]
        names = _PARAM_ORDER.get(node.kind, ())
        for pname in names:
            if pname not in node.params:
                continue
            t = node.params[pname]
            raw = t.data.astype("<f4" if t.dtype == np.float32 else "<f8").tobytes()
            tensor_entries.append({
                "name": f"{nid}/{pname}",
                "shape": list(t.shape),
                "dtype": DTYPE_NAMES[t.dtype],
                "offset": offset,
                "length": len(raw),
            })
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": "fpm",
        "version": FORMAT_VERSION,
        "input_shape": list(g.input_shape),
        "input_id": g.input_id,
        "output_id": g.output_id,
        "nodes": [
            {
                "id": nid,
                "kind": g.nodes[nid].kind,
                "inputs": list(g.nodes[nid].inputs),
                "attrs": _attrs_to_json(g.nodes[nid]),
                "params": {
                    p: f"{nid}/{p}"
                    for p in _PARAM_ORDER.get(g.nodes[nid].kind, ())
                    if p in g.nodes[nid].params
                },
                "tags": list(g.nodes[nid].tags),
            }
            for nid in order
        ],
        "tensors": tensor_entries,
        "blob": {"length": len(blob), "sha256": hashlib.sha256(blob).hexdigest()},
    }
    payload = json.dumps(manifest, ensure_ascii=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(len(payload).to_bytes(4, "little"))
        fh.write(payload)
        fh.write(blob)


def load(path) -> Graph:
    """Read a .fpm container, verify it, and return a validated Graph."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != FORMAT_MAGIC:
        raise ModelFormatError(f"{path}: not a model container (bad magic)")
    man_len = int.from_bytes(data[4:8], "little")
    if len(data) < 8 + man_len:
        raise ModelFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[8 : 8 + man_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: malformed manifest: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != "fpm":
        raise ModelFormatError(f"{path}: malformed manifest (not an fpm manifest)")
    if manifest.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {manifest.get('version')!r}")
    blob = data[8 + man_len :]
    blob_meta = manifest.get("blob", {})
    if blob_meta.get("length") != len(blob):
        raise ModelFormatError(
            f"{path}: blob length {len(blob)} != declared {blob_meta.get('length')}"
        )
    if hashlib.sha256(blob).hexdigest() != blob_meta.get("sha256"):
        raise ModelFormatError(f"{path}: blob checksum failure")

    tensors: dict[str, Tensor] = {}
    try:
        for entry in manifest["tensors"]:
            name = entry["name"]
            shape = tuple(int(d) for d in entry["shape"])
            dtype = DTYPE_FROM_NAME.get(entry["dtype"])
            if dtype is None:
                raise ModelFormatError(f"{path}: tensor {name!r} has unknown dtype {entry['dtype']!r}")
            start, length = int(entry["offset"]), int(entry["length"])
            if start < 0 or start + length > len(blob):
                raise ModelFormatError(f"{path}: tensor {name!r} lies outside the blob")
            count = int(np.prod(shape))
            if count * dtype.itemsize != length:
                raise ModelFormatError(f"{path}: tensor {name!r} length/shape mismatch")
            le = "<f4" if dtype == np.float32 else "<f8"
            arr = np.frombuffer(blob[start : start + length], dtype=le).astype(dtype).reshape(shape)
            tensors[name] = Tensor(arr)
        nodes: dict[str, Node] = {}
        for raw in manifest["nodes"]:
            params = {}
            for pname, tname in raw.get("params", {}).items():
                if tname not in tensors:
                    raise ModelFormatError(
                        f"{path}: node {raw['id']!r} references absent tensor {tname!r}"
                    )
                params[pname] = tensors[tname]
            nodes[raw["id"]] = Node(
                id=raw["id"],
                kind=raw["kind"],
                inputs=list(raw.get("inputs", [])),
                attrs=_attrs_from_json(raw["kind"], raw.get("attrs", {})),
                params=params,
                tags=list(raw.get("tags", [])),
            )
        g = Graph(
            nodes=nodes,
            input_id=manifest["input_id"],
            output_id=manifest["output_id"],
            input_shape=tuple(int(d) for d in manifest["input_shape"]),
        )
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: malformed manifest: {exc}") from exc
    validate(g)
    return g
