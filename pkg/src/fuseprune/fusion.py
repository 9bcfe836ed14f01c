"""Equivalence-preserving fusion of residual blocks into plain conv chains.

The rewrites eliminate the element-wise add (and, for projection blocks,
the 1x1 shortcut conv and its bn) of a residual block by enlarging the two
main-path convolutions:

* conv1 gains C "passthrough" filters: identity weights that copy the
  block input into C extra output channels. They inherit conv1's stride
  and padding, so for a stride-2 entry block the passthrough is exactly
  the 1x1/stride-2 subsample the shortcut would have seen.
* bn1, when present, is extended over the extra channels with exact
  identity parameters (gamma=1, beta=0, mean=0, var=1-eps, so that
  omega = 1 and lambda = 0 in the working precision) and those channels
  are flagged frozen so later training never changes them.
* The relu between the convs forwards the passthrough unchanged; this is
  the one step that needs the block input to be non-negative, so fusion
  requires the input to be produced by a relu (or an explicit override).
* conv2 gains C input channels per filter. For an identity shortcut these
  read the passthrough through identity weights; for a projection
  shortcut the 1x1 weights (with their bn folded in first) are zero-padded
  to conv2's kernel size and used instead. When conv2 is followed by bn2,
  the added weights are divided per filter by bn2's omega so the shortcut
  contribution passes through bn2 unchanged: omega*(main + short/omega) =
  omega*main + short.

A fused conv keeps a record (m original filters, n current filters, the
provenance of every filter and input channel) so pruning can later restore
the original widths exactly.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .graph import Graph, Node, validate
from .tensor import BnParams, ConvSpec, Tensor

OMEGA_MIN = 1e-3

PROVENANCE_ORIGINAL = "original"
PROVENANCE_IDENTITY = "xconv-identity"
PROVENANCE_PROJECTION = "pconv-projection"

_TAG_RE = re.compile(r"stage(\d+)\.block(\d+)")


class FusionError(Exception):
    """Base class for fusion failures."""


class NonOddKernel(FusionError):
    pass


class NearZeroOmega(FusionError):
    pass


class PatternMismatch(FusionError):
    pass


class StrideMismatch(FusionError):
    pass


class BnWithoutPrecedingConv(FusionError):
    pass


@dataclass(frozen=True)
class FusionOption:
    """Which blocks to fuse: the first `x` of `n` stages, or explicit
    per-stage block counts (fuse the first s_i blocks of stage i)."""

    total: int
    stages: int | None = None
    per_stage: tuple[int, ...] | None = None

    def __post_init__(self):
        if (self.stages is None) == (self.per_stage is None):
            raise ValueError("FusionOption needs exactly one of stages / per_stage")
        if self.total < 1:
            raise ValueError("stage count must be >= 1")
        if self.stages is not None and not 0 <= self.stages <= self.total:
            raise ValueError(f"stage prefix {self.stages} outside 0..{self.total}")
        if self.per_stage is not None:
            if len(self.per_stage) != self.total:
                raise ValueError("per-stage counts must cover every stage")
            if any(s < 0 for s in self.per_stage):
                raise ValueError("per-stage counts must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "FusionOption":
        text = text.strip()
        m = re.fullmatch(r"(\d+)\s*/\s*(\d+)", text)
        if m:
            return cls(total=int(m.group(2)), stages=int(m.group(1)))
        m = re.fullmatch(r"\(?\s*(\d+(?:\s*,\s*\d+)*)\s*\)?", text)
        if m:
            counts = tuple(int(p) for p in m.group(1).split(","))
            return cls(total=len(counts), per_stage=counts)
        raise ValueError(f"cannot parse fusion option {text!r}; want 'x/n' or '(s1,...,sn)'")

    def __str__(self) -> str:
        if self.stages is not None:
            return f"{self.stages}/{self.total}"
        return "(" + ",".join(str(s) for s in self.per_stage) + ")"


@dataclass
class ConvFusion:
    """Record of one conv touched by fusion.

    m is the filter count before fusion, n after. provenance has one label
    per filter; channel_provenance one label per input channel. removed
    lists the node ids the block rewrite deleted.
    """

    m: int
    n: int
    provenance: list[str]
    channel_provenance: list[str]
    block: str | None
    removed: list[str] = field(default_factory=list)


@dataclass
class FusionReport:
    convs: dict[str, ConvFusion] = field(default_factory=dict)
    skipped: list[dict] = field(default_factory=list)
    option: str | None = None

    def removed_nodes(self) -> list[str]:
        out = []
        for cf in self.convs.values():
            out.extend(cf.removed)
        return out

    def to_json_obj(self) -> dict:
        return {
            "option": self.option,
            "skipped": list(self.skipped),
            "convs": {
                nid: {
                    "m": cf.m,
                    "n": cf.n,
                    "provenance": list(cf.provenance),
                    "channel_provenance": list(cf.channel_provenance),
                    "block": cf.block,
                    "removed": list(cf.removed),
                }
                for nid, cf in self.convs.items()
            },
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "FusionReport":
        return cls(
            convs={
                nid: ConvFusion(
                    m=int(raw["m"]), n=int(raw["n"]),
                    provenance=list(raw["provenance"]),
                    channel_provenance=list(raw.get("channel_provenance", [])),
                    block=raw.get("block"), removed=list(raw.get("removed", [])),
                )
                for nid, raw in obj.get("convs", {}).items()
            },
            skipped=list(obj.get("skipped", [])),
            option=obj.get("option"),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_obj(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FusionReport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_obj(json.load(fh))


@dataclass
class BlockMatch:
    """A matched residual block; ids of every participating node."""

    kind: str  # "basic" | "projection"
    input_id: str
    conv1: str
    bn1: str | None
    relu1: str
    conv2: str
    bn2: str | None
    shortcut_conv: str | None
    shortcut_bn: str | None
    add: str
    relu_out: str
    tag: str | None

    @property
    def with_bn(self) -> bool:
        return self.bn1 is not None and self.bn2 is not None

    def internal_ids(self) -> set[str]:
        ids = {self.conv1, self.relu1, self.conv2, self.add}
        for nid in (self.bn1, self.bn2, self.shortcut_conv, self.shortcut_bn):
            if nid is not None:
                ids.add(nid)
        return ids


def make_identity_weights(channels: int, r: int, s: int, dtype=np.float32) -> Tensor:
    """(channels, channels, r, s) weights whose conv is the identity map.

    Filter k is 1 at (k, center) and 0 elsewhere; with stride 1 and padding
    ((r-1)/2, (s-1)/2) the convolution reproduces its input bit for bit.
    Kernel dims must be odd so the center tap exists.
    """
    if channels < 1:
        raise FusionError("identity weights need at least one channel")
    if r % 2 == 0 or s % 2 == 0:
        raise NonOddKernel(f"identity weights need odd kernel dims, got {r}x{s}")
    w = np.zeros((channels, channels, r, s), dtype=dtype)
    w[np.arange(channels), np.arange(channels), (r - 1) // 2, (s - 1) // 2] = 1
    return Tensor(w)


def pad_conv_weights(w: Tensor, r: int, s: int) -> Tensor:
    """Zero-pad (K, C, r0, s0) weights to (K, C, r, s), original at the center.

    Requires r >= r0, s >= s0 with matching parity so the center is exact.
    With padding enlarged by the same amount, the padded conv computes the
    same function as the original (the index convention keeps output sizes
    equal: floor((h + 2(p+d) - (k+2d))/stride) = floor((h + 2p - k)/stride)).
    """
    k, c, r0, s0 = w.shape
    if r < r0 or s < s0:
        raise NonOddKernel(f"cannot pad {r0}x{s0} weights down to {r}x{s}")
    if (r - r0) % 2 != 0 or (s - s0) % 2 != 0:
        raise NonOddKernel(f"padding {r0}x{s0} to {r}x{s} has no exact center")
    out = np.zeros((k, c, r, s), dtype=w.dtype)
    ro, so = (r - r0) // 2, (s - s0) // 2
    out[:, :, ro : ro + r0, so : so + s0] = w.data
    return Tensor(out)


def adjust_identity_for_bn(w: Tensor, omega: np.ndarray, omega_min: float = OMEGA_MIN) -> Tensor:
    """Scale filter k by 1/omega_k so a following bn restores the raw values.

    bn multiplies channel k by omega_k, so pre-dividing the passthrough
    weights makes omega_k * (x / omega_k) return x up to rounding. Refuses
    ill-conditioned scaling when any |omega_k| < omega_min.
    """
    omega = np.asarray(omega).reshape(-1)
    if omega.shape[0] != w.shape[0]:
        raise FusionError(f"omega covers {omega.shape[0]} filters, weights have {w.shape[0]}")
    bad = np.abs(omega) < omega_min
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise NearZeroOmega(
            f"|omega[{idx}]| = {abs(float(omega[idx])):.3e} < {omega_min:g}; "
            "inverse-bn adjustment would be ill-conditioned"
        )
    return Tensor(w.data / omega.astype(w.dtype)[:, None, None, None])


def _sole_consumer(consumers, nid):
    outs = consumers[nid]
    return outs[0] if len(outs) == 1 else None


def _block_tag(node: Node) -> str | None:
    for t in node.tags:
        if _TAG_RE.fullmatch(t):
            return t
    return None


def _match_add(g: Graph, consumers, add: Node) -> BlockMatch | None:
    relu_out = _sole_consumer(consumers, add.id)
    if relu_out is None or g.nodes[relu_out].kind != "relu":
        return None
    a, b = add.inputs
    for main_tail, other in ((a, b), (b, a)):
        u = g.nodes[main_tail]
        if u.kind == "bn":
            bn2 = u.id
            conv2 = g.nodes[u.inputs[0]]
        elif u.kind == "conv":
            bn2 = None
            conv2 = u
        else:
            continue
        if conv2.kind != "conv":
            continue
        r1 = g.nodes[conv2.inputs[0]]
        if r1.kind != "relu":
            continue
        v = g.nodes[r1.inputs[0]]
        if v.kind == "bn":
            bn1 = v.id
            conv1 = g.nodes[v.inputs[0]]
        elif v.kind == "conv":
            bn1 = None
            conv1 = v
        else:
            continue
        if conv1.kind != "conv":
            continue
        if (bn1 is None) != (bn2 is None):
            continue
        x_id = conv1.inputs[0]
        # every internal node must feed only the next one in the block
        main_chain = [conv1.id, bn1, r1.id, conv2.id, bn2, add.id]
        chain = [nid for nid in main_chain if nid is not None]
        if any(_sole_consumer(consumers, chain[i]) != chain[i + 1] for i in range(len(chain) - 1)):
            continue
        common = dict(input_id=x_id, conv1=conv1.id, bn1=bn1, relu1=r1.id,
                      conv2=conv2.id, bn2=bn2, add=add.id, relu_out=relu_out,
                      tag=_block_tag(conv1))
        if other == x_id:
            return BlockMatch(kind="basic", shortcut_conv=None, shortcut_bn=None, **common)
        w = g.nodes[other]
        if w.kind == "bn":
            sbn = w.id
            sc = g.nodes[w.inputs[0]]
        elif w.kind == "conv":
            sbn = None
            sc = w
        else:
            continue
        if sc.kind != "conv" or sc.inputs[0] != x_id:
            continue
        short_chain = [nid for nid in (sc.id, sbn, add.id) if nid is not None]
        if any(_sole_consumer(consumers, short_chain[i]) != short_chain[i + 1]
               for i in range(len(short_chain) - 1)):
            continue
        return BlockMatch(kind="projection", shortcut_conv=sc.id, shortcut_bn=sbn, **common)
    return None


def find_residual_blocks(g: Graph) -> list[BlockMatch]:
    """Match every residual block: x -> conv[-bn]-relu-conv[-bn] -> add(x or
    1x1-projection(x)) -> relu. Matches are disjoint and in topological order."""
    validate(g)
    consumers = g.consumers()
    matches: list[BlockMatch] = []
    used: set[str] = set()
    for nid in g.topo_order():
        node = g.nodes[nid]
        if node.kind != "add":
            continue
        match = _match_add(g, consumers, node)
        if match is None:
            continue
        if match.internal_ids() & used:
            continue
        used |= match.internal_ids()
        matches.append(match)
    return matches


def _bn_of(node: Node) -> BnParams:
    return BnParams(
        gamma=node.params["gamma"].data, beta=node.params["beta"].data,
        mean=node.params["mean"].data, var=node.params["var"].data,
        eps=float(node.attrs["eps"]),
    )


def _centered(spec: ConvSpec) -> bool:
    return spec.pad == ((spec.r - 1) // 2, (spec.s - 1) // 2)


def _extend_bn_identity(bn: Node, extra: int) -> None:
    """Append `extra` exact-identity channels to a bn node and freeze them."""
    dtype = bn.params["gamma"].dtype
    eps = dtype.type(bn.attrs["eps"])
    one = np.ones((1, extra, 1, 1), dtype)
    zero = np.zeros((1, extra, 1, 1), dtype)
    var_aux = np.full((1, extra, 1, 1), dtype.type(1) - eps, dtype)
    for name, ext in (("gamma", one), ("beta", zero), ("mean", zero), ("var", var_aux)):
        bn.params[name] = Tensor(np.concatenate([bn.params[name].data, ext], axis=1))
    old = bn.attrs.get("frozen", tuple([0] * (bn.params["gamma"].shape[1] - extra)))
    bn.attrs["frozen"] = tuple(old) + tuple([1] * extra)


def _conv_bias_vec(node: Node):
    if node.attrs["spec"].has_bias:
        return node.params["bias"].data.reshape(-1)
    return None


def _provably_nonneg(g: Graph, nid: str) -> bool:
    """True when the node's output is non-negative by construction: a relu,
    or a max/avg pool or concat fed only by provably non-negative nodes."""
    node = g.nodes[nid]
    if node.kind == "relu":
        return True
    if node.kind in ("maxpool", "gavgpool", "concat"):
        return all(_provably_nonneg(g, src) for src in node.inputs)
    return False


def _fuse_block(g: Graph, match: BlockMatch, with_bn: bool, assume_nonneg: bool):
    """Rewrite one matched block in place; returns FusionReport entries.

    All guards run and all new weights are built before the graph is
    touched, so a raise leaves g unchanged.
    """
    if with_bn != match.with_bn:
        raise PatternMismatch(
            f"block {match.tag or match.add!r}: with_bn={with_bn} but the match "
            f"{'has' if match.with_bn else 'lacks'} main-path bn nodes"
        )
    if not assume_nonneg and not _provably_nonneg(g, match.input_id):
        raise PatternMismatch(
            f"block {match.tag or match.add!r}: input {match.input_id!r} "
            f"(a {g.nodes[match.input_id].kind}) is not provably non-negative; "
            "the relu between the enlarged convs must forward the passthrough "
            "unchanged (pass assume_nonneg to override)"
        )
    conv1 = g.nodes[match.conv1]
    conv2 = g.nodes[match.conv2]
    s1: ConvSpec = conv1.attrs["spec"]
    s2: ConvSpec = conv2.attrs["spec"]
    if (s1.r, s1.s) != (s2.r, s2.s) or s1.r % 2 == 0 or s1.s % 2 == 0:
        raise NonOddKernel(
            f"block {match.tag or match.add!r}: conv kernels {s1.r}x{s1.s} and "
            f"{s2.r}x{s2.s} must be equal and odd"
        )
    if s2.stride != (1, 1):
        raise StrideMismatch(f"block {match.tag or match.add!r}: conv2 stride {s2.stride} != (1, 1)")
    if match.kind == "basic" and s1.stride != (1, 1):
        raise StrideMismatch(f"block {match.tag or match.add!r}: basic block conv1 stride {s1.stride}")
    if not _centered(s1) or not _centered(s2):
        raise PatternMismatch(f"block {match.tag or match.add!r}: conv padding is not centered")

    dtype = conv1.params["weight"].dtype
    if conv2.params["weight"].dtype != dtype:
        raise PatternMismatch(f"block {match.tag or match.add!r}: mixed conv weight dtypes")
    c_in = s1.c
    k1, k2 = s1.k, s2.k

    if match.kind == "projection":
        sc = g.nodes[match.shortcut_conv]
        ss: ConvSpec = sc.attrs["spec"]
        if (ss.r, ss.s) != (1, 1):
            raise PatternMismatch(
                f"block {match.tag or match.add!r}: projection shortcut is "
                f"{ss.r}x{ss.s}, only 1x1 is fusable"
            )
        if ss.stride != s1.stride:
            raise StrideMismatch(
                f"block {match.tag or match.add!r}: shortcut stride {ss.stride} "
                f"!= conv1 stride {s1.stride}"
            )
        if ss.c != c_in or ss.k != k2:
            raise PatternMismatch(f"block {match.tag or match.add!r}: shortcut channel counts")
        if sc.params["weight"].dtype != dtype:
            raise PatternMismatch(f"block {match.tag or match.add!r}: mixed conv weight dtypes")
    else:
        if k2 != c_in:
            raise PatternMismatch(
                f"block {match.tag or match.add!r}: identity shortcut needs "
                f"conv2 filters ({k2}) == block input channels ({c_in})"
            )

    # --- build everything up front -------------------------------------
    ident1 = make_identity_weights(c_in, s1.r, s1.s, dtype=dtype)
    new_w1 = Tensor(np.concatenate([conv1.params["weight"].data, ident1.data], axis=0))
    new_b1 = None
    if s1.has_bias:
        b1 = conv1.params["bias"].data.reshape(-1)
        new_b1 = np.concatenate([b1, np.zeros(c_in, dtype)])

    # The passthrough weights are assembled at binary64 and rounded to the
    # graph dtype once, right before the concat; chaining the shortcut-bn
    # fold and the 1/omega adjustment in the working precision would round
    # at every step.
    omega2 = None
    if match.bn2 is not None:
        omega2 = _bn_of(g.nodes[match.bn2]).omega(np.float64)

    if match.kind == "basic":
        aux = make_identity_weights(c_in, s2.r, s2.s, dtype=np.float64)
        channel_label = PROVENANCE_IDENTITY
        extra_bias = None
    else:
        sc = g.nodes[match.shortcut_conv]
        ws = sc.params["weight"].data.astype(np.float64)
        bs = _conv_bias_vec(sc)
        bs = np.zeros(k2, np.float64) if bs is None else bs.astype(np.float64)
        if match.shortcut_bn is not None:
            sp = _bn_of(g.nodes[match.shortcut_bn])
            om_s = sp.omega(np.float64)
            ws = ws * om_s[:, None, None, None]
            bs = om_s * bs + sp.lam(np.float64)
        aux = pad_conv_weights(Tensor(ws), s2.r, s2.s)
        channel_label = PROVENANCE_PROJECTION
        extra_bias = bs
    if omega2 is not None:
        aux = adjust_identity_for_bn(aux, omega2)
        if extra_bias is not None:
            extra_bias = extra_bias / omega2

    new_w2 = Tensor(np.concatenate(
        [conv2.params["weight"].data, aux.data.astype(dtype, copy=False)], axis=1))
    b2 = _conv_bias_vec(conv2)
    if extra_bias is not None and np.any(extra_bias != 0):
        new_b2 = extra_bias if b2 is None else b2.astype(np.float64) + extra_bias
    else:
        new_b2 = b2

    # --- commit ---------------------------------------------------------
    removed = [match.add]
    conv1.params = dict(conv1.params)
    conv1.params["weight"] = new_w1
    if new_b1 is not None:
        conv1.params["bias"] = Tensor(new_b1.reshape(1, -1, 1, 1))
    conv1.attrs = dict(conv1.attrs)
    conv1.attrs["spec"] = ConvSpec(k=k1 + c_in, c=c_in, r=s1.r, s=s1.s, stride=s1.stride,
                                   pad=s1.pad, has_bias=s1.has_bias)
    if match.bn1 is not None:
        bn1 = g.nodes[match.bn1]
        bn1.params = dict(bn1.params)
        bn1.attrs = dict(bn1.attrs)
        _extend_bn_identity(bn1, c_in)

    conv2.params = dict(conv2.params)
    conv2.params["weight"] = new_w2
    has_bias2 = new_b2 is not None
    if has_bias2:
        conv2.params["bias"] = Tensor(np.asarray(new_b2, dtype).reshape(1, -1, 1, 1))
    elif "bias" in conv2.params:
        del conv2.params["bias"]
    conv2.attrs = dict(conv2.attrs)
    conv2.attrs["spec"] = ConvSpec(k=k2, c=k1 + c_in, r=s2.r, s=s2.s, stride=s2.stride,
                                   pad=s2.pad, has_bias=has_bias2)

    relu_out = g.nodes[match.relu_out]
    tail = match.bn2 if match.bn2 is not None else match.conv2
    relu_out.inputs = [tail if nid == match.add else nid for nid in relu_out.inputs]
    del g.nodes[match.add]
    if match.kind == "projection":
        del g.nodes[match.shortcut_conv]
        removed.append(match.shortcut_conv)
        if match.shortcut_bn is not None:
            del g.nodes[match.shortcut_bn]
            removed.append(match.shortcut_bn)

    entry1 = ConvFusion(
        m=k1, n=k1 + c_in,
        provenance=[PROVENANCE_ORIGINAL] * k1 + [PROVENANCE_IDENTITY] * c_in,
        channel_provenance=[PROVENANCE_ORIGINAL] * c_in,
        block=match.tag, removed=list(removed),
    )
    entry2 = ConvFusion(
        m=k2, n=k2,
        provenance=[PROVENANCE_ORIGINAL] * k2,
        channel_provenance=[PROVENANCE_ORIGINAL] * k1 + [channel_label] * c_in,
        block=match.tag, removed=[],
    )
    return [(match.conv1, entry1), (match.conv2, entry2)]


def fuse_basic_block(g: Graph, match: BlockMatch, with_bn: bool,
                     assume_nonneg: bool = False) -> tuple[Graph, FusionReport]:
    """Fuse one identity-shortcut block; returns (new graph, report)."""
    if match.kind != "basic":
        raise PatternMismatch(f"match {match.tag or match.add!r} is not a basic block")
    out = g.copy()
    entries = _fuse_block(out, match, with_bn, assume_nonneg)
    validate(out)
    return out, FusionReport(convs=dict(entries))


def fuse_projection_block(g: Graph, match: BlockMatch, with_bn: bool,
                          assume_nonneg: bool = False) -> tuple[Graph, FusionReport]:
    """Fuse one projection-shortcut block; returns (new graph, report)."""
    if match.kind != "projection":
        raise PatternMismatch(f"match {match.tag or match.add!r} is not a projection block")
    out = g.copy()
    entries = _fuse_block(out, match, with_bn, assume_nonneg)
    validate(out)
    return out, FusionReport(convs=dict(entries))


def _selected_blocks(matches: list[BlockMatch], option: FusionOption) -> list[BlockMatch]:
    tagged: list[tuple[int, int, BlockMatch]] = []
    for m in matches:
        if m.tag is None:
            continue
        t = _TAG_RE.fullmatch(m.tag)
        tagged.append((int(t.group(1)), int(t.group(2)), m))
    if not tagged:
        raise PatternMismatch("graph has no stage-tagged residual blocks to select from")
    tagged.sort(key=lambda t: (t[0], t[1]))
    n_stages = max(t[0] for t in tagged)
    if option.total != n_stages:
        raise FusionError(
            f"option {option} addresses {option.total} stages but the graph has {n_stages}"
        )
    if option.stages is not None:
        return [m for i, _, m in tagged if i <= option.stages]
    selected = []
    for i, j, m in tagged:
        if j <= option.per_stage[i - 1]:
            selected.append(m)
    for stage in range(1, n_stages + 1):
        have = sum(1 for i, _, _ in tagged if i == stage)
        if option.per_stage[stage - 1] > have:
            raise FusionError(
                f"option {option} asks for {option.per_stage[stage - 1]} blocks "
                f"in stage {stage}, which has {have}"
            )
    return selected


def fuse(g: Graph, option: FusionOption | str,
         assume_nonneg: bool = False) -> tuple[Graph, FusionReport]:
    """Fuse the blocks selected by `option` over a stage-tagged graph.

    The rewrite is atomic: any failure other than NearZeroOmega raises and
    leaves the input graph untouched. Blocks whose inverse-bn adjustment
    would be ill-conditioned are skipped and recorded in report.skipped.
    """
    if isinstance(option, str):
        option = FusionOption.parse(option)
    matches = find_residual_blocks(g)
    report = FusionReport(option=str(option))
    out = g.copy()
    for match in _selected_blocks(matches, option):
        kind_with_bn = match.with_bn
        try:
            entries = _fuse_block(out, match, kind_with_bn, assume_nonneg)
        except NearZeroOmega as exc:
            report.skipped.append({"block": match.tag, "reason": str(exc)})
            continue
        for nid, entry in entries:
            report.convs[nid] = entry
    validate(out)
    return out, report


def fold_bn(g: Graph) -> Graph:
    """Fold every bn into its preceding conv and delete the bn nodes.

    For each bn with omega/lambda: the conv's filter k is scaled by
    omega_k and its bias becomes omega_k * b_k + lambda_k. Every bn must
    directly consume a conv whose only consumer it is. The fold is
    evaluated at binary64 and rounded to the graph dtype once, so each
    folded entry carries a single rounding instead of one per operation.
    """
    out = g.copy()
    consumers = out.consumers()
    for nid in list(out.topo_order()):
        node = out.nodes.get(nid)
        if node is None or node.kind != "bn":
            continue
        src = out.nodes[node.inputs[0]]
        if src.kind != "conv":
            raise BnWithoutPrecedingConv(
                f"bn {nid!r} consumes a {src.kind}, not a conv; cannot fold"
            )
        if consumers[src.id] != [nid]:
            raise BnWithoutPrecedingConv(
                f"bn {nid!r}: conv {src.id!r} output is shared, folding would "
                "change its other consumers"
            )
        spec: ConvSpec = src.attrs["spec"]
        dtype = src.params["weight"].dtype
        p = _bn_of(node)
        omega = p.omega(np.float64)
        lam = p.lam(np.float64)
        w = (src.params["weight"].data.astype(np.float64)
             * omega[:, None, None, None]).astype(dtype, copy=False)
        b = _conv_bias_vec(src)
        b = np.zeros(spec.k, np.float64) if b is None else b.astype(np.float64)
        b = (omega * b + lam).astype(dtype, copy=False)
        src.params = dict(src.params)
        src.params["weight"] = Tensor(w)
        src.params["bias"] = Tensor(b.reshape(1, -1, 1, 1))
        src.attrs = dict(src.attrs)
        src.attrs["spec"] = ConvSpec(k=spec.k, c=spec.c, r=spec.r, s=spec.s,
                                     stride=spec.stride, pad=spec.pad, has_bias=True)
        for other in out.nodes.values():
            other.inputs = [src.id if x == nid else x for x in other.inputs]
        del out.nodes[nid]
        consumers = out.consumers()
    validate(out)
    return out
