"""Deterministic desk-scale training: forward/backward, SGD, synthetic data.

The loop exists so soft pruning can interleave real weight updates with
masking. It is a reference implementation: single-threaded, seeded
end-to-end, and exact enough for finite-difference verification.

Batch norm runs in training mode here: unfrozen channels normalize with
the current batch's statistics (biased variance) and update their stored
running statistics; channels flagged frozen keep using their stored
statistics, receive zero parameter gradients, and are skipped by weight
decay, so the exact-identity channels created by fusion stay bit-identical
through any amount of training. relu backs propagate via 1[x > 0].
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .graph import Graph, validate
from .tensor import ConvSpec, Tensor

SUPPORTED_KINDS = ("input", "output", "conv", "bn", "relu", "add", "concat",
                   "maxpool", "gavgpool", "fc")


class TrainerError(Exception):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    bn_momentum: float = 0.1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.bn_momentum <= 1:
            raise ValueError("bn_momentum must be in (0, 1]")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be >= 0")


@dataclass
class SynthDataset:
    """Seeded synthetic classification set, bit-identical per seed.

    Class y has per-channel mean amplitude * cos(2*pi*y/classes - pi*ch/c);
    distinct classes therefore have distinct channel-mean vectors lying on
    an ellipse, which a linear map separates. Pixels add Gaussian noise.
    """

    seed: int = 0
    shape: tuple[int, int, int] = (3, 8, 8)
    classes: int = 10
    n_train: int = 512
    n_test: int = 128
    noise: float = 0.25
    amplitude: float = 2.0

    train_images: np.ndarray = field(init=False, repr=False)
    train_labels: np.ndarray = field(init=False, repr=False)
    test_images: np.ndarray = field(init=False, repr=False)
    test_labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.classes < 2 or self.n_train < 1 or self.n_test < 1:
            raise ValueError("need >= 2 classes and nonempty splits")
        rng = np.random.default_rng(self.seed)
        self.train_images, self.train_labels = self._generate(rng, self.n_train)
        self.test_images, self.test_labels = self._generate(rng, self.n_test)

    def class_means(self) -> np.ndarray:
        c = self.shape[0]
        y = np.arange(self.classes)[:, None]
        ch = np.arange(c)[None, :]
        return (self.amplitude * np.cos(2 * np.pi * y / self.classes - np.pi * ch / c)
                ).astype(np.float32)

    def _generate(self, rng, n):
        c, h, w = self.shape
        labels = rng.integers(0, self.classes, size=n)
        means = self.class_means()[labels]  # (n, c)
        images = means[:, :, None, None] + self.noise * rng.standard_normal(
            (n, c, h, w)).astype(np.float32)
        return images.astype(np.float32), labels.astype(np.int64)


_DATASET_RE = re.compile(r"synth:seed=(\d+)(?:,n=(\d+))?")


def parse_dataset_spec(text: str) -> SynthDataset:
    """Parse `synth:seed=<u64>[,n=<count>]` into a dataset."""
    m = _DATASET_RE.fullmatch(text.strip())
    if not m:
        raise ValueError(f"cannot parse dataset spec {text!r}; want synth:seed=<u64>[,n=<count>]")
    seed = int(m.group(1))
    if m.group(2) is not None:
        n = int(m.group(2))
        if n < 2:
            raise ValueError("dataset size must be >= 2")
        return SynthDataset(seed=seed, n_train=n, n_test=max(1, n // 4))
    return SynthDataset(seed=seed)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient wrt the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    eps = np.finfo(logits.dtype).tiny
    loss = float(-np.log(p[np.arange(n), labels] + eps).mean())
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1
    return loss, dlogits / logits.dtype.type(n)


def _frozen_mask(node, channels: int) -> np.ndarray:
    frozen = node.attrs.get("frozen", ())
    if not frozen:
        return np.zeros(channels, dtype=bool)
    return np.asarray(frozen, dtype=bool)


def _pad_input(x: np.ndarray, ph: int, pw: int, fill=0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    xp = np.full((n, c, h + 2 * ph, w + 2 * pw), x.dtype.type(fill), dtype=x.dtype)
    xp[:, :, ph : ph + h, pw : pw + w] = x
    return xp


def _forward_train(g: Graph, x: np.ndarray, bn_momentum: float):
    """Training-mode forward pass; returns node outputs plus backward caches.

    Side effect: unfrozen bn channels fold this batch's statistics into the
    stored running mean/var with the given momentum.
    """
    values: dict[str, np.ndarray] = {}
    caches: dict[str, dict] = {}
    for nid in g.topo_order():
        node = g.nodes[nid]
        kind = node.kind
        if kind not in SUPPORTED_KINDS:
            raise TrainerError(f"node {nid!r}: kind {kind!r} unsupported in training mode")
        if kind == "input":
            values[nid] = x
            continue
        args = [values[src] for src in node.inputs]
        if kind == "output":
            values[nid] = args[0]
        elif kind == "relu":
            values[nid] = np.maximum(args[0], args[0].dtype.type(0))
        elif kind == "add":
            values[nid] = args[0] + args[1]
        elif kind == "concat":
            values[nid] = np.concatenate(args, axis=1)
            caches[nid] = {"widths": [a.shape[1] for a in args]}
        elif kind == "gavgpool":
            values[nid] = args[0].mean(axis=(2, 3), keepdims=True)
        elif kind == "maxpool":
            values[nid] = _maxpool_forward(node, args[0], caches)
        elif kind == "conv":
            values[nid] = _conv_forward(node, args[0], caches)
        elif kind == "fc":
            values[nid] = _fc_forward(node, args[0])
        elif kind == "bn":
            values[nid] = _bn_forward_train(node, args[0], bn_momentum, caches)
        else:  # pragma: no cover
            raise TrainerError(f"unhandled kind {kind}")
    return values, caches


def _conv_forward(node, x, caches):
    spec: ConvSpec = node.attrs["spec"]
    w = node.params["weight"].data
    ph, pw = spec.pad
    sh, sw = spec.stride
    xp = _pad_input(x, ph, pw)
    ho, wo = spec.out_hw(x.shape[2], x.shape[3])
    hspan = (ho - 1) * sh + 1
    wspan = (wo - 1) * sw + 1
    y = np.zeros((x.shape[0], spec.k, ho, wo), dtype=x.dtype)
    for u in range(spec.r):
        for v in range(spec.s):
            window = xp[:, :, u : u + hspan : sh, v : v + wspan : sw]
            y += np.einsum("ncij,kc->nkij", window, w[:, :, u, v])
    if spec.has_bias:
        y += node.params["bias"].data
    caches[node.id] = {"x": x, "xp": xp, "spans": (hspan, wspan)}
    return y


def _fc_forward(node, x):
    w2d = node.params["weight"].data.reshape(node.params["weight"].shape[:2])
    flat = x.reshape(x.shape[0], -1)
    y = flat @ w2d.T
    if "bias" in node.params:
        y = y + node.params["bias"].data.reshape(-1)
    return y.reshape(x.shape[0], w2d.shape[0], 1, 1)


def _bn_forward_train(node, x, bn_momentum, caches):
    dt = x.dtype
    c = x.shape[1]
    frozen = _frozen_mask(node, c)
    eps = dt.type(node.attrs["eps"])
    gamma = node.params["gamma"].data.reshape(-1)
    beta = node.params["beta"].data.reshape(-1)
    stored_mean = node.params["mean"].data.reshape(-1)
    stored_var = node.params["var"].data.reshape(-1)
    batch_mean = x.mean(axis=(0, 2, 3))
    batch_var = x.var(axis=(0, 2, 3))  # biased, used for normalization and running stats
    use_mean = np.where(frozen, stored_mean, batch_mean)
    use_var = np.where(frozen, stored_var, batch_var)
    inv = 1.0 / np.sqrt(use_var + eps)
    inv = inv.astype(dt)
    xc = x - use_mean[None, :, None, None]
    xhat = xc * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    # fold the batch statistics into the running estimates (unfrozen only)
    m = dt.type(bn_momentum)
    new_mean = np.where(frozen, stored_mean, (1 - m) * stored_mean + m * batch_mean).astype(dt)
    new_var = np.where(frozen, stored_var, (1 - m) * stored_var + m * batch_var).astype(dt)
    node.params = dict(node.params)
    node.params["mean"] = Tensor(new_mean.reshape(1, c, 1, 1))
    node.params["var"] = Tensor(new_var.reshape(1, c, 1, 1))
    caches[node.id] = {"x": x, "xc": xc, "xhat": xhat, "inv": inv, "frozen": frozen}
    return y


def _maxpool_forward(node, x, caches):
    r, s = node.attrs["window"]
    sh, sw = node.attrs["stride"]
    ph, pw = node.attrs["pad"]
    xp = _pad_input(x, ph, pw, fill=-np.inf)
    ho = (x.shape[2] + 2 * ph - r) // sh + 1
    wo = (x.shape[3] + 2 * pw - s) // sw + 1
    hspan = (ho - 1) * sh + 1
    wspan = (wo - 1) * sw + 1
    y = np.full((x.shape[0], x.shape[1], ho, wo), -np.inf, dtype=x.dtype)
    for u in range(r):
        for v in range(s):
            window = xp[:, :, u : u + hspan : sh, v : v + wspan : sw]
            np.maximum(y, window, out=y)
    caches[node.id] = {"x": x, "xp": xp, "y": y, "spans": (hspan, wspan)}
    return y


def training_forward(g: Graph, batch, bn_momentum: float = 0.1) -> np.ndarray:
    """Training-mode forward pass; returns the flattened logits (n, features).

    Differs from inference execution in that unfrozen bn channels normalize
    with the batch's own statistics (and fold them into the running
    estimates in place).
    """
    x = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    values, _ = _forward_train(g, x, bn_momentum)
    out = values[g.nodes[g.output_id].inputs[0]]
    return out.reshape(out.shape[0], -1)


def forward_backward(g: Graph, batch, labels, bn_momentum: float = 0.1):
    """One training step's math: loss, parameter gradients, input gradient.

    Returns (loss, grads, input_grad) where grads[node_id][param_name] holds
    arrays shaped like the stored parameters (conv/fc weight and bias, bn
    gamma and beta; frozen bn channels get exact zeros). Running bn
    statistics are updated in place as a side effect; weights are not.
    """
    x = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise TrainerError(f"labels shape {labels.shape} does not match batch {x.shape[0]}")
    values, caches = _forward_train(g, x, bn_momentum)
    out_node = g.nodes[g.output_id]
    logits4 = values[out_node.inputs[0]]
    logits = logits4.reshape(logits4.shape[0], -1)
    loss, dlogits = softmax_cross_entropy(logits, labels)

    gmap: dict[str, np.ndarray] = {out_node.inputs[0]: dlogits.reshape(logits4.shape)}
    grads: dict[str, dict[str, np.ndarray]] = {}

    def push(nid: str, grad: np.ndarray) -> None:
        if nid in gmap:
            gmap[nid] = gmap[nid] + grad
        else:
            gmap[nid] = grad

    for nid in reversed(g.topo_order()):
        node = g.nodes[nid]
        if node.kind in ("input", "output"):
            continue
        gy = gmap.get(nid)
        if gy is None:
            continue  # nodes past the loss tap (none in valid graphs)
        kind = node.kind
        if kind == "relu":
            xin = values[node.inputs[0]]
            push(node.inputs[0], gy * (xin > 0))
        elif kind == "add":
            push(node.inputs[0], gy)
            push(node.inputs[1], gy)
        elif kind == "concat":
            ofs = 0
            for src, width in zip(node.inputs, caches[nid]["widths"]):
                push(src, gy[:, ofs : ofs + width])
                ofs += width
        elif kind == "gavgpool":
            xin = values[node.inputs[0]]
            scale = gy.dtype.type(1.0 / (xin.shape[2] * xin.shape[3]))
            push(node.inputs[0], np.broadcast_to(gy * scale, xin.shape).copy())
        elif kind == "maxpool":
            push(node.inputs[0], _maxpool_backward(node, gy, caches[nid]))
        elif kind == "conv":
            gx, gparams = _conv_backward(node, gy, caches[nid])
            grads[nid] = gparams
            push(node.inputs[0], gx)
        elif kind == "fc":
            gx, gparams = _fc_backward(node, gy, values[node.inputs[0]])
            grads[nid] = gparams
            push(node.inputs[0], gx)
        elif kind == "bn":
            gx, gparams = _bn_backward(node, gy, caches[nid])
            grads[nid] = gparams
            push(node.inputs[0], gx)
        else:  # pragma: no cover
            raise TrainerError(f"unhandled kind {kind}")
    return loss, grads, gmap.get(g.input_id, np.zeros_like(x))


def _conv_backward(node, gy, cache):
    spec: ConvSpec = node.attrs["spec"]
    w = node.params["weight"].data
    xp = cache["xp"]
    hspan, wspan = cache["spans"]
    sh, sw = spec.stride
    ph, pw = spec.pad
    gw = np.zeros_like(w)
    gxp = np.zeros_like(xp)
    for u in range(spec.r):
        for v in range(spec.s):
            window = xp[:, :, u : u + hspan : sh, v : v + wspan : sw]
            gw[:, :, u, v] = np.einsum("nkij,ncij->kc", gy, window)
            gxp[:, :, u : u + hspan : sh, v : v + wspan : sw] += np.einsum(
                "nkij,kc->ncij", gy, w[:, :, u, v])
    h, wd = cache["x"].shape[2:]
    gx = gxp[:, :, ph : ph + h, pw : pw + wd]
    gparams = {"weight": gw}
    if spec.has_bias:
        gparams["bias"] = gy.sum(axis=(0, 2, 3)).reshape(1, spec.k, 1, 1)
    return gx, gparams


def _fc_backward(node, gy, xin):
    w = node.params["weight"]
    w2d = w.data.reshape(w.shape[:2])
    gy2 = gy.reshape(gy.shape[0], -1)
    flat = xin.reshape(xin.shape[0], -1)
    gw = (gy2.T @ flat).reshape(w.shape)
    gx = (gy2 @ w2d).reshape(xin.shape)
    gparams = {"weight": gw}
    if "bias" in node.params:
        gparams["bias"] = gy2.sum(axis=0).reshape(node.params["bias"].shape)
    return gx, gparams


def _bn_backward(node, gy, cache):
    gamma = node.params["gamma"].data.reshape(-1)
    xc, xhat, inv, frozen = cache["xc"], cache["xhat"], cache["inv"], cache["frozen"]
    n, c, h, w = gy.shape
    cnt = gy.dtype.type(n * h * w)
    ggamma = np.einsum("nchw->c", gy * xhat)
    gbeta = np.einsum("nchw->c", gy)
    gxhat = gy * gamma[None, :, None, None]
    # batch-statistics chain (exact): d/dx of (x - mu_B) / sqrt(var_B + eps)
    sum_gxhat = gxhat.sum(axis=(0, 2, 3))
    sum_gxhat_xc = (gxhat * xc).sum(axis=(0, 2, 3))
    gvar = sum_gxhat_xc * (-0.5) * inv**3
    gmu = -sum_gxhat * inv + gvar * (-2.0 / cnt) * xc.sum(axis=(0, 2, 3))
    gx_batch = (gxhat * inv[None, :, None, None]
                + (gvar * 2.0 / cnt)[None, :, None, None] * xc
                + (gmu / cnt)[None, :, None, None])
    # frozen channels treat the stored statistics as constants
    gx_frozen = gxhat * inv[None, :, None, None]
    fmask = frozen[None, :, None, None]
    gx = np.where(fmask, gx_frozen, gx_batch)
    ggamma = np.where(frozen, 0.0, ggamma).astype(gy.dtype)
    gbeta = np.where(frozen, 0.0, gbeta).astype(gy.dtype)
    return gx, {"gamma": ggamma.reshape(1, c, 1, 1), "beta": gbeta.reshape(1, c, 1, 1)}


def _maxpool_backward(node, gy, cache):
    r, s = node.attrs["window"]
    sh, sw = node.attrs["stride"]
    ph, pw = node.attrs["pad"]
    xp, y = cache["xp"], cache["y"]
    hspan, wspan = cache["spans"]
    gxp = np.zeros_like(xp)
    remaining = np.ones_like(y, dtype=bool)
    for u in range(r):
        for v in range(s):
            window = xp[:, :, u : u + hspan : sh, v : v + wspan : sw]
            hit = (window == y) & remaining
            gxp[:, :, u : u + hspan : sh, v : v + wspan : sw] += gy * hit
            remaining &= ~hit
    h, w = cache["x"].shape[2:]
    return gxp[:, :, ph : ph + h, pw : pw + w]


_LEARNABLE = {"conv": ("weight", "bias"), "fc": ("weight", "bias"), "bn": ("gamma", "beta")}


def sgd_step(g: Graph, grads, cfg: TrainConfig, velocity: dict) -> None:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v, in place.

    bn channels flagged frozen are excluded from both the gradient (already
    zero) and the weight-decay pull, so they never move.
    """
    for nid in g.topo_order():
        node = g.nodes[nid]
        names = _LEARNABLE.get(node.kind, ())
        if not names or nid not in grads:
            continue
        for pname in names:
            if pname not in node.params or pname not in grads[nid]:
                continue
            param = node.params[pname].data
            dt = param.dtype
            step = grads[nid][pname].astype(dt) + dt.type(cfg.weight_decay) * param
            if node.kind == "bn":
                frozen = _frozen_mask(node, param.shape[1])
                step = np.where(frozen[None, :, None, None], 0.0, step).astype(dt)
            key = (nid, pname)
            v = velocity.get(key)
            v = step if v is None else dt.type(cfg.momentum) * v + step
            velocity[key] = v
            node.params = dict(node.params)
            node.params[pname] = Tensor(param - dt.type(cfg.lr) * v)


def train_epoch(g: Graph, dataset: SynthDataset, cfg: TrainConfig, epoch: int = 0,
                velocity: dict | None = None) -> float:
    """One epoch of SGD over the shuffled training split; returns mean loss."""
    if velocity is None:
        velocity = {}
    order = np.random.default_rng((cfg.seed, epoch)).permutation(dataset.n_train)
    total, seen = 0.0, 0
    for start in range(0, dataset.n_train, cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        batch = dataset.train_images[idx]
        labels = dataset.train_labels[idx]
        loss, grads, _ = forward_backward(g, batch, labels, cfg.bn_momentum)
        sgd_step(g, grads, cfg, velocity)
        total += loss * len(idx)
        seen += len(idx)
    return total / max(seen, 1)


def evaluate(g: Graph, dataset: SynthDataset, batch_size: int = 64) -> float:
    """Inference-mode top-1 accuracy on the test split."""
    from .graph import execute

    correct = 0
    for start in range(0, dataset.n_test, batch_size):
        images = dataset.test_images[start : start + batch_size]
        labels = dataset.test_labels[start : start + batch_size]
        y = execute(g, Tensor(images))
        pred = y.data.reshape(y.shape[0], -1).argmax(axis=1)
        correct += int((pred == labels).sum())
    return correct / dataset.n_test


def fit(g: Graph, dataset: SynthDataset, cfg: TrainConfig) -> list[float]:
    """Train for cfg.epochs with one persistent momentum state; returns the
    per-epoch mean losses. The graph is updated in place."""
    velocity: dict = {}
    return [train_epoch(g, dataset, cfg, epoch, velocity) for epoch in range(cfg.epochs)]


def make_epoch_hook(dataset: SynthDataset, cfg: TrainConfig):
    """An epoch hook for dynamic_prune: trains one epoch per call, keeping
    momentum state across calls."""
    velocity: dict = {}

    def hook(graph: Graph, epoch: int) -> None:
        train_epoch(graph, dataset, cfg, epoch, velocity)

    return hook
