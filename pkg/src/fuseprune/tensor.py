"""Dense 4-D tensors and deterministic reference kernels.

Every activation and weight in this package is a rank-4 array laid out as
(n, c, h, w) in row-major order with w fastest. The kernels here are pure
functions, and the reductions inside conv2d and fully_connected accumulate
sequentially in a fixed order (input channel, then kernel row, then kernel
column). That ordering is part of the contract: it makes exact floating
point equality against an independently written brute-force implementation
meaningful, and it guarantees that dropping an all-zero input channel from
a convolution cannot change the remaining partial sums.

float32 is the working precision; float64 is supported throughout for
high-precision runs. Mixing dtypes within one kernel call is an error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
DTYPE_FROM_NAME = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}


class TensorError(ValueError):
    """Malformed tensor contents or a kernel shape/parameter violation."""


class Tensor:
    """Immutable dense 4-D array of finite float32 or float64 values."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.dtype not in SUPPORTED_DTYPES:
            raise TensorError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
        if arr.ndim != 4:
            raise TensorError(f"tensors are rank-4 (n, c, h, w); got rank {arr.ndim}")
        if any(d < 1 for d in arr.shape):
            raise TensorError(f"all dimensions must be >= 1; got {arr.shape}")
        if not np.isfinite(arr).all():
            raise TensorError("tensor contains NaN or Inf")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def dtype_name(self) -> str:
        return DTYPE_NAMES[self.data.dtype]

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype_name})"


@dataclass(frozen=True)
class ConvSpec:
    """Static convolution geometry: k filters of shape (c, r, s)."""

    k: int
    c: int
    r: int
    s: int
    stride: tuple[int, int] = (1, 1)
    pad: tuple[int, int] = (0, 0)
    has_bias: bool = False

    def __post_init__(self):
        for name in ("k", "c", "r", "s"):
            if getattr(self, name) < 1:
                raise TensorError(f"ConvSpec.{name} must be >= 1")
        object.__setattr__(self, "stride", (int(self.stride[0]), int(self.stride[1])))
        object.__setattr__(self, "pad", (int(self.pad[0]), int(self.pad[1])))
        if self.stride[0] < 1 or self.stride[1] < 1:
            raise TensorError("ConvSpec.stride components must be >= 1")
        if self.pad[0] < 0 or self.pad[1] < 0:
            raise TensorError("ConvSpec.pad components must be >= 0")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.k, self.c, self.r, self.s)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        """Output spatial size for an (h, w) input; both results must be >= 1."""
        ho = (h + 2 * self.pad[0] - self.r) // self.stride[0] + 1
        wo = (w + 2 * self.pad[1] - self.s) // self.stride[1] + 1
        if ho < 1 or wo < 1:
            raise TensorError(
                f"conv output collapses to {ho}x{wo} for input {h}x{w} with {self}"
            )
        return ho, wo


@dataclass
class BnParams:
    """Per-channel batch normalization parameters for inference.

    gamma, beta, mean and var are 1-D arrays of equal length; eps is a
    positive scalar. The affine form used everywhere is

        y = omega * x + lam,  omega = gamma / sqrt(var + eps),
                              lam   = beta - omega * mean.
    """

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma).reshape(-1)
        self.beta = np.asarray(self.beta).reshape(-1)
        self.mean = np.asarray(self.mean).reshape(-1)
        self.var = np.asarray(self.var).reshape(-1)
        n = self.gamma.shape[0]
        if any(a.shape[0] != n for a in (self.beta, self.mean, self.var)):
            raise TensorError("BnParams arrays must have equal length")
        if n < 1:
            raise TensorError("BnParams must cover at least one channel")
        if np.any(self.var < 0):
            raise TensorError("BnParams.var must be non-negative")
        if not self.eps > 0:
            raise TensorError("BnParams.eps must be > 0")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def omega(self, dtype) -> np.ndarray:
        dt = np.dtype(dtype)
        g = self.gamma.astype(dt, copy=False)
        v = self.var.astype(dt, copy=False)
        return g / np.sqrt(v + dt.type(self.eps))

    def lam(self, dtype) -> np.ndarray:
        dt = np.dtype(dtype)
        b = self.beta.astype(dt, copy=False)
        m = self.mean.astype(dt, copy=False)
        return b - self.omega(dt) * m


def _check_same_dtype(*arrays):
    dt = arrays[0].dtype
    for a in arrays[1:]:
        if a.dtype != dt:
            raise TensorError(f"mixed dtypes in one kernel call: {dt} vs {a.dtype}")
    return dt


def conv2d_raw(x: np.ndarray, w: np.ndarray, bias, stride, pad) -> np.ndarray:
    """2-D convolution (cross-correlation) with zero padding on raw arrays.

    y(n, k, ho, wo) = sum over (t, i, j) of
        x(n, t, sh*ho + i - ph, sw*wo + j - pw) * w(k, t, i, j)
    with out-of-range x reads taken as zero, accumulated sequentially in
    (t, i, j) order; the per-filter bias, when present, is added once after
    the summation.
    """
    n, c, h, wd = x.shape
    k, cw, r, s = w.shape
    if cw != c:
        raise TensorError(f"conv weight expects {cw} input channels, tensor has {c}")
    sh, sw = stride
    ph, pw = pad
    ho = (h + 2 * ph - r) // sh + 1
    wo = (wd + 2 * pw - s) // sw + 1
    if ho < 1 or wo < 1:
        raise TensorError(f"conv output collapses to {ho}x{wo}")
    dt = _check_same_dtype(x, w)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    y = np.zeros((n, k, ho, wo), dtype=dt)
    tmp = np.empty_like(y)
    hspan = sh * (ho - 1) + 1
    wspan = sw * (wo - 1) + 1
    for t in range(c):
        xt = xp[:, t]
        for i in range(r):
            rows = xt[:, i : i + hspan : sh]
            for j in range(s):
                window = rows[:, :, j : j + wspan : sw]
                np.multiply(window[:, None, :, :], w[:, t, i, j][None, :, None, None], out=tmp)
                y += tmp
    if bias is not None:
        b = np.asarray(bias).reshape(-1)
        if b.shape[0] != k:
            raise TensorError(f"bias length {b.shape[0]} != filter count {k}")
        _check_same_dtype(x, b)
        y += b.reshape(1, k, 1, 1)
    return y


def conv2d(x: Tensor, w: Tensor, bias, spec: ConvSpec) -> Tensor:
    """Convolve x with w under the given spec. bias is a length-k array or None."""
    if w.shape != spec.weight_shape:
        raise TensorError(f"weight shape {w.shape} does not match {spec}")
    if x.shape[1] != spec.c:
        raise TensorError(f"input has {x.shape[1]} channels, spec expects {spec.c}")
    if spec.has_bias and bias is None:
        raise TensorError("spec declares a bias but none was given")
    if not spec.has_bias and bias is not None:
        raise TensorError("spec declares no bias but one was given")
    spec.out_hw(x.shape[2], x.shape[3])
    return Tensor(conv2d_raw(x.data, w.data, bias, spec.stride, spec.pad))


def batch_norm_inference(x: Tensor, p: BnParams) -> Tensor:
    """Per-channel affine y = omega * x + lam in x's dtype."""
    if p.channels != x.shape[1]:
        raise TensorError(f"bn covers {p.channels} channels, tensor has {x.shape[1]}")
    dt = x.dtype
    omega = p.omega(dt).reshape(1, -1, 1, 1)
    lam = p.lam(dt).reshape(1, -1, 1, 1)
    return Tensor(x.data * omega + lam)


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise TensorError(f"add shape mismatch: {a.shape} vs {b.shape}")
    _check_same_dtype(a.data, b.data)
    return Tensor(a.data + b.data)


def relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, x.dtype.type(0)))


def concat_channels(tensors) -> Tensor:
    """Concatenate along the channel axis; n, h, w and dtype must agree."""
    tensors = list(tensors)
    if len(tensors) < 2:
        raise TensorError("concat needs at least two inputs")
    first = tensors[0]
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
            raise TensorError(f"concat non-channel dims differ: {first.shape} vs {t.shape}")
    _check_same_dtype(*[t.data for t in tensors])
    return Tensor(np.concatenate([t.data for t in tensors], axis=1))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims: (n, c, h, w) -> (n, c, 1, 1)."""
    return Tensor(x.data.mean(axis=(2, 3), keepdims=True, dtype=x.dtype))


def max_pool(x: Tensor, window, stride, pad) -> Tensor:
    """Max over (r, s) windows with the same index convention as conv2d."""
    r, s = int(window[0]), int(window[1])
    sh, sw = int(stride[0]), int(stride[1])
    ph, pw = int(pad[0]), int(pad[1])
    if r < 1 or s < 1 or sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise TensorError("max_pool window/stride must be >= 1 and pad >= 0")
    n, c, h, wd = x.shape
    ho = (h + 2 * ph - r) // sh + 1
    wo = (wd + 2 * pw - s) // sw + 1
    if ho < 1 or wo < 1:
        raise TensorError(f"max_pool output collapses to {ho}x{wo}")
    neg = x.dtype.type(-np.inf)
    xp = np.full((n, c, h + 2 * ph, wd + 2 * pw), neg, dtype=x.dtype)
    xp[:, :, ph : ph + h, pw : pw + wd] = x.data
    y = np.full((n, c, ho, wo), neg, dtype=x.dtype)
    hspan = sh * (ho - 1) + 1
    wspan = sw * (wo - 1) + 1
    for i in range(r):
        rows = xp[:, :, i : i + hspan : sh]
        for j in range(s):
            np.maximum(y, rows[:, :, :, j : j + wspan : sw], out=y)
    # a window made entirely of padding would leave -inf behind; Tensor rejects it
    return Tensor(y)


def fc_raw(x2d: np.ndarray, w2d: np.ndarray, bias) -> np.ndarray:
    """Dense layer on flattened rows, accumulated sequentially over inputs.

    y(n, o) = sum over t of x(n, t) * w(o, t), bias added after the sum.
    The explicit loop keeps the summation order fixed so that removing an
    all-zero input column leaves the surviving partial sums unchanged.
    """
    n, fin = x2d.shape
    fout, fin_w = w2d.shape
    if fin != fin_w:
        raise TensorError(f"fc expects {fin_w} inputs, got {fin}")
    dt = _check_same_dtype(x2d, w2d)
    y = np.zeros((n, fout), dtype=dt)
    tmp = np.empty_like(y)
    for t in range(fin):
        np.multiply(x2d[:, t][:, None], w2d[:, t][None, :], out=tmp)
        y += tmp
    if bias is not None:
        b = np.asarray(bias).reshape(-1)
        if b.shape[0] != fout:
            raise TensorError(f"fc bias length {b.shape[0]} != output count {fout}")
        _check_same_dtype(x2d, b)
        y += b[None, :]
    return y


def fully_connected(x: Tensor, w: Tensor, bias) -> Tensor:
    """Flatten x to (n, c*h*w) and apply a dense layer; output is (n, out, 1, 1)."""
    n = x.shape[0]
    fin = x.shape[1] * x.shape[2] * x.shape[3]
    fout, fin_w, one_a, one_b = w.shape
    if (one_a, one_b) != (1, 1):
        raise TensorError(f"fc weight must be (out, in, 1, 1); got {w.shape}")
    if fin != fin_w:
        raise TensorError(f"fc weight expects {fin_w} inputs, tensor flattens to {fin}")
    y = fc_raw(x.data.reshape(n, fin), w.data.reshape(fout, fin_w), bias)
    return Tensor(y.reshape(n, fout, 1, 1))
