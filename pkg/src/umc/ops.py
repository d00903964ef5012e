"""Layer vocabulary for U-Net style networks, registered as graph ops.

Convolutions, pooling, bilinear and transposed-conv upsampling, channel
concatenation, elementwise fusion, activations, the two losses, and the
Adam optimizer. Every op preserves the dtype of its inputs so the same
kernels serve float32 training and float64 gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ShapeError, register_op


class OptimizerError(RuntimeError):
    """Raised when an update step cannot proceed (non-finite gradients)."""


# --------------------------------------------------------------------------
# Parameter container
# --------------------------------------------------------------------------


@dataclass
class ConvParams:
    """Weights [out, in, kH, kW] and bias [out] of one convolution layer."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w, b = self.weights, self.bias
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] not in (1, 2, 3):
            raise ShapeError(f"conv weights must be [out,in,k,k] with k in 1..3, got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} out channels")

    @property
    def param_count(self) -> int:
        return self.weights.size + self.bias.size


def conv_param_count(cin: int, cout: int, k: int) -> int:
    """Trainable elements of a k x k convolution: cin*cout*k^2 + cout."""
    return cin * cout * k * k + cout


# --------------------------------------------------------------------------
# Simple elementwise / structural ops
# --------------------------------------------------------------------------


def _identity_fwd(attrs, x):
    return x


def _identity_bwd(attrs, vals, out, g):
    return (g,)


def _relu_fwd(attrs, x):
    return np.maximum(x, 0)


def _relu_bwd(attrs, vals, out, g):
    # Subgradient at exactly 0 is 0 (x > 0 comparison is strict).
    (x,) = vals
    return (g * (x > 0),)


def _add_fwd(attrs, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"elementwise add of mismatched shapes {a.shape} vs {b.shape}")
    return a + b


def _add_bwd(attrs, vals, out, g):
    return (g, g)


def _mul_fwd(attrs, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"elementwise mul of mismatched shapes {a.shape} vs {b.shape}")
    return a * b


def _mul_bwd(attrs, vals, out, g):
    a, b = vals
    return (g * b, g * a)


def _scale_fwd(attrs, x):
    return x * float(attrs["factor"])


def _scale_bwd(attrs, vals, out, g):
    return (g * float(attrs["factor"]),)


def _sum_fwd(attrs, x):
    return np.asarray(np.sum(x))


def _sum_bwd(attrs, vals, out, g):
    (x,) = vals
    return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)


def _concat_fwd(attrs, *xs):
    base = xs[0]
    for x in xs[1:]:
        if x.ndim != base.ndim or x.shape[0] != base.shape[0] or x.shape[2:] != base.shape[2:]:
            raise ShapeError(f"concat of incompatible shapes {[t.shape for t in xs]}")
    return np.concatenate(xs, axis=1)


def _concat_bwd(attrs, vals, out, g):
    grads = []
    start = 0
    for x in vals:
        c = x.shape[1]
        grads.append(g[:, start:start + c])
        start += c
    return tuple(grads)


def _wsum_fwd(attrs, *ls):
    weights = attrs["weights"]
    if len(weights) != len(ls):
        raise ShapeError("weighted sum needs one weight per term")
    out = None
    for w, l in zip(weights, ls):
        term = l * float(w)
        out = term if out is None else out + term
    return out


def _wsum_bwd(attrs, vals, out, g):
    return tuple(g * float(w) for w in attrs["weights"])


# --------------------------------------------------------------------------
# Convolutions
# --------------------------------------------------------------------------


def _check_conv_inputs(x, w, b, k):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be 4-D, got {x.shape}")
    if w.shape[2] != k or w.shape[3] != k:
        raise ShapeError(f"expected {k}x{k} kernel, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv channel mismatch: input has {x.shape[1]}, "
                         f"weights expect {w.shape[1]}")


def _conv3_fwd(attrs, x, w, b):
    _check_conv_inputs(x, w, b, 3)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))   # (B,Cin,H,W,3,3)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (B,H,W,Cout)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += b[None, :, None, None]
    return out


def _conv3_bwd(attrs, vals, out, g):
    x, w, b = vals
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))
    gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))   # (Cout,Cin,3,3)
    gb = g.sum(axis=(0, 2, 3))
    # dX is the full correlation of the upstream gradient with the kernel
    # flipped spatially and transposed over the channel axes.
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gcols = sliding_window_view(gp, (3, 3), axis=(2, 3))
    gx = np.tensordot(gcols, wt, axes=([1, 4, 5], [1, 2, 3]))
    gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
    return (gx, gw, gb)


def _conv1_fwd(attrs, x, w, b):
    _check_conv_inputs(x, w, b, 1)
    wm = w[:, :, 0, 0]
    out = np.tensordot(x, wm, axes=([1], [1]))   # (B,H,W,Cout)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += b[None, :, None, None]
    return out


def _conv1_bwd(attrs, vals, out, g):
    x, w, b = vals
    wm = w[:, :, 0, 0]
    gx = np.tensordot(g, wm, axes=([1], [0]))    # (B,H,W,Cin)
    gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
    gw = np.tensordot(g, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
    gb = g.sum(axis=(0, 2, 3))
    return (gx, gw, gb)


# --------------------------------------------------------------------------
# Pooling and upsampling
# --------------------------------------------------------------------------


def _pool_windows(x):
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got H={h}, W={w}")
    v = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return v.reshape(b, c, h // 2, w // 2, 4)


def _maxpool2_fwd(attrs, x):
    return _pool_windows(x).max(axis=-1)


def _maxpool2_bwd(attrs, vals, out, g):
    (x,) = vals
    b, c, h, w = x.shape
    v = _pool_windows(x)
    # argmax returns the first maximum, i.e. row-major tie-breaking within
    # each 2x2 window.
    idx = v.argmax(axis=-1)
    onehot = idx[..., None] == np.arange(4)
    gv = g[..., None] * onehot
    gx = gv.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return (np.ascontiguousarray(gx.reshape(b, c, h, w)),)


@lru_cache(maxsize=None)
def _bilinear_matrix(n: int) -> np.ndarray:
    """(2n x n) interpolation matrix for x2 upsampling along one axis.

    Half-pixel-centers convention: output t samples source coordinate
    (t + 0.5)/2 - 0.5, with indices clamped to the valid range so edges
    replicate. Rows sum to exactly 1, so constants are preserved.
    """
    m = np.zeros((2 * n, n), dtype=np.float64)
    for t in range(2 * n):
        src = (t + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(src))
        f = src - i0
        lo = min(max(i0, 0), n - 1)
        hi = min(max(i0 + 1, 0), n - 1)
        m[t, lo] += 1.0 - f
        m[t, hi] += f
    return m


@lru_cache(maxsize=None)
def _bilinear_matrix_cast(n: int, dtype_name: str) -> np.ndarray:
    return _bilinear_matrix(n).astype(np.dtype(dtype_name))


def _upsample2_fwd(attrs, x):
    if x.ndim != 4:
        raise ShapeError(f"upsample input must be 4-D, got {x.shape}")
    _, _, h, w = x.shape
    ay = _bilinear_matrix_cast(h, x.dtype.name)
    ax = _bilinear_matrix_cast(w, x.dtype.name)
    t = np.tensordot(x, ax, axes=([3], [1]))       # (B,C,H,2W)
    out = np.tensordot(t, ay, axes=([2], [1]))     # (B,C,2W,2H)
    return np.ascontiguousarray(out.transpose(0, 1, 3, 2))


def _upsample2_bwd(attrs, vals, out, g):
    (x,) = vals
    _, _, h, w = x.shape
    ay = _bilinear_matrix_cast(h, x.dtype.name)
    ax = _bilinear_matrix_cast(w, x.dtype.name)
    # Linear op: the backward map is the transpose of the forward map.
    t = np.tensordot(g, ay, axes=([2], [0]))       # (B,C,2W,H)
    gx = np.tensordot(t, ax, axes=([2], [0]))      # (B,C,H,W)
    return (np.ascontiguousarray(gx),)


def _tconv2_fwd(attrs, x, w, b):
    _check_conv_inputs(x, w, b, 2)
    bsz, _, h, wd = x.shape
    cout = w.shape[0]
    out = np.einsum("bchw,ocij->bohiwj", x, w)
    out = out.reshape(bsz, cout, 2 * h, 2 * wd)
    out += b[None, :, None, None]
    return out


def _tconv2_bwd(attrs, vals, out, g):
    x, w, b = vals
    bsz, _, h, wd = x.shape
    g6 = g.reshape(bsz, g.shape[1], h, 2, wd, 2)
    gx = np.einsum("bohiwj,ocij->bchw", g6, w)
    gw = np.einsum("bohiwj,bchw->ocij", g6, x)
    gb = g.sum(axis=(0, 2, 3))
    return (np.ascontiguousarray(gx), gw, gb)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def _mse_fwd(attrs, pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    d = pred - target
    return np.asarray(np.mean(d * d))


def _mse_bwd(attrs, vals, out, g):
    pred, target = vals
    d = pred - target
    gp = d * (2.0 / d.size) * g
    return (gp, -gp)


def _softmax_ce_fwd(attrs, logits, labels):
    ignore = attrs["ignore_index"]
    if logits.ndim != 4 or labels.ndim != 3:
        raise ShapeError(f"cross-entropy expects (B,K,H,W) logits and (B,H,W) "
                         f"labels, got {logits.shape} and {labels.shape}")
    b, k, h, w = logits.shape
    if labels.shape != (b, h, w):
        raise ShapeError(f"label map shape {labels.shape} does not match logits {logits.shape}")
    mask = labels != ignore
    lab = labels[mask]
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ShapeError(f"label values must lie in [0, {k}) or equal {ignore}")
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1))            # (B,H,W)
    safe = np.where(mask, labels, 0)
    zl = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    count = int(mask.sum())
    if count == 0:
        return np.asarray(logits.dtype.type(0.0))
    nll = (lse - zl) * mask
    return np.asarray(nll.sum() / count)


def _softmax_ce_bwd(attrs, vals, out, g):
    logits, labels = vals
    ignore = attrs["ignore_index"]
    mask = labels != ignore
    count = int(mask.sum())
    if count == 0:
        return (np.zeros_like(logits), None)
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    safe = np.where(mask, labels, 0)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    gl = (p - onehot) * (mask[:, None] / count) * g
    return (gl.astype(logits.dtype, copy=False), None)


def _relu_state(attrs, vals):
    return vals[0] > 0


def _maxpool2_state(attrs, vals):
    return _pool_windows(vals[0]).argmax(axis=-1)


register_op("identity", _identity_fwd, _identity_bwd)
register_op("relu", _relu_fwd, _relu_bwd, branch_state=_relu_state)
register_op("add", _add_fwd, _add_bwd)
register_op("mul", _mul_fwd, _mul_bwd)
register_op("scale", _scale_fwd, _scale_bwd)
register_op("sum", _sum_fwd, _sum_bwd)
register_op("concat", _concat_fwd, _concat_bwd)
register_op("wsum", _wsum_fwd, _wsum_bwd)
register_op("conv3", _conv3_fwd, _conv3_bwd)
register_op("conv1", _conv1_fwd, _conv1_bwd)
register_op("maxpool2", _maxpool2_fwd, _maxpool2_bwd,
            branch_state=_maxpool2_state)
register_op("up_bilinear2", _upsample2_fwd, _upsample2_bwd)
register_op("tconv2", _tconv2_fwd, _tconv2_bwd)
register_op("mse", _mse_fwd, _mse_bwd)
register_op("softmax_ce", _softmax_ce_fwd, _softmax_ce_bwd)


# --------------------------------------------------------------------------
# Gradient-check case table (shared by the CLI audit and the test suite)
# --------------------------------------------------------------------------


def _away_from_zero(x, margin=0.25):
    # keep samples clear of the ReLU kink so finite differences stay valid
    return x + margin * np.sign(x)


def _distinct_grid(rng, shape):
    # values with pairwise gaps far above the probe epsilon, so pooling
    # argmaxes cannot flip under perturbation
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64).reshape(shape)) / 10.0


def standard_gradcheck_cases() -> list:
    """(kind, make) pairs; make(rng) returns (inputs, attrs) for grad_check."""
    def conv3(rng):
        return ((rng.standard_normal((2, 3, 6, 5)),
                 rng.standard_normal((4, 3, 3, 3)),
                 rng.standard_normal(4)), {})

    def conv1(rng):
        return ((rng.standard_normal((2, 3, 5, 6)),
                 rng.standard_normal((7, 3, 1, 1)),
                 rng.standard_normal(7)), {})

    def tconv2(rng):
        return ((rng.standard_normal((2, 3, 4, 5)),
                 rng.standard_normal((4, 3, 2, 2)),
                 rng.standard_normal(4)), {})

    def softmax_ce(rng):
        logits = rng.standard_normal((2, 5, 4, 4))
        labels = rng.integers(0, 5, size=(2, 4, 4))
        labels[rng.random((2, 4, 4)) < 0.2] = 255
        return (logits, labels), {"ignore_index": 255}

    return [
        ("identity", lambda rng: ((rng.standard_normal((2, 3, 4, 4)),), {})),
        ("relu", lambda rng: ((_away_from_zero(rng.standard_normal((2, 3, 4, 4))),), {})),
        ("add", lambda rng: ((rng.standard_normal((2, 3, 4, 4)),
                              rng.standard_normal((2, 3, 4, 4))), {})),
        ("mul", lambda rng: ((rng.standard_normal((2, 3, 4, 4)),
                              rng.standard_normal((2, 3, 4, 4))), {})),
        ("scale", lambda rng: ((rng.standard_normal((2, 3, 4, 4)),),
                               {"factor": -1.7})),
        ("sum", lambda rng: ((rng.standard_normal((2, 3, 4, 4)),), {})),
        ("concat", lambda rng: ((rng.standard_normal((2, 2, 4, 4)),
                                 rng.standard_normal((2, 3, 4, 4)),
                                 rng.standard_normal((2, 1, 4, 4))), {})),
        ("wsum", lambda rng: ((rng.standard_normal(()), rng.standard_normal(()),
                               rng.standard_normal(())),
                              {"weights": [0.5, 1.5, 2.0]})),
        ("conv3", conv3),
        ("conv1", conv1),
        ("maxpool2", lambda rng: ((_distinct_grid(rng, (2, 3, 6, 4)),), {})),
        ("up_bilinear2", lambda rng: ((rng.standard_normal((2, 3, 4, 6)),), {})),
        ("tconv2", tconv2),
        ("mse", lambda rng: ((rng.standard_normal((2, 3, 4, 4)),
                              rng.standard_normal((2, 3, 4, 4))), {})),
        ("softmax_ce", softmax_ce),
    ]


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter moments and the shared step counter."""

    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> dict[str, np.ndarray]:
    """One Adam update with bias correction; returns the new parameters.

    Moment tensors and the step counter are updated in place on ``state``.
    A non-finite gradient aborts the step before any parameter changes.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter '{name}'")
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_params = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / c1
        vhat = v / c2
        new_params[name] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return new_params
