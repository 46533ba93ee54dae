"""Signal-processing primitives that make up every WAWEnet section.

Each network layer decomposes into a handful of elementary functions: a
3-tap FIR filter (convolution), a per-channel gain and bias (folded batch
normalization), half-wave rectification, and an averaging filter fused with
sub-sampling (average pooling).  This module provides them as pure
functions, each with an adjoint (``*_backward``), and as small layer
objects that retain what their adjoint needs.

Arrays follow the ``(batch, channels, samples)`` layout.  Storage is
whatever dtype the caller hands in (float32 for training, float64 for
gradient checks); means, variances and bias sums accumulate in float64.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InvalidLength, InvalidShape, StateError

FILTER_LENGTH = 3
# banks with at most this many input channels skip the matmul formulation
DIRECT_MAX_CHANNELS = 4
POOL_FACTORS = (2, 3, 4)


def _check_signal(x):
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise InvalidLength("signal must contain at least one sample")
    return x


def _compiled(*arrays):
    """True when the compiled kernels apply: contiguous 3-D float arrays of one dtype."""
    first = arrays[0]
    return all(
        a.ndim == 3 and a.dtype == first.dtype and a.dtype in (np.float32, np.float64)
        and a.flags.c_contiguous for a in arrays
    )


def _float_dtype(*arrays):
    dt = np.result_type(*arrays)
    return dt if np.issubdtype(dt, np.floating) else np.dtype(np.float64)


# --------------------------------------------------------------------------
# FIR filtering (convolution)
# --------------------------------------------------------------------------

def fir_filter(x, kernel, offset=0.0):
    """Filter one channel with a centered 3-tap FIR and add ``offset``.

    ``y[k] = h0*x[k-1] + h1*x[k] + h2*x[k+1] + offset`` with zeros beyond
    both ends, so the output has the input's length.
    """
    x = _check_signal(x)
    h = np.asarray(kernel, dtype=np.float64)
    if h.shape != (FILTER_LENGTH,):
        raise InvalidShape(f"kernel must have {FILTER_LENGTH} taps, got shape {h.shape}")
    xp = np.zeros(x.shape[:-1] + (x.shape[-1] + 2,), dtype=np.float64)
    xp[..., 1:-1] = x
    y = h[0] * xp[..., :-2] + h[1] * xp[..., 1:-1] + h[2] * xp[..., 2:] + offset
    return y.astype(_float_dtype(x), copy=False)


def fir_filter_backward(x, kernel, grad):
    """Return ``(grad_x, grad_kernel, grad_offset)`` for :func:`fir_filter`."""
    x = _check_signal(x)
    g = np.asarray(grad, dtype=np.float64)
    h = np.asarray(kernel, dtype=np.float64)
    xp = np.zeros(x.shape[:-1] + (x.shape[-1] + 2,), dtype=np.float64)
    xp[..., 1:-1] = x
    gk = np.array([np.sum(g * xp[..., j:j + x.shape[-1]]) for j in range(FILTER_LENGTH)])
    gp = np.zeros_like(xp)
    for j in range(FILTER_LENGTH):
        gp[..., j:j + x.shape[-1]] += h[j] * g
    return gp[..., 1:-1].astype(_float_dtype(x), copy=False), gk, float(g.sum())


def _stack_taps(xb, out=None):
    """Rearrange one item ``(C, L)`` into ``(3*C, L)`` shifted copies."""
    c, n = xb.shape
    cols = np.empty((FILTER_LENGTH, c, n), dtype=xb.dtype) if out is None else out
    cols[0, :, 0] = 0
    cols[0, :, 1:] = xb[:, :-1]
    cols[1] = xb
    cols[2, :, :-1] = xb[:, 1:]
    cols[2, :, -1] = 0
    return cols.reshape(FILTER_LENGTH * c, n)


def _flat_weight(weight, dtype):
    cout, cin, taps = weight.shape
    return np.ascontiguousarray(weight.transpose(0, 2, 1).reshape(cout, taps * cin), dtype=dtype)


def _check_bank(x, weight):
    x = np.asarray(x)
    if x.ndim != 3:
        raise InvalidShape(f"expected (batch, channels, samples), got shape {x.shape}")
    if x.shape[-1] == 0:
        raise InvalidLength("signal must contain at least one sample")
    if weight.ndim != 3 or weight.shape[1] != x.shape[1] or weight.shape[2] != FILTER_LENGTH:
        raise InvalidShape(f"weight shape {weight.shape} does not fit input shape {x.shape}")
    return x


def fir_bank(x, weight, offset):
    """Multi-channel FIR filtering.

    Every output channel is the sum over input channels of that channel
    filtered by its own 3-tap kernel, plus one offset per output channel.
    ``weight`` has shape ``(out_channels, in_channels, 3)``.
    """
    weight = np.asarray(weight)
    x = _check_bank(x, weight)
    dtype = _float_dtype(x)
    w2 = _flat_weight(weight, dtype)
    b, cin, n = x.shape
    y = np.empty((b, weight.shape[0], n), dtype=dtype)
    if cin <= DIRECT_MAX_CHANNELS and _compiled(x):
        _kernels.fir_direct(x, weight.astype(dtype, copy=False), np.asarray(offset, dtype=dtype), y)
        return y
    off = np.asarray(offset, dtype=dtype)[:, None]
    for i in range(b):
        np.matmul(w2, _stack_taps(x[i].astype(dtype, copy=False)), out=y[i])
        y[i] += off
    return y


def fir_bank_backward(x, weight, grad, input_grad=True):
    """Adjoint of :func:`fir_bank`; returns ``(grad_x, grad_weight, grad_offset)``.

    ``grad_x`` is None when ``input_grad`` is false (first section).
    """
    weight = np.asarray(weight)
    x = _check_bank(x, weight)
    dtype = _float_dtype(x)
    w2 = _flat_weight(weight, dtype)
    cout, cin, taps = weight.shape
    b, _, n = x.shape
    if not input_grad and cin <= DIRECT_MAX_CHANNELS:
        g = np.ascontiguousarray(grad, dtype=dtype)
        if _compiled(x, g):
            gw, goff = _kernels.fir_direct_weight_grad(x, g)
            return None, gw, goff
    gw2 = np.zeros((cout, taps * cin), dtype=np.float64)
    goff = np.zeros(cout, dtype=np.float64)
    gx = np.empty_like(x, dtype=dtype) if input_grad else None
    for i in range(b):
        g = np.asarray(grad[i], dtype=dtype)
        cols = _stack_taps(x[i].astype(dtype, copy=False))
        gw2 += g @ cols.T
        goff += g.sum(axis=-1, dtype=np.float64)
        if input_grad:
            gc = (w2.T @ g).reshape(taps, cin, n)
            gxi = gc[1]
            gxi[:, :-1] += gc[0, :, 1:]
            gxi[:, 1:] += gc[2, :, :-1]
            gx[i] = gxi
    gw = gw2.reshape(cout, taps, cin).transpose(0, 2, 1)
    return gx, gw, goff


# --------------------------------------------------------------------------
# Gain and bias (folded batch normalization)
# --------------------------------------------------------------------------

def _per_channel(v, x):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        return v
    if x.ndim < 2 or x.shape[-2] != v.shape[0]:
        raise InvalidShape(f"{v.shape[0]} channel values do not fit signal shape {x.shape}")
    return v[:, None]


def apply_gain_bias(x, a, b):
    """``y = a*x + b``, with ``a`` and ``b`` scalars or one value per channel."""
    x = np.asarray(x)
    dtype = _float_dtype(x)
    if _compiled(x) and np.ndim(a) == 1 and np.ndim(b) == 1:
        _per_channel(a, x)
        y = np.empty_like(x)
        _kernels.gain_bias(x, np.asarray(a, np.float64), np.asarray(b, np.float64), y)
        return y
    y = x.astype(dtype, copy=True)
    y *= _per_channel(a, x).astype(dtype)
    y += _per_channel(b, x).astype(dtype)
    return y


def gain_bias_backward(x, a, grad):
    """Return ``(grad_x, grad_a, grad_b)``; parameter grads reduce to a's shape."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    a_ = _per_channel(a, x)
    gx = (g * a_).astype(_float_dtype(np.asarray(grad)), copy=False)
    if a_.ndim == 0:
        return gx, float(np.sum(g * x)), float(np.sum(g))
    axes = tuple(i for i in range(x.ndim) if i != x.ndim - 2)
    return gx, np.sum(g * x, axis=axes), np.sum(g, axis=axes)


# --------------------------------------------------------------------------
# Half-wave rectification
# --------------------------------------------------------------------------

def hwr(x):
    """Half-wave rectification, ``max(x, 0)``."""
    return np.maximum(x, 0)


def hwr_backward(x, grad):
    """Pass the upstream gradient where ``x > 0``; zero elsewhere (including 0)."""
    x = np.asarray(x)
    mask = x if x.dtype == np.bool_ else x > 0
    return np.where(mask, grad, 0).astype(np.asarray(grad).dtype, copy=False)


# --------------------------------------------------------------------------
# Average pooling: length-m averaging filter fused with m-fold sub-sampling
# --------------------------------------------------------------------------

def _check_pool(n, m):
    if m not in POOL_FACTORS:
        raise InvalidShape(f"pool factor must be one of {POOL_FACTORS}, got {m}")
    if n == 0 or n % m:
        raise InvalidLength(f"length {n} is not a positive multiple of {m}")


def avg_pool(x, m):
    """Means of non-overlapping length-``m`` blocks starting at sample 0."""
    x = _check_signal(x)
    _check_pool(x.shape[-1], m)
    dtype = _float_dtype(x)
    if _compiled(x):
        out = np.empty(x.shape[:-1] + (x.shape[-1] // m,), dtype=dtype)
        _kernels.block_mean(x, m, out)
        return out
    blocks = x.reshape(x.shape[:-1] + (x.shape[-1] // m, m))
    if x.ndim < 3:
        return (blocks.sum(axis=-1, dtype=np.float64) / m).astype(dtype)
    out = np.empty(blocks.shape[:-1], dtype=dtype)
    for i in range(x.shape[0]):
        out[i] = blocks[i].sum(axis=-1, dtype=np.float64) / m
    return out


def gain_hwr_pool(x, a, b, m):
    """``avg_pool(hwr(apply_gain_bias(x, a, b)), m)`` in one pass over ``x``."""
    x = _check_signal(x)
    _check_pool(x.shape[-1], m)
    if _compiled(x) and np.ndim(a) == 1 and np.ndim(b) == 1:
        _per_channel(a, x)
        out = np.empty(x.shape[:-1] + (x.shape[-1] // m,), dtype=x.dtype)
        _kernels.gain_relu_pool(x, np.asarray(a, np.float64), np.asarray(b, np.float64), m, out)
        return out
    return avg_pool(hwr(apply_gain_bias(x, a, b)), m)


def avg_pool_backward(grad, m):
    """Each block member receives ``grad / m``."""
    g = np.asarray(grad)
    if _compiled(g):
        out = np.empty(g.shape[:-1] + (g.shape[-1] * m,), dtype=g.dtype)
        _kernels.block_spread(g, m, out)
        return out
    out = np.repeat(g, m, axis=-1)
    out /= m
    return out


# --------------------------------------------------------------------------
# Dense head
# --------------------------------------------------------------------------

def dense_map(v, weight, offset):
    """``y = W v + c`` for one 96-vector or a batch of them (rows)."""
    v = np.asarray(v)
    weight = np.asarray(weight)
    offset = np.asarray(offset)
    if weight.ndim != 2 or v.shape[-1] != weight.shape[1] or offset.shape != (weight.shape[0],):
        raise InvalidShape(
            f"cannot map vector of shape {v.shape} with W {weight.shape} and c {offset.shape}"
        )
    if not np.all(np.isfinite(v)):
        raise InvalidShape("dense input must be finite")
    dtype = _float_dtype(v, weight)
    return (v.astype(dtype) @ weight.astype(dtype).T) + offset.astype(dtype)


def dense_backward(v, weight, grad):
    """Return ``(grad_v, grad_W, grad_c)`` for :func:`dense_map`."""
    v = np.asarray(v)
    g = np.asarray(grad)
    v2 = np.atleast_2d(v).astype(np.float64)
    g2 = np.atleast_2d(g).astype(np.float64)
    gv = (g @ np.asarray(weight)).astype(_float_dtype(v), copy=False)
    return gv, g2.T @ v2, g2.sum(axis=0)


# --------------------------------------------------------------------------
# Batch normalization
# --------------------------------------------------------------------------

@dataclass
class NormParams:
    """Affine batch-normalization parameters and running statistics.

    ``folded()`` gives the equivalent per-channel gain ``a`` and bias ``b``.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def identity(cls, channels, dtype=np.float32, eps=1e-5, momentum=0.1):
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype),
            np.zeros(channels, dtype), np.ones(channels, dtype), eps, momentum,
        )

    def folded(self):
        a = np.asarray(self.gamma, np.float64) / np.sqrt(np.asarray(self.running_var, np.float64) + self.eps)
        b = np.asarray(self.beta, np.float64) - a * np.asarray(self.running_mean, np.float64)
        return a, b


def batch_statistics(x):
    """Per-channel mean and biased variance over (batch, samples), in float64."""
    b, c, n = x.shape
    if b * n < 2:
        raise InvalidShape("train-mode normalization needs at least two values per channel")
    if _compiled(x):
        return _kernels.channel_stats(x)
    count = b * n
    mean = x.sum(axis=(0, 2), dtype=np.float64) / count
    ss = np.zeros(c, dtype=np.float64)
    for i in range(b):
        d = x[i] - mean[:, None]
        ss += np.einsum("ij,ij->i", d, d)
    return mean, ss / count


def batch_norm(x, params, training=False, update_running=True):
    """Normalize ``x`` of shape ``(batch, channels, samples)``.

    Eval mode applies the folded gain and bias.  Train mode normalizes with
    the batch statistics and, when ``update_running``, folds them into the
    running statistics with the configured momentum.
    """
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1] != np.shape(params.gamma)[0]:
        raise InvalidShape(f"expected (batch, {np.shape(params.gamma)[0]}, samples), got {x.shape}")
    if not training:
        a, b = params.folded()
        return apply_gain_bias(x, a, b)
    mean, var = batch_statistics(x)
    invstd = 1.0 / np.sqrt(var + params.eps)
    a = np.asarray(params.gamma, np.float64) * invstd
    y = apply_gain_bias(x, a, np.asarray(params.beta, np.float64) - a * mean)
    if update_running:
        _update_running(params, mean, var, x.shape[0] * x.shape[2])
    return y


def _update_running(params, mean, var, count):
    mom = params.momentum
    unbiased = var * count / max(count - 1, 1)
    rm = (1 - mom) * np.asarray(params.running_mean, np.float64) + mom * mean
    rv = (1 - mom) * np.asarray(params.running_var, np.float64) + mom * unbiased
    params.running_mean[...] = rm
    params.running_var[...] = rv


def batch_norm_backward(x, params, grad, training=False, stats=None, out=None):
    """Return ``(grad_x, grad_gamma, grad_beta)``.

    In train mode the batch statistics of ``x`` are used (pass ``stats`` as
    ``(mean, var)`` to skip recomputing them).  ``out`` may alias ``grad``.
    """
    x = np.asarray(x)
    b, c, n = x.shape
    gamma = np.asarray(params.gamma, np.float64)
    if training:
        mean, var = batch_statistics(x) if stats is None else stats
    else:
        mean = np.asarray(params.running_mean, np.float64)
        var = np.asarray(params.running_var, np.float64)
    invstd = 1.0 / np.sqrt(var + params.eps)
    grad = np.asarray(grad)
    if _compiled(x, grad) and (out is None or _compiled(out, grad)):
        gx = np.empty_like(grad) if out is None else out
        gg, gb = _kernels.norm_backward(x, grad, np.asarray(mean, np.float64), invstd, gamma, training, gx)
        return gx, gg, gb
    a = gamma * invstd
    sg = np.zeros(c, dtype=np.float64)
    sgd = np.zeros(c, dtype=np.float64)
    for i in range(b):
        gi = np.asarray(grad[i], dtype=np.float64)
        sg += gi.sum(axis=-1)
        sgd += np.einsum("ij,ij->i", gi, x[i] - mean[:, None])
    dtype = np.asarray(grad).dtype
    gx = np.empty((b, c, n), dtype=dtype) if out is None else out
    count = b * n
    for i in range(b):
        gi = np.asarray(grad[i], dtype=np.float64)
        if training:
            d = (x[i] - mean[:, None]) * (invstd * invstd * sgd / count)[:, None]
            gi = gi - (sg / count)[:, None] - d
        gx[i] = gi * a[:, None]
    return gx, invstd * sgd, sg


# --------------------------------------------------------------------------
# Layer objects with retained activations
# --------------------------------------------------------------------------

class Layer:
    """A primitive that remembers what its adjoint needs.

    ``forward(x, retain=True)`` keeps the activations; ``backward(grad)``
    consumes them, stores parameter gradients in ``grads`` and returns the
    input gradient.  Calling ``backward`` with nothing retained raises
    :class:`StateError`.
    """

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._saved = None

    def _need_saved(self):
        if self._saved is None:
            raise StateError(f"{type(self).__name__}.backward called without retained activations")
        saved, self._saved = self._saved, None
        return saved

    def release(self):
        self._saved = None


class FirBank(Layer):
    def __init__(self, weight, offset):
        super().__init__()
        self.params = {"weight": weight, "offset": offset}
        self.input_grad = True

    def forward(self, x, retain=False):
        y = fir_bank(x, self.params["weight"], self.params["offset"])
        if retain:
            self._saved = x
        return y

    def backward(self, grad):
        x = self._need_saved()
        gx, gw, goff = fir_bank_backward(x, self.params["weight"], grad, self.input_grad)
        self.grads = {"weight": gw, "offset": goff}
        return gx


class BatchNorm(Layer):
    def __init__(self, norm):
        super().__init__()
        self.norm = norm
        self.params = {"gamma": norm.gamma, "beta": norm.beta}
        self.training = False

    def forward(self, x, retain=False, update_running=True):
        if not self.training:
            y = batch_norm(x, self.norm, training=False)
            stats = None
        else:
            stats = batch_statistics(x)
            invstd = 1.0 / np.sqrt(stats[1] + self.norm.eps)
            a = np.asarray(self.norm.gamma, np.float64) * invstd
            y = apply_gain_bias(x, a, np.asarray(self.norm.beta, np.float64) - a * stats[0])
            if update_running:
                _update_running(self.norm, stats[0], stats[1], x.shape[0] * x.shape[2])
        if retain:
            self._saved = (x, stats)
        return y

    def backward(self, grad, out=None):
        x, stats = self._need_saved()
        gx, gg, gb = batch_norm_backward(x, self.norm, grad, self.training, stats, out=out)
        self.grads = {"gamma": gg, "beta": gb}
        return gx


class HalfWaveRect(Layer):
    def forward(self, x, retain=False, inplace=False):
        if retain:
            self._saved = x > 0
        if inplace:
            return np.maximum(x, 0, out=x)
        return hwr(x)

    def backward(self, grad, inplace=False):
        mask = self._need_saved()
        if inplace:
            grad *= mask
            return grad
        return hwr_backward(mask, grad)


class AvgPool(Layer):
    def __init__(self, m):
        super().__init__()
        self.m = m

    def forward(self, x, retain=False):
        if retain:
            self._saved = True
        return avg_pool(x, self.m)

    def backward(self, grad):
        self._need_saved()
        return avg_pool_backward(grad, self.m)


class ZeroPad(Layer):
    """Append ``after`` zeros (and prepend ``before``) along the sample axis."""

    def __init__(self, before=0, after=1):
        super().__init__()
        self.before, self.after = before, after

    def forward(self, x, retain=False):
        if retain:
            self._saved = True
        width = [(0, 0)] * (x.ndim - 1) + [(self.before, self.after)]
        return np.pad(x, width)

    def backward(self, grad):
        self._need_saved()
        return grad[..., self.before:grad.shape[-1] - self.after]


class Dense(Layer):
    def __init__(self, weight, offset):
        super().__init__()
        self.params = {"weight": weight, "offset": offset}

    def forward(self, v, retain=False):
        if retain:
            self._saved = v
        return dense_map(v, self.params["weight"], self.params["offset"])

    def backward(self, grad):
        v = self._need_saved()
        gv, gw, gc = dense_backward(v, self.params["weight"], grad)
        self.grads = {"weight": gw, "offset": gc}
        return gv
