"""WAWEnet assembly: thirteen convolutional sections and a dense head.

A section is an optional zero pad, a 96-channel 3-tap convolution, batch
normalization, ReLU and average pooling.  Sections S1-S13 shrink 48,000
input samples to a single sample in each of 96 channels; the dense head
S14 maps those 96 values to ``n_targets`` estimates.
"""

from dataclasses import dataclass, field, replace
import logging

import numpy as np

from . import dsp
from .errors import InvalidConfig, InvalidShape, StateError

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
INPUT_LENGTH = 48000
CHANNELS = 96


@dataclass(frozen=True)
class SectionSpec:
    index: int
    kind: str  # "ConvA" or "PConvA"
    pool: int
    pad_after: int
    l_in: int  # samples per channel entering the convolution (after padding)
    l_out: int
    rate_hz: float  # effective sample rate of the section input
    spacing_ms: float


def _table_one():
    pools = (4, 2, 2, 4, 2, 2, 2, 2, 2, 2, 2, 2, 3)
    padded = {6, 9}
    rows, n, rate = [], INPUT_LENGTH, float(SAMPLE_RATE)
    for i, k in enumerate(pools, start=1):
        pad = 1 if i in padded else 0
        l_in = n + pad
        rows.append(SectionSpec(i, "PConvA" if pad else "ConvA", k, pad, l_in, l_in // k,
                                rate, 1000.0 / rate))
        n, rate = l_in // k, rate / k
    return tuple(rows)


TABLE_I = _table_one()


@dataclass(frozen=True)
class ModelConfig:
    """Shape of a network.  The defaults are the published architecture."""

    input_channels: int = 1
    n_targets: int = 1
    channels: int = CHANNELS
    sections: tuple = TABLE_I
    input_length: int = INPUT_LENGTH
    eps: float = 1e-5
    momentum: float = 0.1

    def validate(self, allow_custom=False):
        if self.input_channels not in (1, 2):
            raise InvalidConfig(f"input_channels must be 1 or 2, got {self.input_channels}")
        if self.n_targets < 1:
            raise InvalidConfig(f"n_targets must be >= 1, got {self.n_targets}")
        if self.eps <= 0 or not 0 < self.momentum <= 1:
            raise InvalidConfig("normalization eps must be > 0 and momentum in (0, 1]")
        n = self.input_length
        for s in self.sections:
            if s.pool not in dsp.POOL_FACTORS:
                raise InvalidConfig(f"S{s.index}: pool factor {s.pool} not in {dsp.POOL_FACTORS}")
            if s.l_in != n + s.pad_after or s.l_in % s.pool or s.l_out != s.l_in // s.pool:
                raise InvalidConfig(f"S{s.index}: lengths {s.l_in}->{s.l_out} do not chain from {n}")
            n = s.l_out
        if not self.sections or n != 1:
            raise InvalidConfig("sections must reduce the input to one sample per channel")
        if not allow_custom and (
            self.channels != CHANNELS or self.sections != TABLE_I or self.input_length != INPUT_LENGTH
        ):
            raise InvalidConfig("only the 96-channel, 13-section, 48,000-sample layout is supported")
        return self


def custom_sections(input_length, pools, padded=()):
    """Build a section table for a small test network."""
    rows, n, rate = [], input_length, float(SAMPLE_RATE)
    for i, k in enumerate(pools, start=1):
        pad = 1 if i in padded else 0
        l_in = n + pad
        rows.append(SectionSpec(i, "PConvA" if pad else "ConvA", k, pad, l_in, l_in // k,
                                rate, 1000.0 / rate))
        n, rate = l_in // k, rate / k
    return tuple(rows)


class Section:
    """Pad, FIR bank, batch norm, HWR and average pooling."""

    def __init__(self, spec, weight, offset, norm):
        self.spec = spec
        self.pad = dsp.ZeroPad(0, spec.pad_after) if spec.pad_after else None
        self.conv = dsp.FirBank(weight, offset)
        self.norm = dsp.BatchNorm(norm)
        self.relu = dsp.HalfWaveRect()
        self.pool = dsp.AvgPool(spec.pool)

    def forward(self, x, retain=False, update_running=True):
        if self.pad is not None:
            x = self.pad.forward(x, retain)
        y = self.conv.forward(x, retain)
        if not retain and not self.norm.training:
            return dsp.gain_hwr_pool(y, *self.norm.norm.folded(), self.spec.pool)
        z = self.norm.forward(y, retain, update_running=update_running)
        del y
        z = self.relu.forward(z, retain, inplace=True)
        return self.pool.forward(z, retain)

    def backward(self, grad):
        g = self.pool.backward(grad)
        g = self.relu.backward(g, inplace=True)
        g = self.norm.backward(g, out=g)
        g = self.conv.backward(g)
        if self.pad is not None and g is not None:
            g = self.pad.backward(g)
        return g

    def release(self):
        for layer in (self.pad, self.conv, self.norm, self.relu, self.pool):
            if layer is not None:
                layer.release()


class WaweNet:
    """Weights and execution of a full network."""

    def __init__(self, config, sections, head_weight, head_offset):
        self.config = config
        self.sections = sections
        self.head = dsp.Dense(head_weight, head_offset)
        self.sections[0].conv.input_grad = False
        self.training = False

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        """Trainable arrays in forward-execution order."""
        out = {}
        for s in self.sections:
            p = f"s{s.spec.index}"
            out[f"{p}.conv.weight"] = s.conv.params["weight"]
            out[f"{p}.conv.offset"] = s.conv.params["offset"]
            out[f"{p}.norm.gamma"] = s.norm.norm.gamma
            out[f"{p}.norm.beta"] = s.norm.norm.beta
        out["head.weight"] = self.head.params["weight"]
        out["head.offset"] = self.head.params["offset"]
        return out

    def named_buffers(self):
        out = {}
        for s in self.sections:
            p = f"s{s.spec.index}"
            out[f"{p}.norm.running_mean"] = s.norm.norm.running_mean
            out[f"{p}.norm.running_var"] = s.norm.norm.running_var
        return out

    def state(self):
        """Parameters and running statistics in weight-file order."""
        out = {}
        params, bufs = self.named_parameters(), self.named_buffers()
        for s in self.sections:
            p = f"s{s.spec.index}"
            for name in ("conv.weight", "conv.offset", "norm.gamma", "norm.beta"):
                out[f"{p}.{name}"] = params[f"{p}.{name}"]
            for name in ("norm.running_mean", "norm.running_var"):
                out[f"{p}.{name}"] = bufs[f"{p}.{name}"]
        out["head.weight"] = params["head.weight"]
        out["head.offset"] = params["head.offset"]
        return out

    def parameter_count(self):
        return int(sum(a.size for a in self.named_parameters().values()))

    @property
    def dtype(self):
        return self.head.params["weight"].dtype

    def astype(self, dtype):
        """Copy of the network with every array cast to ``dtype``."""
        st = {k: np.array(v, dtype=dtype) for k, v in self.state().items()}
        return from_state(self.config, st)

    def copy(self):
        return self.astype(self.dtype)

    def train(self, mode=True):
        self.training = mode
        for s in self.sections:
            s.norm.training = mode
        return self

    def eval(self):
        return self.train(False)

    # -- execution ----------------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x)
        cfg = self.config
        single = x.ndim == 2
        if x.ndim == 1 and cfg.input_channels == 1:
            x, single = x[None, None, :], True
        elif single:
            x = x[None]
        if x.ndim != 3 or x.shape[1] != cfg.input_channels or x.shape[2] != cfg.input_length:
            raise InvalidShape(
                f"expected (batch, {cfg.input_channels}, {cfg.input_length}) input, got {np.shape(x)}"
            )
        return x.astype(self.dtype, copy=False), single

    def forward(self, x, want_latent=False, chunk=16, trace=None):
        """Estimates for ``x`` of shape ``(channels, samples)`` or a batch.

        Eval-mode normalization only.  Returns the ``n_targets`` estimates
        (per item for batched input), plus the 96-value latent vectors when
        ``want_latent`` is set.  ``trace`` (a list) receives each section's
        output length.
        """
        if self.training:
            raise StateError("forward() requires eval mode; use train_forward() while training")
        x, single = self._check_input(x)
        est, lat = [], []
        for start in range(0, x.shape[0], chunk):
            h = x[start:start + chunk]
            for s in self.sections:
                h = s.forward(h)
                if trace is not None and start == 0:
                    trace.append(h.shape[-1])
                if h.shape[-1] != s.spec.l_out:
                    raise InvalidShape(f"S{s.spec.index} produced {h.shape[-1]} samples, expected {s.spec.l_out}")
            v = h[:, :, 0]
            lat.append(v)
            est.append(self.head.forward(v))
        est, lat = np.concatenate(est), np.concatenate(lat)
        if single:
            est, lat = est[0], lat[0]
        return (est, lat) if want_latent else est

    def latent(self, x, chunk=16):
        return self.forward(x, want_latent=True, chunk=chunk)[1]

    def train_forward(self, x, update_running=True):
        """Train-mode forward over one batch, retaining activations for ``backward``."""
        if not self.training:
            raise StateError("train_forward() requires train mode")
        x, _ = self._check_input(x)
        h = x
        for s in self.sections:
            h = s.forward(h, retain=True, update_running=update_running)
        return self.head.forward(h[:, :, 0], retain=True)

    def backward(self, grad):
        """Propagate d(loss)/d(estimates) and return gradients by parameter name."""
        g = self.head.backward(np.asarray(grad, dtype=self.dtype))
        grads = {"head.weight": self.head.grads["weight"], "head.offset": self.head.grads["offset"]}
        g = g[:, :, None]
        for s in reversed(self.sections):
            g = s.backward(g)
            p = f"s{s.spec.index}"
            grads[f"{p}.conv.weight"] = s.conv.grads["weight"]
            grads[f"{p}.conv.offset"] = s.conv.grads["offset"]
            grads[f"{p}.norm.gamma"] = s.norm.grads["gamma"]
            grads[f"{p}.norm.beta"] = s.norm.grads["beta"]
        order = self.named_parameters()
        return {k: grads[k] for k in order}

    def release(self):
        for s in self.sections:
            s.release()
        self.head.release()


def closed_form_count(input_channels=1, n_targets=1, channels=CHANNELS, n_sections=13):
    """Trainable parameter count of a network without building it."""
    first = channels * input_channels * dsp.FILTER_LENGTH + channels
    rest = (n_sections - 1) * (channels * channels * dsp.FILTER_LENGTH + channels)
    norms = n_sections * 2 * channels
    head = n_targets * channels + n_targets
    return first + rest + norms + head


def build(config=None, seed=0, dtype=np.float32, allow_custom=False):
    """Kaiming-normal initialized network; deterministic for a given seed."""
    config = (config or ModelConfig()).validate(allow_custom)
    rng = np.random.default_rng(seed)
    sections, cin = [], config.input_channels
    for spec in config.sections:
        fan_in = cin * dsp.FILTER_LENGTH
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(config.channels, cin, dsp.FILTER_LENGTH))
        norm = dsp.NormParams.identity(config.channels, dtype, config.eps, config.momentum)
        sections.append(Section(spec, w.astype(dtype), np.zeros(config.channels, dtype), norm))
        cin = config.channels
    hw = rng.normal(0.0, np.sqrt(2.0 / config.channels), size=(config.n_targets, config.channels))
    net = WaweNet(config, sections, hw.astype(dtype), np.zeros(config.n_targets, dtype))
    assert net.parameter_count() == closed_form_count(
        config.input_channels, config.n_targets, config.channels, len(config.sections))
    return net


def from_state(config, state):
    """Rebuild a network from arrays named as in :meth:`WaweNet.state`."""
    sections = []
    for spec in config.sections:
        p = f"s{spec.index}"
        norm = dsp.NormParams(state[f"{p}.norm.gamma"], state[f"{p}.norm.beta"],
                              state[f"{p}.norm.running_mean"], state[f"{p}.norm.running_var"],
                              config.eps, config.momentum)
        sections.append(Section(spec, state[f"{p}.conv.weight"], state[f"{p}.conv.offset"], norm))
    return WaweNet(config, sections, state["head.weight"], state["head.offset"])


def adapt(net, n_targets, input_channels):
    """Grow the head to ``n_targets`` rows and/or S1 to two input channels.

    Head rows are replicated (row ``i`` copies source row ``i mod N``); for
    two inputs every S1 kernel is duplicated, unscaled, along the input
    axis.  Everything else is copied.
    """
    cfg = net.config
    if n_targets < cfg.n_targets or input_channels < cfg.input_channels:
        raise InvalidConfig("adapt can only grow the head or the input channels")
    new_cfg = replace(cfg, n_targets=n_targets, input_channels=input_channels)
    new_cfg.validate(allow_custom=True)
    st = {k: v.copy() for k, v in net.state().items()}
    if n_targets != cfg.n_targets:
        rows = np.arange(n_targets) % cfg.n_targets
        st["head.weight"] = st["head.weight"][rows].copy()
        st["head.offset"] = st["head.offset"][rows].copy()
    if input_channels != cfg.input_channels:
        w = st["s1.conv.weight"]
        st["s1.conv.weight"] = np.concatenate([w] * (input_channels // cfg.input_channels), axis=1)
    out = from_state(new_cfg, st)
    return out.train(net.training)


def describe(net):
    """Per-section shape and parameter report (Table I plus counts)."""
    rows = []
    for s in net.sections:
        conv = s.conv.params["weight"].size + s.conv.params["offset"].size
        norm = s.norm.norm.gamma.size + s.norm.norm.beta.size
        sp = s.spec
        rows.append({
            "section": f"S{sp.index}", "type": f"{'P ' if sp.pad_after else ''}Conv A-{sp.pool}",
            "pool": sp.pool, "pad_after": sp.pad_after, "rate_hz": sp.rate_hz,
            "spacing_ms": sp.spacing_ms, "l_in": sp.l_in, "l_out": sp.l_out,
            "conv_params": conv, "norm_params": norm,
        })
    head = net.head.params["weight"].size + net.head.params["offset"].size
    rows.append({
        "section": f"S{len(net.sections) + 1}", "type": "Dense", "pool": None, "pad_after": 0,
        "rate_hz": None, "spacing_ms": None, "l_in": net.config.channels,
        "l_out": net.config.n_targets, "conv_params": 0, "norm_params": 0, "dense_params": head,
    })
    totals = {
        "conv": sum(r["conv_params"] for r in rows),
        "norm": sum(r["norm_params"] for r in rows),
        "dense": head,
    }
    totals["total"] = totals["conv"] + totals["norm"] + totals["dense"]
    return {"rows": rows, "totals": totals}
