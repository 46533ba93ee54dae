"""The network viewed as a chain of elementary signal-processing steps.

Each section runs as six stages: FIR filtering (kernels only), gain,
bias (the conv offset pushed through the gain, plus the folded
normalization bias), half-wave rectification, the length-m averaging
filter, and m-fold sub-sampling.  ``dc_flow`` records the mean of every
channel after every stage.  The module also classifies 3-tap kernels by
magnitude response and demonstrates how rectification and pooling move
spectral content.
"""

from collections import Counter
from dataclasses import dataclass, field
import logging

import numpy as np

from . import dsp
from .errors import DegenerateInput, EmptyResult, StateError

log = logging.getLogger(__name__)

STAGES = ("fir", "gain", "bias", "hwr", "pool_fir", "subsample")
FILTER_CLASSES = ("lowpass", "highpass", "bandpass", "bandstop")
RESPONSE_POINTS = 512
EDGE_RATIO = 0.9


# --------------------------------------------------------------------------
# Decomposed execution and DC flow
# --------------------------------------------------------------------------

@dataclass
class DcFlowMap:
    """Per-channel means after every stage; one row per stage output."""

    values: np.ndarray
    labels: list
    latent: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    def row(self, label):
        return self.values[self.labels.index(label)]


def _pool_fir(h, m):
    # circular length-m moving average; sample k averages h[k-m+1..k]
    z = h.copy()
    for t in range(1, m):
        z += np.roll(h, t, axis=-1)
    return z / m


def decompose(net, segment):
    """Run ``net`` stage by stage in float64.

    Returns ``(labels, signals)`` where ``signals[i]`` has shape
    ``(channels, samples)``.  The last signal is the latent vector as a
    ``(96, 1)`` array.
    """
    if net.training:
        raise StateError("decomposed execution requires eval mode")
    x, single = net._check_input(segment)
    if not single:
        raise ValueError("decomposed execution takes one segment")
    h = x[0].astype(np.float64)
    labels, signals = ["input"], [h]
    for s in net.sections:
        tag = f"S{s.spec.index}"
        if s.pad is not None:
            h = np.pad(h, [(0, 0), (s.pad.before, s.pad.after)])
        w = s.conv.params["weight"].astype(np.float64)
        off = s.conv.params["offset"].astype(np.float64)
        a, b = s.norm.norm.folded()
        y = dsp.fir_bank(h[None], w, np.zeros(len(off)))[0]
        g = y * a[:, None]
        z = g + (a * off + b)[:, None]
        r = np.maximum(z, 0.0)
        p = _pool_fir(r, s.spec.pool)
        h = p[:, s.spec.pool - 1::s.spec.pool]
        for stage, sig in zip(STAGES, (y, g, z, r, p, h)):
            labels.append(f"{tag}.{stage}")
            signals.append(sig)
    return labels, signals


def dc_flow(net, segment):
    """DC (mean) of every channel after every stage for one segment.

    The input row repeats the input channel means across all columns.
    """
    labels, signals = decompose(net, segment)
    width = net.config.channels
    rows = []
    for sig in signals:
        dc = sig.mean(axis=-1)
        if len(dc) != width:
            dc = np.resize(dc, width)
        rows.append(dc)
    return DcFlowMap(np.stack(rows), labels, signals[-1][:, 0].copy())


# --------------------------------------------------------------------------
# Filter classification
# --------------------------------------------------------------------------

@dataclass
class FilterClass:
    kind: str
    omega: np.ndarray
    magnitude: np.ndarray


_OMEGA = np.linspace(0.0, np.pi, RESPONSE_POINTS)
_BASIS = np.exp(-1j * np.outer(np.arange(dsp.FILTER_LENGTH), _OMEGA))


def _magnitudes(kernels):
    return np.abs(np.asarray(kernels, dtype=np.float64) @ _BASIS)


def _classify_rows(mag):
    g0, gpi = mag[:, 0], mag[:, -1]
    gmax = mag.max(axis=1)
    tol = 1e-12 * gmax
    interior_peak = mag[:, 1:-1].max(axis=1) > np.maximum(g0, gpi) + tol
    kinds = np.full(len(mag), "bandstop", dtype=object)
    bandpass = interior_peak & (g0 < EDGE_RATIO * gmax) & (gpi < EDGE_RATIO * gmax)
    highpass = (gpi >= gmax - tol) & (g0 < EDGE_RATIO * gpi)
    lowpass = (g0 >= gmax - tol) & (gpi < EDGE_RATIO * g0)
    kinds[bandpass] = "bandpass"
    kinds[highpass] = "highpass"
    kinds[lowpass] = "lowpass"
    return kinds


def classify_filter(kernel):
    """Classify a 3-tap kernel by its magnitude response on 512 points of [0, pi].

    With g0 = |H(0)|, gpi = |H(pi)| and gmax the grid maximum: lowpass when
    g0 is the maximum and gpi < 0.9 g0; highpass symmetrically; bandpass
    when the maximum is interior and both edges are below 0.9 gmax;
    bandstop otherwise (flat responses included).
    """
    h = np.asarray(kernel, dtype=np.float64)
    if h.shape != (dsp.FILTER_LENGTH,):
        raise ValueError(f"kernel must have {dsp.FILTER_LENGTH} taps")
    if not np.any(h):
        raise DegenerateInput("cannot classify an all-zero kernel")
    mag = _magnitudes(h[None])
    return FilterClass(str(_classify_rows(mag)[0]), _OMEGA.copy(), mag[0])


@dataclass
class FilterCensus:
    counts: dict
    total: int
    skipped: int = 0
    by_section: dict = field(default_factory=dict)

    @property
    def fractions(self):
        return {k: self.counts[k] / self.total for k in FILTER_CLASSES}


def filter_census(net, chunk=4096):
    """Class counts over every (output, input) kernel of every section."""
    counts, by_section, skipped = Counter(), {}, 0
    for s in net.sections:
        w = s.conv.params["weight"].astype(np.float64).reshape(-1, dsp.FILTER_LENGTH)
        nonzero = np.any(w != 0, axis=1)
        skipped += int(np.count_nonzero(~nonzero))
        w = w[nonzero]
        local = Counter()
        for i in range(0, len(w), chunk):
            local.update(_classify_rows(_magnitudes(w[i:i + chunk])))
        by_section[f"S{s.spec.index}"] = {k: local[k] for k in FILTER_CLASSES}
        counts.update(local)
    if skipped:
        log.warning("skipped %d all-zero kernels", skipped)
    total = sum(counts[k] for k in FILTER_CLASSES)
    if total == 0:
        raise EmptyResult("no classifiable kernels")
    return FilterCensus({k: counts[k] for k in FILTER_CLASSES}, total, skipped, by_section)


# --------------------------------------------------------------------------
# Two-tone demonstration
# --------------------------------------------------------------------------

def amplitude_spectrum(x):
    """One-sided amplitude spectrum: a unit sine at an exact bin gives 1."""
    x = np.asarray(x, dtype=np.float64)
    mag = np.abs(np.fft.rfft(x)) / len(x)
    mag[1:] *= 2.0
    if len(x) % 2 == 0:
        mag[-1] /= 2.0
    return mag


@dataclass
class TwoToneResult:
    freqs: np.ndarray
    input: np.ndarray
    hwr: np.ndarray
    separate: np.ndarray
    pooled_freqs: np.ndarray
    pooled: np.ndarray
    intermod_db: float
    alias_attenuation_db: float
    alias_tone_hz: float


def _db(a, b, floor=1e-300):
    return float(20.0 * np.log10(max(a, floor) / max(b, floor)))


def two_tone_demo(f1=345.0, f2=6789.0, m=2, sample_rate=16000, seconds=1.0, amplitude=0.5):
    """Spectra of two tones before rectification, after it and after pooling.

    One second of signal gives 1 Hz bins.  ``intermod_db`` compares the
    f2 - f1 line in HWR(x1 + x2) with the same line in HWR(x1) + HWR(x2).
    ``alias_attenuation_db`` is the loss of a tone 1 Hz above the pooled
    Nyquist frequency on its way to the alias below it.
    """
    nyq = sample_rate / 2
    if not (0 < f1 < nyq and 0 < f2 < nyq):
        raise ValueError("tone frequencies must lie between 0 and the Nyquist frequency")
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    x1 = amplitude * np.sin(2 * np.pi * f1 * t)
    x2 = amplitude * np.sin(2 * np.pi * f2 * t)
    x = x1 + x2
    r = np.maximum(x, 0.0)
    sep = np.maximum(x1, 0.0) + np.maximum(x2, 0.0)
    pooled = dsp.avg_pool(r[: len(r) // m * m], m)
    freqs = np.fft.rfftfreq(n, 1 / sample_rate)
    spec_r, spec_sep = amplitude_spectrum(r), amplitude_spectrum(sep)
    bin_im = int(np.argmin(np.abs(freqs - abs(f2 - f1))))
    im = _db(spec_r[bin_im], spec_sep[bin_im])

    pooled_rate = sample_rate / m
    tone = pooled_rate / 2 + 1.0
    xt = np.cos(2 * np.pi * tone * t)
    pt = dsp.avg_pool(xt[: n // m * m], m)
    pf = np.fft.rfftfreq(len(pt), 1 / pooled_rate)
    ps = amplitude_spectrum(pt)
    alias_bin = int(np.argmin(np.abs(pf - (pooled_rate - tone))))
    att = _db(1.0, ps[alias_bin])
    return TwoToneResult(freqs, amplitude_spectrum(x), spec_r, spec_sep, pf,
                         amplitude_spectrum(pooled), im, att, tone)


# --------------------------------------------------------------------------
# Condition fingerprints
# --------------------------------------------------------------------------

def condition_fingerprint(net, groups):
    """Mean latent vector per condition.

    ``groups`` maps a condition id to a list of segments (arrays or
    records).  Empty groups are skipped with a warning.  Returns
    ``(condition_ids, matrix)`` with one 96-value row per condition.
    """
    if net.training:
        raise StateError("fingerprints require eval mode")
    ids, rows = [], []
    for cond, items in groups.items():
        if not items:
            log.warning("condition %s has no segments; skipped", cond)
            continue
        x = np.stack([getattr(it, "samples", it) for it in items]).astype(net.dtype, copy=False)
        x = np.repeat(x[:, None, :], net.config.input_channels, axis=1)
        ids.append(cond)
        rows.append(net.latent(x).astype(np.float64).mean(axis=0))
    if not rows:
        raise EmptyResult("no condition has any segments")
    return ids, np.stack(rows)


def group_by_condition(records):
    groups = {}
    for r in records:
        groups.setdefault(r.condition, []).append(r)
    return groups
