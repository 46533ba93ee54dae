"""Synthetic degradations, proxy quality targets and corpus assembly.

Recorded noise, codecs and packet-loss concealment are replaced by white
noise at a controlled SNR, a 3.4 kHz narrowband low-pass, peak clipping and
Gilbert-model frame erasures.  Proxy targets (segmental SNR, erased-frame
fraction, log-spectral distance) stand in for full-reference estimators.
"""

from dataclasses import dataclass, field
import logging
import math

import numpy as np
from scipy.signal import firwin, oaconvolve

from . import preprocess as pp
from .errors import InvalidConfig, NoSpeech

log = logging.getLogger(__name__)

FRAME = 320  # 20 ms at 16 kHz
LOWPASS_TAPS = 255
NB_CUTOFF_HZ = 3400.0
SEGSNR_RANGE = (-10.0, 35.0)
SPECDIST_CEILING = 40.0
PROXY_TARGETS = ("SEGSNR", "LOSS", "SPECDIST")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# --------------------------------------------------------------------------
# Impairments
# --------------------------------------------------------------------------

def add_noise_snr(x, snr_db, seed=None):
    """Add white Gaussian noise at ``snr_db`` below the active speech level."""
    x = np.asarray(x, dtype=np.float64)
    speech = 10 ** (pp.active_level(x).active_level_dbov / 10)
    noise = _rng(seed).standard_normal(len(x))
    noise *= math.sqrt(speech / 10 ** (snr_db / 10) / np.mean(noise * noise))
    return x + noise


def _nb_lowpass_kernel():
    return firwin(LOWPASS_TAPS, NB_CUTOFF_HZ, window="hann", fs=pp.SAMPLE_RATE)


def lowpass_nb(x):
    """Linear-phase 3.4 kHz low-pass (255-tap Hann windowed sinc), delay removed."""
    x = np.asarray(x, dtype=np.float64)
    return oaconvolve(x, _nb_lowpass_kernel(), mode="same")


def clip_peak(x, level):
    if not 0 < level <= 1:
        raise InvalidConfig(f"clip level must be in (0, 1], got {level}")
    return np.clip(np.asarray(x, dtype=np.float64), -level, level)


def gilbert_losses(n_frames, rate, burstiness=0.0, seed=None):
    """Frame-loss flags from a two-state Gilbert chain.

    The chain loses every frame in its bad state.  ``rate`` is the
    stationary loss probability and ``burstiness`` the lag-one correlation
    of the loss sequence (0 gives independent losses).
    """
    if not 0 <= rate <= 1 or not 0 <= burstiness < 1:
        raise InvalidConfig("loss rate must be in [0, 1] and burstiness in [0, 1)")
    rng = _rng(seed)
    p_enter = rate * (1 - burstiness)
    p_leave = (1 - rate) * (1 - burstiness)
    u = rng.random(n_frames)
    lost = np.empty(n_frames, dtype=bool)
    state = u[0] < rate
    lost[0] = state
    for i in range(1, n_frames):
        state = (u[i] >= p_leave) if state else (u[i] < p_enter)
        lost[i] = state
    return lost


def drop_frames(x, rate, burstiness=0.0, seed=None):
    """Zero 20 ms frames chosen by :func:`gilbert_losses`."""
    x = np.array(x, dtype=np.float64)
    n_frames = -(-len(x) // FRAME)
    lost = gilbert_losses(n_frames, rate, burstiness, seed)
    mask = np.repeat(lost, FRAME)[:len(x)]
    x[mask] = 0.0
    return x


@dataclass(frozen=True)
class Condition:
    ident: str
    kind: str  # clean | noise | lowpass | clip | loss
    snr_db: float = None
    clip_level: float = None
    loss_rate: float = None
    burstiness: float = 0.0

    def apply(self, x, seed=None):
        if self.kind == "clean":
            return np.asarray(x, dtype=np.float64).copy()
        if self.kind == "noise":
            return add_noise_snr(x, self.snr_db, seed)
        if self.kind == "lowpass":
            return lowpass_nb(x)
        if self.kind == "clip":
            return clip_peak(x, self.clip_level)
        if self.kind == "loss":
            return drop_frames(x, self.loss_rate, self.burstiness, seed)
        raise InvalidConfig(f"unknown impairment kind {self.kind!r}")


def parse_condition(text):
    """Parse ``clean``, ``noise:SNR``, ``lowpass``, ``clip:LEVEL`` or ``loss:RATE[:BURST]``."""
    parts = text.strip().split(":")
    kind = parts[0]
    try:
        args = [float(p) for p in parts[1:]]
        if kind == "clean" and not args:
            return Condition("clean", "clean")
        if kind == "noise" and len(args) == 1:
            return Condition(f"noise{args[0]:g}dB", "noise", snr_db=args[0])
        if kind == "lowpass" and not args:
            return Condition("nb3400", "lowpass")
        if kind == "clip" and len(args) == 1:
            return Condition(f"clip{args[0]:g}", "clip", clip_level=args[0])
        if kind == "loss" and len(args) in (1, 2):
            burst = args[1] if len(args) == 2 else 0.0
            return Condition(f"loss{args[0]:g}b{burst:g}", "loss", loss_rate=args[0], burstiness=burst)
    except (IndexError, ValueError):
        pass
    raise InvalidConfig(f"cannot parse condition {text!r}")


DEFAULT_CONDITIONS = tuple(parse_condition(c) for c in (
    "clean", "noise:5", "noise:15", "noise:25", "lowpass", "clip:0.05", "loss:0.1", "loss:0.3:0.5",
))


# --------------------------------------------------------------------------
# Proxy targets
# --------------------------------------------------------------------------

def _frames(x):
    n = len(x) // FRAME
    return np.asarray(x[:n * FRAME], dtype=np.float64).reshape(n, FRAME)


def _active_frames(clean):
    """Frames whose clean power is within the meter's 15.9 dB margin of the active level."""
    fc = _frames(clean)
    power = np.mean(fc * fc, axis=1)
    try:
        level = pp.active_level(clean).active_level_dbov
    except NoSpeech:
        return np.zeros(len(fc), dtype=bool)
    with np.errstate(divide="ignore"):
        return 10 * np.log10(power) >= level - pp.MARGIN_DB


def segmental_snr(clean, impaired):
    """Mean per-frame SNR over active clean frames, each clipped to [-10, 35] dB."""
    fc, fi = _frames(clean), _frames(impaired)
    active = _active_frames(clean)
    if not active.any():
        return SEGSNR_RANGE[0]
    sig = np.sum(fc * fc, axis=1)[active]
    err = np.sum((fi - fc) ** 2, axis=1)[active]
    with np.errstate(divide="ignore"):
        snr = 10 * np.log10(sig / err)
    return float(np.mean(np.clip(snr, *SEGSNR_RANGE)))


def zeroed_fraction(clean, impaired):
    """Fraction of non-silent clean frames that are all zeros after impairment."""
    fc, fi = _frames(clean), _frames(impaired)
    live = np.any(fc != 0, axis=1)
    if not live.any():
        return 0.0
    return float(np.mean(np.all(fi[live] == 0, axis=1)))


def spectral_distortion(clean, impaired):
    """RMS log-spectral distance in dB over active frames, capped at 40 dB."""
    active = _active_frames(clean)
    if not active.any():
        return 0.0
    win = np.hanning(FRAME)
    floor = 1e-10
    pc = np.abs(np.fft.rfft(_frames(clean)[active] * win, axis=1)) ** 2 + floor
    pi = np.abs(np.fft.rfft(_frames(impaired)[active] * win, axis=1)) ** 2 + floor
    d = 10 * np.log10(pc / pi)
    return float(min(np.mean(np.sqrt(np.mean(d * d, axis=1))), SPECDIST_CEILING))


def proxy_targets(clean, impaired):
    """Native-unit proxy values keyed by target name."""
    return {
        "SEGSNR": segmental_snr(clean, impaired),
        "LOSS": zeroed_fraction(clean, impaired),
        "SPECDIST": spectral_distortion(clean, impaired),
    }


# --------------------------------------------------------------------------
# Synthetic sources and corpus assembly
# --------------------------------------------------------------------------

def synth_speechlike(seed=None, seconds=3.0, sample_rate=pp.SAMPLE_RATE):
    """A speech-like test signal of voiced tone bursts and fricative noise bursts.

    Bursts of 80-350 ms alternate with 30-220 ms gaps and occasional
    pauses of up to 0.7 s.  Voiced bursts are
    harmonic complexes with a gliding fundamental and a falling spectral
    tilt; unvoiced bursts are high-passed white noise.
    """
    rng = _rng(seed)
    n = int(round(seconds * sample_rate))
    out = np.zeros(n)
    t = rng.uniform(0.0, 0.1)
    while t < seconds:
        dur = rng.uniform(0.08, 0.35)
        i0, i1 = int(t * sample_rate), min(int((t + dur) * sample_rate), n)
        m = i1 - i0
        if m > 16:
            tt = np.arange(m) / sample_rate
            if rng.random() < 0.75:
                f0 = rng.uniform(90, 260) * (1 + rng.uniform(-0.15, 0.15) * tt / dur)
                phase = 2 * np.pi * np.cumsum(f0) / sample_rate
                tilt = rng.uniform(6, 12)
                burst = sum(
                    10 ** (-tilt * math.log2(h) / 20) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
                    for h in range(1, int(7000 / f0.max()) + 1)
                )
            else:
                noise = rng.standard_normal(m + 2)
                burst = np.diff(noise, 2) * 0.5
            ramp = min(m // 4, int(0.02 * sample_rate))
            env = np.ones(m)
            env[:ramp] = np.sin(np.linspace(0, np.pi / 2, ramp)) ** 2
            env[m - ramp:] = env[:ramp][::-1]
            burst = burst * env / (np.sqrt(np.mean(burst ** 2)) + 1e-12)
            out[i0:i1] += burst * 10 ** (rng.uniform(-6, 6) / 20)
        gap = rng.uniform(0.25, 0.7) if rng.random() < 0.15 else rng.uniform(0.03, 0.22)
        t += dur + gap
    return pp.normalize_level(out).samples


def synth_clean_segments(count, seed=0, prefix="syn"):
    """``count`` clean 3 s segments at -26 dBov, each with SAF >= 0.5."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        x = synth_speechlike(rng)
        rep = pp.active_level(x)
        if rep.saf < 0.5:
            continue
        out.append(pp.SegmentRecord(x.astype(np.float32), rep.saf, rep.active_level_dbov,
                                    source=f"{prefix}{len(out):05d}"))
    return out


def impair_segment(clean, condition, seed=None):
    """Apply one condition; returns ``(impaired_record_samples, level_report, proxies)``."""
    clean = np.asarray(clean, dtype=np.float64)
    y = condition.apply(clean, seed)
    proxies = proxy_targets(clean, y)
    try:
        w = pp.normalize_level(y)
        return w.samples, w.level, proxies
    except NoSpeech:
        log.warning("condition %s left no active speech; stored without normalization", condition.ident)
        return y, None, proxies


def make_corpus(clean, conditions, seed=0, target_names=PROXY_TARGETS):
    """Cross every clean segment with every condition.

    Each record carries its condition id and the proxy targets scaled to
    [-1, 1].  Impaired segments are re-normalized to -26 dBov.  Each
    (segment, condition) pair draws from its own seed-derived generator.
    """
    records = []
    for i, seg in enumerate(clean):
        samples = seg.samples if isinstance(seg, pp.SegmentRecord) else np.asarray(seg)
        source = seg.source if isinstance(seg, pp.SegmentRecord) else f"seg{i:05d}"
        for j, cond in enumerate(conditions):
            rng = np.random.default_rng([seed, i, j])
            y, rep, proxies = impair_segment(samples, cond, rng)
            targets = {}
            for name in target_names:
                spec = pp.TARGETS[name]
                targets[name] = spec.to_unit(float(np.clip(proxies[name], spec.lo, spec.hi)))
            records.append(pp.SegmentRecord(
                np.asarray(y, dtype=np.float32),
                rep.saf if rep else 0.0,
                rep.active_level_dbov if rep else -np.inf,
                source=source, condition=cond.ident, targets=targets,
                split=getattr(seg, "split", ""),
            ))
    return records


def assign_splits(records, fractions=(("train", 0.5), ("test", 0.4), ("val", 0.1)), seed=0):
    """Tag records with a split, keeping all records of one source together."""
    sources = sorted({r.source for r in records})
    order = np.random.default_rng(seed).permutation(len(sources))
    bounds = np.cumsum([f for _, f in fractions]) * len(sources)
    tag = {}
    for rank, idx in enumerate(order):
        k = int(np.searchsorted(bounds, rank, side="right"))
        tag[sources[idx]] = fractions[min(k, len(fractions) - 1)][0]
    for r in records:
        r.split = tag[r.source]
    return records
