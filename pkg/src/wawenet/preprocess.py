"""Level measurement, normalization, segmentation and target scaling.

The level meter follows the structure of the P.56 method-B speech
voltmeter: a doubly smoothed magnitude envelope, an activity decision per
threshold with a hangover, and a 15.9 dB margin between the active level
and the threshold that produced it.  Levels are in dB relative to the
overload point (dBov): 0 dBov is the RMS of a full-scale square wave.
"""

from dataclasses import dataclass, field
import logging
import math

import numpy as np
from scipy.ndimage import maximum_filter1d
from scipy.signal import lfilter

from .errors import EmptyResult, NoSpeech, RangeError

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
SEGMENT_LENGTH = 48000
HOP_LENGTH = 24000
TARGET_DBOV = -26.0

ENVELOPE_TIME_CONSTANT = 0.03
HANGOVER_SECONDS = 0.2
MARGIN_DB = 15.9
LOWEST_THRESHOLD_DB = 20 * math.log10(2.0 ** -16)


@dataclass
class LevelReport:
    active_level_dbov: float
    saf: float
    long_run_rms_dbov: float
    threshold_dbov: float


@dataclass
class Waveform:
    """Mono samples in [-1, 1] with their rate and level metadata."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    level: LevelReport = None
    gain: float = 1.0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)


@dataclass
class SegmentRecord:
    samples: np.ndarray
    saf: float
    active_level_dbov: float
    source: str = ""
    offset: int = 0
    condition: str = ""
    targets: dict = field(default_factory=dict)
    split: str = ""


def _samples(x):
    if isinstance(x, Waveform):
        return np.asarray(x.samples, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def _held_envelope(x, sample_rate):
    """Envelope after two one-pole smoothers, held for the hangover time.

    A sample is active at threshold ``c`` exactly when the held envelope is
    at least ``c``: the hold is a trailing maximum over ``hangover + 1``
    samples.
    """
    g = math.exp(-1.0 / (ENVELOPE_TIME_CONSTANT * sample_rate))
    p = lfilter([1 - g], [1, -g], np.abs(x))
    q = lfilter([1 - g], [1, -g], p)
    hang = int(round(HANGOVER_SECONDS * sample_rate))
    size = hang + 1
    # trailing window [n - hang, n]; pad the front so the window never reaches past n
    padded = np.concatenate([np.zeros(hang), q])
    held = maximum_filter1d(padded, size=size, origin=(size - 1) // 2, mode="nearest")
    return held[hang:]


def _solve_threshold(x, sample_rate):
    sq = float(np.dot(x, x))
    n = len(x)
    if n == 0 or sq == 0.0:
        raise NoSpeech("signal is silent")
    held = _held_envelope(x, sample_rate)
    with np.errstate(divide="ignore"):
        r = 20 * np.log10(np.sort(held)[::-1])
    k = np.arange(1, n + 1)
    level = 10 * np.log10(sq / k)
    below = np.append(r[1:], -np.inf)
    # within the interval where exactly k samples are active, the margin test
    # level - C <= M holds for C >= level - M; take the lowest such threshold
    lowest = np.maximum(np.maximum(level - MARGIN_DB, below), LOWEST_THRESHOLD_DB)
    valid = (lowest <= np.minimum(r, 0.0)) & (r > below)
    active_at_floor = int(np.count_nonzero(r >= LOWEST_THRESHOLD_DB))
    if active_at_floor == 0 or 10 * math.log10(sq / active_at_floor) - LOWEST_THRESHOLD_DB <= MARGIN_DB:
        raise NoSpeech("signal is below the lowest activity threshold")
    if not valid.any():
        # no threshold meets the margin (energy concentrated in a few peaks): all samples active
        return level[-1], 1.0, LOWEST_THRESHOLD_DB, held
    cand = np.where(valid, lowest, np.inf)
    idx = int(np.argmin(cand))
    return level[idx], (idx + 1) / n, float(cand[idx]), held


def active_level(x, sample_rate=SAMPLE_RATE):
    """Measure active speech level, activity factor and long-run RMS level.

    Raises :class:`NoSpeech` for silent or sub-threshold signals.
    """
    x = _samples(x)
    lvl, saf, thr, _ = _solve_threshold(x, sample_rate)
    rms = 10 * math.log10(float(np.dot(x, x)) / len(x))
    return LevelReport(float(lvl), float(saf), rms, thr)


def activity_mask(x, sample_rate=SAMPLE_RATE):
    """Boolean per-sample activity at the threshold chosen by :func:`active_level`."""
    x = _samples(x)
    _, _, thr, held = _solve_threshold(x, sample_rate)
    with np.errstate(divide="ignore"):
        return 20 * np.log10(held) >= thr


def normalize_level(x, target_dbov=TARGET_DBOV, sample_rate=SAMPLE_RATE):
    """Scale ``x`` so its active level is ``target_dbov``.

    Peaks above full scale are allowed and logged, never clipped.
    """
    samples = _samples(x)
    before = active_level(samples, sample_rate)
    gain = 10 ** ((target_dbov - before.active_level_dbov) / 20)
    y = samples * gain
    peak = float(np.max(np.abs(y)))
    if peak > 1.0:
        log.warning("level normalization pushes peak to %.3f (above full scale)", peak)
    after = LevelReport(before.active_level_dbov + 20 * math.log10(gain), before.saf,
                        before.long_run_rms_dbov + 20 * math.log10(gain),
                        before.threshold_dbov + 20 * math.log10(gain))
    meta = dict(x.meta) if isinstance(x, Waveform) else {}
    meta["peak"] = peak
    return Waveform(y, sample_rate, after, gain, meta)


def _window_saf(window, sample_rate):
    try:
        return active_level(window, sample_rate).saf
    except NoSpeech:
        return 0.0


def extract_segments(x, sample_rate=SAMPLE_RATE, min_saf=0.5, source=""):
    """Cut 3 s segments on a 1.5 s grid, keeping those with SAF >= ``min_saf``.

    Selection runs left to right: after a kept window the next candidate is
    the disjoint window 3 s later, falling back to the half-overlapping one
    1.5 s later.  Inputs shorter than 3 s become one zero-padded segment.
    Every kept segment is re-normalized to -26 dBov.
    """
    samples = _samples(x)
    if len(samples) < SEGMENT_LENGTH:
        windows = [np.concatenate([samples, np.zeros(SEGMENT_LENGTH - len(samples))])]
        starts = [0]
    else:
        starts = list(range(0, len(samples) - SEGMENT_LENGTH + 1, HOP_LENGTH))
        windows = [samples[s:s + SEGMENT_LENGTH] for s in starts]
    safs = [None] * len(windows)

    def ok(i):
        if i >= len(windows):
            return False
        if safs[i] is None:
            safs[i] = _window_saf(windows[i], sample_rate)
        return safs[i] >= min_saf

    kept, i = [], 0
    while i < len(windows):
        if not ok(i):
            i += 1
            continue
        kept.append(i)
        if ok(i + 2):
            i += 2
        elif ok(i + 1):
            i += 1
        else:
            i += 3
    if not kept:
        raise EmptyResult("no 3 s window reaches the required speech activity")
    out = []
    for i in kept:
        w = normalize_level(windows[i], TARGET_DBOV, sample_rate)
        out.append(SegmentRecord(w.samples.astype(np.float32), w.level.saf, w.level.active_level_dbov,
                                 source=source, offset=starts[i]))
    return out


def ipa(x):
    """Inverse phase augmentation: the waveform negated, target unchanged."""
    if isinstance(x, SegmentRecord):
        return SegmentRecord(-x.samples, x.saf, x.active_level_dbov, x.source, x.offset,
                             x.condition, dict(x.targets), x.split)
    return -np.asarray(x)


# --------------------------------------------------------------------------
# Target scaling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TargetSpec:
    name: str
    lo: float
    hi: float
    full_scale: float

    def to_unit(self, v):
        return scale_target(self, v, "to_unit")

    def from_unit(self, u):
        return scale_target(self, u, "from_unit")


def scale_target(spec, v, direction="to_unit"):
    """Affine map between a target's native range and [-1, 1]."""
    v = np.asarray(v, dtype=np.float64)
    width = spec.hi - spec.lo
    if direction == "to_unit":
        if np.any(v < spec.lo - 1e-9) or np.any(v > spec.hi + 1e-9):
            raise RangeError(f"{spec.name} value outside [{spec.lo}, {spec.hi}]")
        u = 2.0 * (v - spec.lo) / width - 1.0
    elif direction == "from_unit":
        u = spec.lo + (v + 1.0) * width / 2.0
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return float(u) if u.ndim == 0 else u


TARGETS = {
    t.name: t
    for t in (
        TargetSpec("WB-PESQ", 1.02, 4.64, 4.0),
        TargetSpec("POLQA", 1.0, 4.75, 4.0),
        TargetSpec("PEMO", 0.0, 1.0, 1.0),
        TargetSpec("ViSQOL", 1.0, 5.0, 4.0),
        TargetSpec("STOI", 0.45, 1.0, 1.0),
        TargetSpec("ESTOI", 0.23, 1.0, 1.0),
        TargetSpec("SIIBGauss", 0.0, 750.0, 750.0),
        TargetSpec("MOS", 1.0, 5.0, 4.0),
        TargetSpec("MOS10", 0.0, 10.0, 10.0),
        TargetSpec("NOI", 1.0, 5.0, 4.0),
        TargetSpec("COL", 1.0, 5.0, 4.0),
        TargetSpec("DIS", 1.0, 5.0, 4.0),
        # computable proxies produced by the impairment generator
        TargetSpec("SEGSNR", -10.0, 35.0, 45.0),
        TargetSpec("LOSS", 0.0, 1.0, 1.0),
        TargetSpec("SPECDIST", 0.0, 40.0, 40.0),
    )
}
