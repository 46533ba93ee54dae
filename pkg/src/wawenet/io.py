"""File formats: 16-bit WAV, weight files, manifests and numeric text output.

Weight file layout (all integers and reals little-endian)::

    4 bytes   magic b"WAWE"
    u16       format version (1)
    u16       input channels
    u16       channels per section (f_n)
    u16       number of targets (N_T)
    u32       input length in samples
    u16       number of sections, then per section: u8 pool, u8 pad, u32 l_in, u32 l_out
    f64       normalization epsilon
    f64       normalization momentum
    u64       trainable parameter count
    u64       number of float32 values in the payload
    u16       byte length of the target-name string, then that many UTF-8 bytes
              (names joined with ",")
    payload   float32 values in execution order: for each section the conv
              weights (out, in, tap), conv offsets, gamma, beta, running mean,
              running variance; then head weights (target, channel) and offsets
    u32       CRC-32 of every preceding byte
"""

import csv
from dataclasses import dataclass, field
import logging
import os
from pathlib import Path
import struct
import tempfile
import wave
import zlib

import numpy as np

from . import model as mdl
from . import preprocess as pp
from .errors import CorruptFile, EmptyResult, ParseError, UnsupportedFormat, UnsupportedVersion

log = logging.getLogger(__name__)

MAGIC = b"WAWE"
VERSION = 1
PCM_SCALE = 32768
SPLITS = ("train", "val", "test", "unseen")


def _atomic_write(path, data):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(v):
    """Shortest text that round-trips the float64 value: 17 significant digits."""
    return "%.17g" % v


# --------------------------------------------------------------------------
# WAV
# --------------------------------------------------------------------------

def wav_read(path):
    """Read 16 kHz mono 16-bit PCM into a :class:`Waveform` scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as w:
            ch, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            comp = w.getcomptype()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise UnsupportedFormat(f"{path}: not a PCM WAV file ({exc})") from None
    problems = []
    if ch != 1:
        problems.append(f"{ch} channels (need mono)")
    if width != 2:
        problems.append(f"{8 * width}-bit samples (need 16-bit)")
    if rate != pp.SAMPLE_RATE:
        problems.append(f"{rate} samples/s (need {pp.SAMPLE_RATE}; resampling is not supported)")
    if comp != "NONE":
        problems.append(f"compression {comp}")
    if problems:
        raise UnsupportedFormat(f"{path}: " + ", ".join(problems))
    pcm = np.frombuffer(raw, dtype="<i2")
    meta = {"path": str(path), "frames": n, "sample_width": width, "channels": ch}
    return pp.Waveform(pcm.astype(np.float64) / PCM_SCALE, rate, meta=meta)


def to_pcm16(x):
    """Round to nearest (ties away from zero) and clamp to the int16 range."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) > 1.0):
        log.warning("clamping %d samples beyond full scale", int(np.count_nonzero(np.abs(x) > 1.0)))
    q = np.sign(x) * np.floor(np.abs(x) * PCM_SCALE + 0.5)
    return np.clip(q, -PCM_SCALE, PCM_SCALE - 1).astype("<i2")


def wav_write(path, x, sample_rate=pp.SAMPLE_RATE):
    samples = x.samples if isinstance(x, pp.Waveform) else x
    rate = x.sample_rate if isinstance(x, pp.Waveform) else sample_rate
    pcm = to_pcm16(samples)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        with wave.open(tmp, "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(rate)
            w.writeframes(pcm.tobytes())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


# --------------------------------------------------------------------------
# Weight files
# --------------------------------------------------------------------------

def weights_to_bytes(net, target_names=()):
    cfg = net.config
    head = [MAGIC, struct.pack("<HHHHIH", VERSION, cfg.input_channels, cfg.channels,
                               cfg.n_targets, cfg.input_length, len(cfg.sections))]
    for s in cfg.sections:
        head.append(struct.pack("<BBII", s.pool, s.pad_after, s.l_in, s.l_out))
    state = net.state()
    payload = np.concatenate([np.asarray(v, dtype="<f4").ravel() for v in state.values()])
    names = ",".join(target_names).encode("utf-8")
    head.append(struct.pack("<ddQQH", cfg.eps, cfg.momentum, net.parameter_count(), payload.size, len(names)))
    head.append(names)
    body = b"".join(head) + payload.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


@dataclass
class WeightHeader:
    version: int
    config: mdl.ModelConfig
    parameter_count: int
    value_count: int
    target_names: tuple = field(default_factory=tuple)


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, fmt_):
        size = struct.calcsize(fmt_)
        if self.pos + size > len(self.data):
            raise CorruptFile("weight file is truncated")
        out = struct.unpack_from(fmt_, self.data, self.pos)
        self.pos += size
        return out

    def raw(self, n):
        if self.pos + n > len(self.data):
            raise CorruptFile("weight file is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def weights_from_bytes(data):
    """Parse a weight file; returns ``(net, header)``."""
    if len(data) < 6 or data[:4] != MAGIC:
        raise CorruptFile("not a weight file (bad magic)")
    r = _Reader(data)
    r.raw(4)
    (version,) = r.take("<H")
    if version != VERSION:
        raise UnsupportedVersion(f"weight file version {version} is not supported (expected {VERSION})")
    if len(data) < 10:
        raise CorruptFile("weight file is truncated")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptFile("weight file checksum mismatch")
    cin, channels, n_targets, length, n_sec = r.take("<HHHIH")
    pools, padded, specs = [], [], []
    for i in range(n_sec):
        pool, pad, l_in, l_out = r.take("<BBII")
        pools.append(pool)
        if pad:
            padded.append(i + 1)
        specs.append((l_in, l_out))
    eps, momentum, n_params, n_values, name_len = r.take("<ddQQH")
    names = tuple(n for n in r.raw(name_len).decode("utf-8").split(",") if n)
    sections = mdl.custom_sections(length, pools, padded)
    if [(s.l_in, s.l_out) for s in sections] != specs:
        raise CorruptFile("section table is inconsistent with the input length")
    cfg = mdl.ModelConfig(cin, n_targets, channels, sections, length, eps, momentum)
    try:
        cfg.validate(allow_custom=True)
    except ValueError as exc:
        raise CorruptFile(f"invalid header: {exc}") from None
    payload_bytes = len(data) - 4 - r.pos
    if payload_bytes != 4 * n_values:
        raise CorruptFile(f"header declares {n_values} values but payload holds {payload_bytes / 4:g}")
    flat = np.frombuffer(data, dtype="<f4", count=n_values, offset=r.pos).astype(np.float32)
    template = mdl.build(cfg, seed=0, allow_custom=True)
    shapes = {k: v.shape for k, v in template.state().items()}
    if sum(int(np.prod(s)) for s in shapes.values()) != n_values:
        raise CorruptFile("payload size does not match the declared architecture")
    state, pos = {}, 0
    for k, shape in shapes.items():
        size = int(np.prod(shape))
        state[k] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    net = mdl.from_state(cfg, state)
    if net.parameter_count() != n_params:
        raise CorruptFile(f"header declares {n_params} parameters, payload implies {net.parameter_count()}")
    return net, WeightHeader(version, cfg, n_params, n_values, names)


def save_weights(path, net, target_names=()):
    _atomic_write(path, weights_to_bytes(net, target_names))
    return Path(path)


def load_weights(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptFile(f"cannot read weight file {path}: {exc.strerror}") from None
    return weights_from_bytes(data)


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: Path
    condition: str
    split: str
    targets: dict


@dataclass
class Manifest:
    entries: list
    target_names: tuple

    @property
    def fractions(self):
        n = len(self.entries)
        return {s: sum(e.split == s for e in self.entries) / n for s in SPLITS}

    def split(self, name):
        return [e for e in self.entries if e.split == name]


MANIFEST_FIELDS = ("path", "condition", "split")


def manifest_load(path, check_paths=True):
    """Read a manifest CSV: ``path,condition,split`` then one column per target.

    Target columns hold values already scaled to [-1, 1].  Relative paths
    resolve against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    rows = [(i + 1, r) for i, r in enumerate(rows) if r and any(c.strip() for c in r)]
    if not rows:
        raise EmptyResult(f"{path}: manifest is empty")
    line, header = rows[0]
    header = [h.strip() for h in header]
    if tuple(header[:3]) != MANIFEST_FIELDS:
        raise ParseError(f"header must start with {','.join(MANIFEST_FIELDS)}", line)
    names = tuple(header[3:])
    for n in names:
        if n not in pp.TARGETS:
            raise ParseError(f"unknown target {n!r}", line)
    entries = []
    for line, r in rows[1:]:
        if len(r) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(r)}", line)
        p, cond, split = (c.strip() for c in r[:3])
        if split not in SPLITS:
            raise ParseError(f"unknown split {split!r}", line)
        targets = {}
        for n, cell in zip(names, r[3:]):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"target {n} is not a number: {cell!r}", line) from None
            if not -1.0 <= v <= 1.0:
                raise ParseError(f"scaled target {n}={v:g} outside [-1, 1]", line)
            targets[n] = v
        full = Path(p) if Path(p).is_absolute() else base / p
        if check_paths and not full.exists():
            raise ParseError(f"segment file not found: {p}", line)
        entries.append(ManifestEntry(full, cond, split, targets))
    if not entries:
        raise EmptyResult(f"{path}: manifest has no records")
    return Manifest(entries, names)


def manifest_write(path, entries, target_names):
    path = Path(path)
    base = path.parent.resolve()
    lines = [",".join(MANIFEST_FIELDS + tuple(target_names))]
    for e in entries:
        p = Path(e.path)
        try:
            p = p.resolve().relative_to(base)
        except ValueError:
            pass
        lines.append(",".join([str(p), e.condition, e.split] + [fmt(e.targets[n]) for n in target_names]))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
    return path


def load_records(manifest):
    """Read every manifest entry's audio into :class:`SegmentRecord` objects."""
    out = []
    for e in manifest.entries:
        w = wav_read(e.path)
        x = w.samples
        if len(x) != pp.SEGMENT_LENGTH:
            raise UnsupportedFormat(f"{e.path}: segment must hold {pp.SEGMENT_LENGTH} samples, got {len(x)}")
        out.append(pp.SegmentRecord(x.astype(np.float32), 0.0, float("nan"), source=str(e.path),
                                    condition=e.condition, targets=dict(e.targets), split=e.split))
    return out


# --------------------------------------------------------------------------
# Numeric text output
# --------------------------------------------------------------------------

def format_plot_data(matrix, labels=None):
    """Matrix text: one header line ``#plotdata rows=R cols=C labels=a;b;...`` then CSV rows."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    labels = [str(v) for v in labels] if labels is not None else [str(i) for i in range(m.shape[0])]
    if len(labels) != m.shape[0]:
        raise ValueError("one label per row is required")
    lines = [f"#plotdata rows={m.shape[0]} cols={m.shape[1]} labels={';'.join(labels)}"]
    lines += [",".join(fmt(v) for v in row) for row in m]
    return "\n".join(lines) + "\n"


def write_plot_data(path, matrix, labels=None):
    _atomic_write(path, format_plot_data(matrix, labels).encode("utf-8"))
    return Path(path)


def read_plot_data(path):
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if not header.startswith("#plotdata "):
            raise ParseError("missing plot-data header", 1)
        fields = dict(part.split("=", 1) for part in header.split(" ")[1:])
        rows, cols = int(fields["rows"]), int(fields["cols"])
        labels = fields.get("labels", "").split(";")
        data = [[float(v) for v in line.split(",")] for line in f if line.strip()]
    m = np.array(data, dtype=np.float64).reshape(rows, cols)
    return m, labels


def write_rows(path, header, rows):
    """CSV with a header row; floats written with 17 significant digits."""
    def cell(v):
        if isinstance(v, (float, np.floating)):
            return fmt(float(v))
        return str(v)

    text = ",".join(header) + "\n" + "".join(",".join(cell(v) for v in r) + "\n" for r in rows)
    if path is None or str(path) == "-":
        return text
    _atomic_write(path, text.encode("utf-8"))
    return text
