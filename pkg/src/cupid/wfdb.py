"""Reader/writer for the subset of PhysioNet WFDB used by the AF databases.

Supports single-segment records whose signals are stored in format 16
(little-endian 16-bit two's complement) or format 212 (two 12-bit samples
packed into three bytes), plus MIT-format annotation files.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

SUPPORTED_FORMATS = (16, 212)
DEFAULT_GAIN = 200.0
DEFAULT_FS = 250.0

_RANGES = {16: (-32768, 32767), 212: (-2048, 2047)}


class WfdbError(ValueError):
    """Malformed or unsupported WFDB content."""


class WfdbParseError(WfdbError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class TruncationError(WfdbError):
    pass


class RangeError(WfdbError):
    pass


@dataclass
class SignalSpec:
    file_name: str
    format_code: int
    gain: float = DEFAULT_GAIN
    baseline: int = 0
    units: str = "mV"
    adc_resolution: int = 0
    adc_zero: int = 0
    initial_value: int = 0
    description: str = ""


@dataclass
class WfdbHeader:
    record_name: str
    n_signals: int
    sampling_frequency: float
    n_samples: int
    signals: list[SignalSpec] = field(default_factory=list)
    comments: list[str] = field(default_factory=list)


@dataclass
class RawRecord:
    header: WfdbHeader
    signals: list[np.ndarray]

    def __post_init__(self):
        lengths = {len(s) for s in self.signals}
        if len(lengths) > 1:
            raise WfdbError(f"channels differ in length: {sorted(lengths)}")


_RECORD_RE = re.compile(r"^(?P<fs>[0-9.eE+-]+)(?:/[0-9.eE+-]+)?(?:\([0-9.eE+-]+\))?$")
_FORMAT_RE = re.compile(r"^(?P<fmt>\d+)(?:x\d+)?(?::\d+)?(?:\+\d+)?$")
_GAIN_RE = re.compile(r"^(?P<gain>[0-9.eE+-]+)(?:\((?P<base>-?\d+)\))?(?:/(?P<units>\S+))?$")


def parse_header(text: bytes | str) -> WfdbHeader:
    """Parse a ``.hea`` file.

    The record line is ``name[/nseg] nsig [fs [nsamp ...]]``; each following
    non-comment line describes one signal.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("ascii")
        except UnicodeDecodeError as exc:
            raise WfdbParseError("header is not ASCII") from exc
    lines = []
    comments = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            comments.append(stripped[1:].strip())
            continue
        lines.append((lineno, stripped))
    if not lines:
        raise WfdbParseError("empty header: no record line")

    lineno, record_line = lines[0]
    fields = record_line.split()
    if len(fields) < 2:
        raise WfdbParseError("record line needs a name and a signal count", lineno)
    name = fields[0]
    if "/" in name:
        raise WfdbParseError("multi-segment records are not supported", lineno)
    try:
        n_signals = int(fields[1])
    except ValueError:
        raise WfdbParseError(f"bad signal count {fields[1]!r}", lineno) from None
    if n_signals < 1:
        raise WfdbParseError("record must declare at least one signal", lineno)
    fs = DEFAULT_FS
    if len(fields) > 2:
        m = _RECORD_RE.match(fields[2])
        if not m:
            raise WfdbParseError(f"bad sampling frequency {fields[2]!r}", lineno)
        fs = float(m.group("fs"))
    if fs <= 0:
        raise WfdbParseError("sampling frequency must be positive", lineno)
    n_samples = 0
    if len(fields) > 3:
        try:
            n_samples = int(fields[3])
        except ValueError:
            raise WfdbParseError(f"bad sample count {fields[3]!r}", lineno) from None
        if n_samples < 0:
            raise WfdbParseError("sample count must be non-negative", lineno)

    signal_lines = lines[1:]
    if len(signal_lines) != n_signals:
        where = signal_lines[-1][0] if signal_lines else lineno
        raise WfdbParseError(
            f"record declares {n_signals} signals but {len(signal_lines)} signal lines follow",
            where,
        )
    signals = [_parse_signal_line(ln, s) for ln, s in signal_lines]
    return WfdbHeader(name, n_signals, fs, n_samples, signals, comments)


def _parse_signal_line(lineno: int, line: str) -> SignalSpec:
    fields = line.split(maxsplit=8)
    if len(fields) < 2:
        raise WfdbParseError("signal line needs a file name and a format", lineno)
    m = _FORMAT_RE.match(fields[1])
    if not m:
        raise WfdbParseError(f"bad format field {fields[1]!r}", lineno)
    fmt = int(m.group("fmt"))
    if fmt not in SUPPORTED_FORMATS:
        raise WfdbParseError(f"unsupported format {fmt} (supported: 16, 212)", lineno)
    spec = SignalSpec(fields[0], fmt)
    baseline = None
    if len(fields) > 2:
        g = _GAIN_RE.match(fields[2])
        if not g:
            raise WfdbParseError(f"bad gain field {fields[2]!r}", lineno)
        gain = float(g.group("gain"))
        spec.gain = gain if gain != 0 else DEFAULT_GAIN
        if g.group("base") is not None:
            baseline = int(g.group("base"))
        if g.group("units"):
            spec.units = g.group("units")
    try:
        if len(fields) > 3:
            spec.adc_resolution = int(fields[3])
        if len(fields) > 4:
            spec.adc_zero = int(fields[4])
        if len(fields) > 5:
            spec.initial_value = int(fields[5])
    except ValueError:
        raise WfdbParseError("non-integer ADC field", lineno) from None
    if len(fields) > 8:
        spec.description = fields[8]
    spec.baseline = spec.adc_zero if baseline is None else baseline
    return spec


def _channels_in_file(header: WfdbHeader, channel: int) -> tuple[list[int], int]:
    if not 0 <= channel < header.n_signals:
        raise WfdbError(f"channel {channel} out of range for {header.n_signals} signals")
    fname = header.signals[channel].file_name
    group = [i for i, s in enumerate(header.signals) if s.file_name == fname]
    fmts = {header.signals[i].format_code for i in group}
    if len(fmts) != 1:
        raise WfdbError(f"mixed formats in {fname} are not supported")
    return group, group.index(channel)


def decode_212(data: bytes, count: int) -> np.ndarray:
    """Unpack ``count`` 12-bit two's complement samples from format-212 bytes."""
    needed = (count // 2) * 3 + (2 if count % 2 else 0)
    if len(data) < needed:
        raise TruncationError(f"format 212 needs {needed} bytes for {count} samples, got {len(data)}")
    raw = np.frombuffer(data, dtype=np.uint8, count=needed).astype(np.int32)
    out = np.empty(count, dtype=np.int32)
    npairs = count // 2
    triples = raw[: npairs * 3].reshape(-1, 3)
    out[0 : 2 * npairs : 2] = triples[:, 0] | ((triples[:, 1] & 0x0F) << 8)
    out[1 : 2 * npairs : 2] = triples[:, 2] | ((triples[:, 1] & 0xF0) << 4)
    if count % 2:
        out[-1] = raw[npairs * 3] | ((raw[npairs * 3 + 1] & 0x0F) << 8)
    out[out > 2047] -= 4096
    return out


def encode_212(samples: np.ndarray) -> bytes:
    s = np.asarray(samples, dtype=np.int64) & 0xFFF
    count = len(s)
    npairs = count // 2
    buf = bytearray()
    a = s[0 : 2 * npairs : 2]
    b = s[1 : 2 * npairs : 2]
    triples = np.stack([a & 0xFF, ((a >> 8) & 0x0F) | (((b >> 8) & 0x0F) << 4), b & 0xFF], axis=1)
    buf += triples.astype(np.uint8).tobytes()
    if count % 2:
        last = int(s[-1])
        buf += bytes([last & 0xFF, (last >> 8) & 0x0F])
    return bytes(buf)


def read_adu(header: WfdbHeader, data: bytes, channel: int) -> np.ndarray:
    """Raw digital samples of one channel."""
    group, pos = _channels_in_file(header, channel)
    nch = len(group)
    fmt = header.signals[channel].format_code
    n = header.n_samples
    total = n * nch
    if fmt == 16:
        if len(data) < 2 * total:
            raise TruncationError(
                f"format 16 needs {2 * total} bytes for {n} samples x {nch} signals, got {len(data)}"
            )
        frames = np.frombuffer(data, dtype="<i2", count=total).astype(np.int32)
    else:
        frames = decode_212(data, total)
    return frames.reshape(n, nch)[:, pos]


def read_signal(header: WfdbHeader, data: bytes, channel: int = 0) -> np.ndarray:
    """Physical values (header units, normally mV): ``(adu - baseline) / gain``."""
    spec = header.signals[channel]
    return (read_adu(header, data, channel) - spec.baseline) / spec.gain


def read_record(header_bytes: bytes | str, data: bytes) -> RawRecord:
    header = parse_header(header_bytes)
    return RawRecord(header, [read_signal(header, data, c) for c in range(header.n_signals)])


def write_record(record: RawRecord, format_code: int = 16) -> tuple[bytes, bytes]:
    """Serialise a record into ``(header_bytes, signal_bytes)``; all channels share one file."""
    if format_code not in SUPPORTED_FORMATS:
        raise WfdbError(f"unsupported format {format_code}")
    h = record.header
    lo, hi = _RANGES[format_code]
    n = len(record.signals[0]) if record.signals else 0
    digital = []
    for spec, values in zip(h.signals, record.signals):
        adu = np.round(np.asarray(values, dtype=np.float64) * spec.gain + spec.baseline)
        if not np.all(np.isfinite(adu)) or adu.min(initial=0) < lo or adu.max(initial=0) > hi:
            raise RangeError(f"signal {spec.file_name!r} exceeds the {format_code} range [{lo}, {hi}]")
        digital.append(adu.astype(np.int64))
    frames = np.stack(digital, axis=1).ravel() if digital else np.zeros(0, np.int64)
    if format_code == 16:
        body = frames.astype("<i2").tobytes()
    else:
        body = encode_212(frames)
    dat_name = f"{h.record_name}.dat"
    lines = [f"{h.record_name} {len(record.signals)} {h.sampling_frequency:g} {n}"]
    for i, spec in enumerate(h.signals):
        desc = spec.description or f"sig{i}"
        lines.append(
            f"{dat_name} {format_code} {spec.gain:g}({spec.baseline})/{spec.units} "
            f"{12 if format_code == 212 else 16} {spec.baseline} {int(digital[i][0]) if n else 0} 0 0 {desc}"
        )
    lines += [f"# {c}" for c in h.comments]
    return ("\n".join(lines) + "\n").encode("ascii"), body


# -- annotations ------------------------------------------------------------

SKIP, NUM, SUB, CHN, AUX = 59, 60, 61, 62, 63
RHYTHM = 28  # '+' rhythm-change annotation; label in aux, e.g. "(AFIB"


@dataclass
class Annotation:
    sample: int
    code: int
    aux: str = ""
    subtype: int = 0
    chan: int = 0
    num: int = 0


def read_annotations(data: bytes) -> list[Annotation]:
    """Decode an MIT-format annotation file (``.atr``)."""
    words = np.frombuffer(data[: len(data) - len(data) % 2], dtype="<u2")
    anns: list[Annotation] = []
    t = 0
    i = 0
    sub = chan = num = 0
    current: Annotation | None = None
    while i < len(words):
        w = int(words[i])
        a, interval = w >> 10, w & 0x3FF
        i += 1
        if a == 0 and interval == 0:
            break
        if a == SKIP:
            if i + 2 > len(words):
                raise TruncationError("SKIP annotation truncated")
            hi, lo = int(words[i]), int(words[i + 1])
            skip = (hi << 16) | lo
            if skip >= 1 << 31:
                skip -= 1 << 32
            t += skip
            i += 2
        elif a == NUM:
            num = interval - 1024 if interval > 511 else interval
            if current is not None:
                current.num = num
        elif a == SUB:
            if current is not None:
                current.subtype = interval
        elif a == CHN:
            chan = interval
            if current is not None:
                current.chan = chan
        elif a == AUX:
            nbytes = interval
            raw = words[i : i + (nbytes + 1) // 2].tobytes()[:nbytes]
            i += (nbytes + 1) // 2
            if current is not None:
                current.aux = raw.split(b"\x00", 1)[0].decode("latin-1")
        else:
            t += interval
            current = Annotation(t, a, "", sub, chan, num)
            anns.append(current)
    return anns


def write_annotations(anns: list[Annotation]) -> bytes:
    """Encode annotations in MIT format (the inverse of :func:`read_annotations`)."""
    out = bytearray()

    def word(a, i):
        out.extend(int((a << 10) | (i & 0x3FF)).to_bytes(2, "little"))

    t = 0
    for ann in sorted(anns, key=lambda x: x.sample):
        delta = ann.sample - t
        if delta > 1023 or delta < 0:
            word(SKIP, 0)
            v = delta & 0xFFFFFFFF
            out.extend((v >> 16).to_bytes(2, "little"))
            out.extend((v & 0xFFFF).to_bytes(2, "little"))
            delta = 0
        word(ann.code, delta)
        t = ann.sample
        if ann.subtype:
            word(SUB, ann.subtype)
        if ann.aux:
            raw = ann.aux.encode("latin-1")
            word(AUX, len(raw))
            out.extend(raw + (b"\x00" if len(raw) % 2 else b""))
    word(0, 0)
    return bytes(out)


def rhythm_intervals(anns: list[Annotation], n_samples: int) -> list[tuple[int, int, str]]:
    """Rhythm segments ``(start, stop, label)`` from '+' annotations; unlabeled stretches are omitted."""
    marks = [(a.sample, a.aux.strip("\x00").strip()) for a in anns if a.code == RHYTHM and a.aux]
    out = []
    for k, (start, label) in enumerate(marks):
        stop = marks[k + 1][0] if k + 1 < len(marks) else n_samples
        if stop > start:
            out.append((start, min(stop, n_samples), label))
    return out
