"""Time-of-flight extraction by windowed cross-correlation.

A reference pattern (a short stretch cut from an earlier preprocessed
record) slides through a search window of the waveform; the offset with the
largest inner product marks the arrival.  Ultrasound travels a round trip, so
its arrival time is halved; the optoacoustic signal travels one way.
"""
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (EmptyInput, FormatError, InvalidParameter, LowConfidence,
                     MismatchedGrid, WindowOutOfRange)
from .waveform import Waveform, pack_waveform, unpack_header, unpack_samples

US = "US"
OA = "OA"
MODALITIES = (US, OA)

#: arrival-time search ranges in seconds (raw, before halving)
DEFAULT_WINDOWS = {OA: (40e-6, 120e-6), US: (120e-6, 200e-6)}
DEFAULT_THRESHOLD = 0.3

PATTERN_VERSION = 2
_MODALITY_CODE = {US: 1, OA: 2}
_CODE_MODALITY = {v: k for k, v in _MODALITY_CODE.items()}
_PATTERN_EXTRA = struct.Struct("<III")


@dataclass(frozen=True, eq=False)
class ReferencePattern:
    """Stored template for one modality.

    ``anchor`` is the sample inside the pattern that marks the arrival
    instant; 0 means the pattern starts at the arrival.
    """

    samples: np.ndarray
    modality: str
    source_id: str = ""
    sample_rate: float = None
    anchor: int = 0

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float64)
        arr.setflags(write=False)
        if arr.ndim != 1 or arr.size < 8:
            raise InvalidParameter("reference pattern needs at least 8 samples")
        if not np.dot(arr, arr) > 0:
            raise InvalidParameter("reference pattern has zero energy")
        if self.modality not in MODALITIES:
            raise InvalidParameter(f"unknown modality {self.modality!r}")
        if not 0 <= self.anchor < arr.size:
            raise InvalidParameter("anchor must index into the pattern")
        object.__setattr__(self, "samples", arr)

    def __len__(self):
        return self.samples.size

    @property
    def norm(self):
        return float(np.linalg.norm(self.samples))


@dataclass(frozen=True)
class SearchWindow:
    """Inclusive range of pattern start indices to test."""

    j_min: int
    j_max: int

    def __post_init__(self):
        if not 0 <= self.j_min < self.j_max:
            raise WindowOutOfRange(f"need 0 <= j_min < j_max, got {self.j_min}, {self.j_max}")

    def check(self, n_wave, n_pattern):
        if self.j_max + n_pattern > n_wave:
            raise WindowOutOfRange(
                f"window end {self.j_max} + pattern {n_pattern} exceeds waveform length {n_wave}")

    @classmethod
    def from_times(cls, w, pattern, t_lo, t_hi):
        """Window covering arrival times in ``[t_lo, t_hi]`` (clipped to the record)."""
        a = pattern.anchor
        j_lo = int(np.ceil((t_lo - w.t0) * w.sample_rate - 1e-9)) - a
        j_hi = int(np.floor((t_hi - w.t0) * w.sample_rate + 1e-9)) - a
        j_lo = max(j_lo, 0)
        j_hi = min(j_hi, len(w) - len(pattern))
        return cls(j_lo, j_hi)


@dataclass(frozen=True)
class TofEstimate:
    tof_s: float
    peak_corr: float
    peak_index: int
    peak_ncc: float = float("nan")
    modality: str = ""


def cross_correlate(w, r, win):
    """``c(j) = sum_k r[k] * w[j + k]`` for ``j`` in ``[j_min, j_max]``."""
    win.check(len(w), len(r))
    return kernels.xcorr(w.samples, r.samples, win.j_min, win.j_max)


def _window_norm(x, n, j_min, j_max):
    # whole search span; bounds every local segment norm, so ncc <= 1
    seg = x[j_min:j_max + n]
    return float(np.sqrt(np.dot(seg, seg)))


def _estimate(w, r, win, threshold, halve):
    if r.sample_rate is not None and r.sample_rate != w.sample_rate:
        raise MismatchedGrid(f"pattern rate {r.sample_rate} Hz != waveform rate {w.sample_rate} Hz")
    c = cross_correlate(w, r, win)
    k = int(np.argmax(c))  # first maximum: smallest index wins ties
    peak = float(c[k])
    idx = win.j_min + k
    denom = r.norm * _window_norm(w.samples, len(r), win.j_min, win.j_max)
    ncc = peak / denom if denom > 0 else 0.0
    if ncc < threshold:
        raise LowConfidence(
            f"{r.modality} correlation peak {ncc:.3f} below threshold {threshold}", peak_ncc=ncc)
    t = w.t0 + (idx + r.anchor) / w.sample_rate
    if halve:
        t /= 2.0
    if not t > 0:
        raise InvalidParameter("estimated ToF is not positive; window must start after the trigger")
    return TofEstimate(t, peak, idx, ncc, r.modality)


def _default_window(w, r):
    lo, hi = DEFAULT_WINDOWS[r.modality]
    return SearchWindow.from_times(w, r, lo, hi)


def estimate_tof_us(w, r, win=None, threshold=DEFAULT_THRESHOLD):
    """Ultrasound ToF: arrival time of the round trip, halved."""
    if r.modality != US:
        raise InvalidParameter("estimate_tof_us needs a US reference pattern")
    return _estimate(w, r, win or _default_window(w, r), threshold, halve=True)


def estimate_tof_oa(w, r, win=None, threshold=DEFAULT_THRESHOLD):
    """Optoacoustic ToF: one-way arrival time."""
    if r.modality != OA:
        raise InvalidParameter("estimate_tof_oa needs an OA reference pattern")
    return _estimate(w, r, win or _default_window(w, r), threshold, halve=False)


def estimate_tof(w, r, win=None, threshold=DEFAULT_THRESHOLD):
    if r.modality == US:
        return estimate_tof_us(w, r, win, threshold)
    return estimate_tof_oa(w, r, win, threshold)


def extract_reference(w, t_arrival, length_s, modality, lead_s=None, source_id=""):
    """Cut a reference pattern around a known arrival.

    The pattern spans ``length_s`` seconds starting ``lead_s`` before the
    arrival (default: half the length, i.e. centred); the arrival sample is
    recorded as the anchor.
    """
    if lead_s is None:
        lead_s = length_s / 2
    n = int(round(length_s * w.sample_rate))
    i_arr = w.index_of(t_arrival)
    lead = int(round(lead_s * w.sample_rate))
    i0 = i_arr - lead
    if i0 < 0 or i0 + n > len(w):
        raise EmptyInput("reference pattern would extend past the waveform")
    return ReferencePattern(w.samples[i0:i0 + n], modality, source_id, w.sample_rate, lead)


# -- file format -----------------------------------------------------------

def write_pattern(r, path):
    sid = r.source_id.encode("utf-8")
    extra = _PATTERN_EXTRA.pack(_MODALITY_CODE[r.modality], r.anchor, len(sid)) + sid
    wave = Waveform(r.samples, r.sample_rate or 1.0, 0.0)
    with open(path, "wb") as fh:
        fh.write(pack_waveform(wave, version=PATTERN_VERSION, extra=extra))


def read_pattern(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    version, rate, _t0, count, off = unpack_header(buf)
    if version != PATTERN_VERSION:
        raise FormatError(f"{path}: not a reference pattern (version {version})")
    code, anchor, n_sid = _PATTERN_EXTRA.unpack_from(buf, off)
    off += _PATTERN_EXTRA.size
    sid = buf[off:off + n_sid].decode("utf-8")
    off += n_sid
    if code not in _CODE_MODALITY:
        raise FormatError(f"{path}: unknown modality code {code}")
    return ReferencePattern(unpack_samples(buf, off, count), _CODE_MODALITY[code], sid, rate, anchor)
