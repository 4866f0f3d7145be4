"""Waveform container, preprocessing and spectra.

Everything downstream consumes :class:`Waveform`: a uniformly sampled
amplitude sequence with its sample rate and the time of sample 0 relative
to the laser trigger.
"""
import csv
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .errors import EmptyInput, FormatError, InvalidBand, InvalidParameter, MismatchedGrid

DEFAULT_SAMPLE_RATE = 10e6
WAVE_MAGIC = b"PDM2WAVE"
WAVE_VERSION = 1


def _frozen_array(values):
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Waveform:
    """Uniformly sampled signal.

    Parameters
    ----------
    samples : array_like
        Amplitudes (volts, arbitrary scale).
    sample_rate : float
        Sampling frequency in Hz.
    t0 : float
        Time of sample 0 in seconds, relative to the trigger.
    """

    samples: np.ndarray
    sample_rate: float = DEFAULT_SAMPLE_RATE
    t0: float = 0.0

    def __post_init__(self):
        arr = _frozen_array(self.samples)
        if arr.ndim != 1 or arr.size == 0:
            raise EmptyInput("waveform needs a non-empty 1-D sample sequence")
        if not np.all(np.isfinite(arr)):
            raise InvalidParameter("waveform samples must be finite")
        if not self.sample_rate > 0:
            raise InvalidParameter(f"sample_rate must be > 0, got {self.sample_rate}")
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))
        object.__setattr__(self, "t0", float(self.t0))

    def __len__(self):
        return self.samples.size

    def __eq__(self, other):
        if not isinstance(other, Waveform):
            return NotImplemented
        return (self.sample_rate == other.sample_rate and self.t0 == other.t0
                and np.array_equal(self.samples, other.samples))

    @property
    def dt(self):
        return 1.0 / self.sample_rate

    @property
    def times(self):
        return self.t0 + np.arange(self.samples.size) / self.sample_rate

    def with_samples(self, samples):
        return Waveform(samples, self.sample_rate, self.t0)

    def index_of(self, t):
        """Nearest sample index for absolute time ``t`` (seconds)."""
        return int(round((t - self.t0) * self.sample_rate))

    def segment(self, t_start, t_stop):
        """Samples with ``t_start <= t < t_stop``, clipped to the record."""
        i0 = max(0, int(np.ceil((t_start - self.t0) * self.sample_rate - 1e-9)))
        i1 = min(self.samples.size, int(np.ceil((t_stop - self.t0) * self.sample_rate - 1e-9)))
        if i1 <= i0:
            raise EmptyInput(f"segment [{t_start}, {t_stop}) holds no samples")
        return Waveform(self.samples[i0:i1], self.sample_rate, self.t0 + i0 / self.sample_rate)


@dataclass(frozen=True)
class BandSpec:
    """Band-pass passband edges in Hz and Butterworth order."""

    low_hz: float
    high_hz: float
    order: int = 4

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 1:
            raise InvalidBand(f"filter order must be an integer >= 1, got {self.order}")
        if not 0 < self.low_hz < self.high_hz:
            raise InvalidBand(f"need 0 < low_hz < high_hz, got {self.low_hz}, {self.high_hz}")

    def check(self, sample_rate):
        if not self.high_hz < sample_rate / 2:
            raise InvalidBand(
                f"high edge {self.high_hz} Hz is not below Nyquist ({sample_rate / 2} Hz)")


LOW_BAND = BandSpec(20e3, 200e3, 4)
HIGH_BAND = BandSpec(300e3, 1.5e6, 4)
DEFAULT_BANDS = (LOW_BAND, HIGH_BAND)


@dataclass(frozen=True, eq=False)
class Spectrum:
    """One-sided DFT magnitude spectrum.

    ``magnitudes`` are raw ``|X_k|`` for ``k = 0..n//2``; ``n_samples`` keeps
    the transform length so energy can be recovered exactly.
    """

    freqs: np.ndarray
    magnitudes: np.ndarray
    n_samples: int = field(default=0)

    def __post_init__(self):
        f = _frozen_array(self.freqs)
        m = _frozen_array(self.magnitudes)
        if f.shape != m.shape:
            raise MismatchedGrid("freqs and magnitudes differ in length")
        if f.size > 1 and not np.all(np.diff(f) > 0):
            raise InvalidParameter("spectrum frequencies must increase strictly")
        if np.any(m < 0):
            raise InvalidParameter("magnitudes must be nonnegative")
        object.__setattr__(self, "freqs", f)
        object.__setattr__(self, "magnitudes", m)

    def energy(self):
        """Time-domain energy ``sum x**2`` recovered via Parseval."""
        n = self.n_samples
        p = self.magnitudes ** 2
        weights = np.full(p.size, 2.0)
        weights[0] = 1.0
        if n % 2 == 0:
            weights[-1] = 1.0
        return float(np.dot(weights, p) / n)

    def peak_frequencies(self, count, min_separation_hz=0.0):
        """Frequencies of the ``count`` largest local maxima."""
        peaks, _ = sps.find_peaks(self.magnitudes)
        if self.magnitudes.size and self.magnitudes[0] > self.magnitudes[min(1, self.magnitudes.size - 1)]:
            peaks = np.r_[0, peaks]
        order = peaks[np.argsort(self.magnitudes[peaks])[::-1]]
        chosen = []
        for p in order:
            if all(abs(self.freqs[p] - self.freqs[q]) >= min_separation_hz for q in chosen):
                chosen.append(p)
            if len(chosen) == count:
                break
        return np.sort(self.freqs[chosen])


def average_waveforms(ws):
    """Pointwise mean of waveforms that share rate, start time and length."""
    ws = list(ws)
    if not ws:
        raise EmptyInput("cannot average an empty list of waveforms")
    first = ws[0]
    for w in ws[1:]:
        if len(w) != len(first) or w.sample_rate != first.sample_rate or w.t0 != first.t0:
            raise MismatchedGrid("waveforms differ in length, sample rate or t0")
    return first.with_samples(np.mean([w.samples for w in ws], axis=0))


def _sos(band, sample_rate):
    band.check(sample_rate)
    return sps.butter(int(band.order), [band.low_hz, band.high_hz], btype="bandpass",
                      fs=sample_rate, output="sos")


def bandpass(w, band):
    """Zero-phase Butterworth band-pass (forward-backward), so ToF is unbiased."""
    sos = _sos(band, w.sample_rate)
    x = w.samples
    # sosfiltfilt needs a minimum length for its edge padding
    padlen = min(x.size - 1, 3 * (2 * sos.shape[0] + 1))
    y = sps.sosfiltfilt(sos, x, padlen=max(padlen, 0))
    return w.with_samples(y)


def preprocess(ws, bands=DEFAULT_BANDS):
    """Average repeated records, then sum the band-passed outputs of each band."""
    if isinstance(ws, Waveform):
        ws = [ws]
    avg = average_waveforms(ws)
    if not bands:
        return avg
    out = np.zeros(len(avg))
    for b in bands:
        out += bandpass(avg, b).samples
    return avg.with_samples(out)


def envelope(w):
    """Analytic-signal magnitude."""
    return w.with_samples(np.abs(sps.hilbert(w.samples)))


def spectrum(w):
    """Magnitude of the DFT on the nonnegative-frequency grid."""
    x = w.samples
    mags = np.abs(np.fft.rfft(x))
    freqs = np.fft.rfftfreq(x.size, d=1.0 / w.sample_rate)
    return Spectrum(freqs, mags, x.size)


# -- file formats ----------------------------------------------------------

_HEADER = struct.Struct("<8sIddQ")


def write_waveform_csv(w, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["time_s", "amplitude"])
        for t, a in zip(w.times, w.samples):
            out.writerow([repr(float(t)), repr(float(a))])


def read_waveform_csv(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if not rows or [c.strip() for c in rows[0]] != ["time_s", "amplitude"]:
        raise FormatError(f"{path}: expected header 'time_s,amplitude'")
    try:
        data = np.array([[float(a), float(b)] for a, b in rows[1:]])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed row ({exc})") from exc
    if data.shape[0] == 0:
        raise FormatError(f"{path}: no samples")
    t = data[:, 0]
    if t.size > 1:
        steps = np.diff(t)
        dt = (t[-1] - t[0]) / (t.size - 1)
        if dt <= 0 or np.max(np.abs(steps - dt)) > 1e-6 * dt:
            raise FormatError(f"{path}: time column is not uniformly spaced")
        rate = 1.0 / dt
    else:
        rate = DEFAULT_SAMPLE_RATE
    return Waveform(data[:, 1], rate, t[0])


def pack_waveform(w, version=WAVE_VERSION, extra=b""):
    head = _HEADER.pack(WAVE_MAGIC, version, w.sample_rate, w.t0, len(w))
    return head + extra + w.samples.astype("<f8").tobytes()


def unpack_header(buf):
    if len(buf) < _HEADER.size:
        raise FormatError("truncated waveform header")
    magic, version, rate, t0, count = _HEADER.unpack_from(buf)
    if magic != WAVE_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    return version, rate, t0, count, _HEADER.size


def unpack_samples(buf, offset, count):
    need = offset + 8 * count
    if len(buf) != need:
        raise FormatError(f"expected {need} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset)


def write_waveform_bin(w, path):
    with open(path, "wb") as fh:
        fh.write(pack_waveform(w))


def read_waveform_bin(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    version, rate, t0, count, off = unpack_header(buf)
    if version != WAVE_VERSION:
        raise FormatError(f"{path}: unsupported waveform version {version}")
    return Waveform(unpack_samples(buf, off, count), rate, t0)


def read_waveform(path):
    """Read either container, sniffing the binary magic."""
    path = str(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == WAVE_MAGIC:
        return read_waveform_bin(path)
    return read_waveform_csv(path)


def write_waveform(w, path):
    if str(path).endswith(".csv"):
        write_waveform_csv(w, path)
    else:
        write_waveform_bin(w, path)
