"""FMCW probe generation and echo preprocessing.

The probe is a linear up-chirp repeated every emission period. A raw
recording is turned into per-frame spectrograms by

    band-pass -> direct-path subtraction -> dechirp -> echo-band selection -> STFT

with the emission start located by normalized cross-correlation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sps

from .errors import ConfigError, DegenerateInputError, ShapeError

SPEED_OF_SOUND = 340.0
ECHO_BAND = (190.0, 500.0)
FILTER_ORDER = 4


@dataclass(frozen=True)
class ChirpSpec:
    f_start: float = 19000.0
    f_end: float = 23000.0
    sweep_duration: float = 0.025
    emission_period: float = 0.050
    sample_rate: float = 48000.0
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.f_end > self.f_start:
            raise ConfigError("f_end must exceed f_start")
        if self.f_start <= 0:
            raise ConfigError("f_start must be positive")
        if 2 * self.f_end > self.sample_rate:
            raise ConfigError("f_end violates Nyquist for this sample rate")
        if not 0 < self.sweep_duration <= self.emission_period:
            raise ConfigError("sweep_duration must lie in (0, emission_period]")
        if not 0 < self.amplitude <= 1:
            raise ConfigError("amplitude must lie in (0, 1]")

    @property
    def bandwidth(self) -> float:
        return self.f_end - self.f_start

    @property
    def sweep_rate(self) -> float:
        """Hz per second."""
        return self.bandwidth / self.sweep_duration

    @property
    def period_samples(self) -> int:
        return int(round(self.emission_period * self.sample_rate))

    @property
    def sweep_samples(self) -> int:
        return int(round(self.sweep_duration * self.sample_rate))

    def constants(self, v0: float = SPEED_OF_SOUND) -> "FmcwConstants":
        return FmcwConstants(v0=v0, B=self.bandwidth, T=self.sweep_duration)

    def instantaneous_frequency(self, t):
        """Instantaneous frequency of the sweep at time ``t`` within one sweep."""
        return self.f_start + self.sweep_rate * np.asarray(t, dtype=float)

    def waveform(self, t) -> np.ndarray:
        """Evaluate the periodic chirp train at arbitrary (possibly fractional) times.

        Times before 0 and inside the guard interval evaluate to 0.
        """
        t = np.asarray(t, dtype=float)
        u = np.mod(t, self.emission_period)
        on = (t >= 0) & (u < self.sweep_duration)
        phase = 2 * np.pi * (self.f_start * u + 0.5 * self.sweep_rate * u * u)
        return np.where(on, self.amplitude * np.sin(phase), 0.0)


@dataclass(frozen=True)
class FmcwConstants:
    v0: float = SPEED_OF_SOUND
    B: float = 4000.0
    T: float = 0.025

    def __post_init__(self):
        if self.v0 <= 0:
            raise ConfigError("speed of sound must be positive")


@dataclass
class AcousticBuffer:
    samples: np.ndarray
    sample_rate: float = 48000.0
    origin: str = "synthetic"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeError("AcousticBuffer samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ShapeError("AcousticBuffer samples must be finite")
        if self.origin not in ("synthetic", "file"):
            raise ConfigError(f"unknown buffer origin {self.origin!r}")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def replace(self, samples) -> "AcousticBuffer":
        return AcousticBuffer(samples, self.sample_rate, self.origin)


@dataclass
class Spectrogram:
    magnitudes: np.ndarray
    freq_axis: np.ndarray
    time_axis: np.ndarray
    window_len: int
    hop: int

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        self.freq_axis = np.asarray(self.freq_axis, dtype=np.float64)
        self.time_axis = np.asarray(self.time_axis, dtype=np.float64)
        if self.magnitudes.shape != (self.freq_axis.size, self.time_axis.size):
            raise ShapeError(
                f"magnitudes {self.magnitudes.shape} do not match axes "
                f"({self.freq_axis.size}, {self.time_axis.size})"
            )
        if np.any(self.magnitudes < 0):
            raise ShapeError("spectrogram magnitudes must be nonnegative")

    @property
    def shape(self):
        return self.magnitudes.shape

    def band(self, lo: float, hi: float) -> np.ndarray:
        """Rows whose centre frequency lies in ``[lo, hi]``."""
        keep = (self.freq_axis >= lo) & (self.freq_axis <= hi)
        return self.magnitudes[keep]


# --------------------------------------------------------------------------
# Probe signal and FMCW geometry
# --------------------------------------------------------------------------

def gen_chirp(spec: ChirpSpec) -> AcousticBuffer:
    """One emission period: the sweep followed by guard silence."""
    t = np.arange(spec.period_samples) / spec.sample_rate
    return AcousticBuffer(spec.waveform(t), spec.sample_rate)


def sweep_template(spec: ChirpSpec) -> AcousticBuffer:
    """The sweep alone, without the guard interval."""
    t = np.arange(spec.sweep_samples) / spec.sample_rate
    return AcousticBuffer(spec.waveform(t), spec.sample_rate)


def chirp_train(spec: ChirpSpec, n_samples: int, offset: int = 0) -> np.ndarray:
    """Periodic chirp train of ``n_samples`` whose first sweep starts at ``offset``."""
    t = (np.arange(n_samples) - offset) / spec.sample_rate
    return spec.waveform(t)


def expected_freq_shift(R: float, c: FmcwConstants) -> float:
    if R < 0:
        raise ConfigError("distance must be nonnegative")
    return 2.0 * R * c.B / (c.T * c.v0)


def range_from_shift(df: float, c: FmcwConstants) -> float:
    if df < 0:
        raise ConfigError("frequency shift must be nonnegative")
    return c.v0 * abs(df) * c.T / (2.0 * c.B)


def range_resolution(c: FmcwConstants) -> float:
    if c.B <= 0:
        raise ConfigError("bandwidth must be positive")
    return c.v0 / (2.0 * c.B)


def sample_resolution(sample_rate: float, v0: float = SPEED_OF_SOUND) -> float:
    """Distance spanned by one sample of round-trip delay."""
    return v0 / (2.0 * sample_rate)


# --------------------------------------------------------------------------
# Filtering and cancellation
# --------------------------------------------------------------------------

def _butter_band(lo, hi, fs, order):
    if order < 1:
        raise ConfigError("filter order must be >= 1")
    if not 0 < lo < hi < fs / 2:
        raise ConfigError(f"invalid band [{lo}, {hi}] for sample rate {fs}")
    return sps.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")


def _zero_phase(sos, x):
    if not np.any(x):
        return np.zeros_like(x)
    # padlen shrinks for short inputs; sosfiltfilt rejects padlen >= len
    padlen = min(3 * (2 * len(sos) + 1), len(x) - 1)
    return sps.sosfiltfilt(sos, x, padlen=padlen)


def bandpass(buf: AcousticBuffer, lo: float = 19000.0, hi: float = 23000.0,
             order: int = FILTER_ORDER) -> AcousticBuffer:
    """Zero-phase Butterworth band-pass (forward-backward)."""
    sos = _butter_band(lo, hi, buf.sample_rate, order)
    return buf.replace(_zero_phase(sos, buf.samples))


def subtract_direct_path(received: AcousticBuffer, template: AcousticBuffer,
                         c_mode="fixed", c: float = 0.9) -> AcousticBuffer:
    """Return ``received - c * template``.

    ``c_mode`` is ``"fixed"`` (use ``c``) or ``"least_squares"`` (the
    projection coefficient minimizing the residual norm).
    """
    if len(received) != len(template):
        raise ShapeError(f"length mismatch: {len(received)} vs {len(template)}")
    if received.sample_rate != template.sample_rate:
        raise ShapeError("sample rates differ")
    s, d = received.samples, template.samples
    if c_mode == "least_squares":
        energy = float(np.dot(d, d))
        if energy == 0.0:
            raise DegenerateInputError("direct-path template has zero energy")
        c = float(np.dot(s, d)) / energy
    elif c_mode != "fixed":
        raise ConfigError(f"unknown c_mode {c_mode!r}")
    return received.replace(s - c * d)


def synchronize(recording: AcousticBuffer, chirp: AcousticBuffer) -> int:
    """Offset maximizing the normalized cross-correlation with ``chirp``."""
    x, c = recording.samples, chirp.samples
    L = len(c)
    if len(x) <= L:
        raise ShapeError("recording must be longer than the chirp template")
    if not np.any(x):
        raise DegenerateInputError("recording is all zeros")
    cnorm = np.linalg.norm(c)
    if cnorm == 0:
        raise DegenerateInputError("chirp template is all zeros")
    num = sps.correlate(x, c, mode="valid", method="fft")
    csum = np.concatenate(([0.0], np.cumsum(x * x)))
    win_energy = np.maximum(csum[L:] - csum[:-L], 0.0)
    wnorm = np.sqrt(win_energy)
    # FFT correlation leaves ~1e-12 residue in silent windows; treat them as zero
    tiny = 1e-9 * np.sqrt(csum[-1])
    ncc = np.where(wnorm > tiny, num / np.maximum(wnorm, tiny) / cnorm, 0.0)
    # quantize away FFT round-off so equal peaks resolve to the earliest one
    return int(np.argmax(np.round(ncc, 9)))


def dechirp(received: AcousticBuffer, chirp: AcousticBuffer) -> AcousticBuffer:
    """Mix the received signal with the (aligned) reference chirp train."""
    if len(received) != len(chirp):
        raise ShapeError(f"length mismatch: {len(received)} vs {len(chirp)}")
    return received.replace(received.samples * chirp.samples)


def isolate_echo_band(dechirped: AcousticBuffer, band: Sequence[float] = ECHO_BAND,
                      order: int = FILTER_ORDER) -> AcousticBuffer:
    """Keep the beat frequencies of reflectors at face range."""
    lo, hi = band
    sos = _butter_band(lo, hi, dechirped.sample_rate, order)
    return dechirped.replace(_zero_phase(sos, dechirped.samples))


# --------------------------------------------------------------------------
# Time-frequency analysis
# --------------------------------------------------------------------------

def stft_spectrogram(buf: AcousticBuffer, window_len: int = 512, hop: int = 128) -> Spectrogram:
    """Magnitude STFT with a periodic Hann window and no padding."""
    n = len(buf)
    if window_len > n:
        raise ShapeError(f"window of {window_len} samples exceeds buffer of {n}")
    if hop < 1 or window_len < 1:
        raise ConfigError("window_len and hop must be >= 1")
    window = sps.get_window("hann", window_len)
    frames = sliding_window_view(buf.samples, window_len)[::hop]
    mags = np.abs(np.fft.rfft(frames * window, axis=1)).T
    freqs = np.fft.rfftfreq(window_len, d=1.0 / buf.sample_rate)
    starts = np.arange(frames.shape[0]) * hop
    times = (starts + window_len / 2.0) / buf.sample_rate
    return Spectrogram(mags, freqs, times, window_len, hop)


def preprocess(recording: AcousticBuffer, spec: ChirpSpec = ChirpSpec(),
               frame_len: float = 0.25, template: Optional[AcousticBuffer] = None,
               c_mode: str = "fixed", c: float = 0.9,
               window_len: int = 512, hop: int = 128,
               echo_band: Sequence[float] = ECHO_BAND) -> List[Spectrogram]:
    """Raw recording to one spectrogram per ``frame_len`` window.

    ``template`` is the pre-recorded direct-path signal; when omitted the
    emitted chirp train is used and the coefficient fitted by least squares.
    """
    if recording.sample_rate != spec.sample_rate:
        raise ConfigError("recording and chirp sample rates differ")
    frame = int(round(frame_len * spec.sample_rate))
    if frame < window_len:
        raise ConfigError("frame shorter than the STFT window")
    n = len(recording)
    if n < frame:
        raise ShapeError("recording shorter than one frame")

    filtered = bandpass(recording, spec.f_start, spec.f_end)
    # locate emission start before cancellation: the direct path marks it
    # every sweep of the train is an equal peak; fold to the first emission
    offset = synchronize(filtered, sweep_template(spec)) % spec.period_samples
    if template is None:
        template = AcousticBuffer(chirp_train(spec, n, offset), spec.sample_rate)
        c_mode = "least_squares"
    else:
        template = bandpass(template, spec.f_start, spec.f_end)
    residual = subtract_direct_path(filtered, template, c_mode=c_mode, c=c)
    reference = AcousticBuffer(chirp_train(spec, n, offset), spec.sample_rate)
    beat = isolate_echo_band(dechirp(residual, reference), echo_band)

    out = []
    for k in range(n // frame):
        seg = beat.replace(beat.samples[k * frame:(k + 1) * frame])
        out.append(stft_spectrogram(seg, window_len, hop))
    return out


def dominant_beat_frequency(buf: AcousticBuffer, fmin: float = 50.0, fmax: float = 3000.0,
                            pad: int = 8) -> float:
    """Frequency of the largest spectral peak of ``buf`` within ``[fmin, fmax]``."""
    n = len(buf) * pad
    spec = np.abs(np.fft.rfft(buf.samples * np.hanning(len(buf)), n=n))
    freqs = np.fft.rfftfreq(n, d=1.0 / buf.sample_rate)
    keep = (freqs >= fmin) & (freqs <= fmax)
    return float(freqs[keep][np.argmax(spec[keep])])


def rms(x) -> float:
    x = np.asarray(getattr(x, "samples", x), dtype=float)
    return math.sqrt(float(np.mean(x * x))) if x.size else 0.0
