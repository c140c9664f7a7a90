"""Signal primitives: convolution, streaming FIR, resampling, noise synthesis, WAV I/O."""

from __future__ import annotations

import os
import wave
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from metasfanc.errors import DataError, InvalidArgumentError, WavFormatError

NOISE_RMS = 0.1
# Kaiser beta for the polyphase anti-alias filter; ~80 dB stopband.
_RESAMPLE_KAISER_BETA = 8.0


class EmptyAudioError(DataError):
    pass


def _as_finite_vector(values, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size == 0:
        raise InvalidArgumentError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class Signal:
    """Mono sample buffer with its sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise InvalidArgumentError("sample_rate must be positive")
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("signal contains non-finite samples")
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def segment(self, start: int, stop: int) -> "Signal":
        return Signal(self.samples[start:stop].copy(), self.sample_rate)

    def __eq__(self, other):
        if not isinstance(other, Signal):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(
            self.samples, other.samples
        )


@dataclass(frozen=True, eq=False)
class FirPath:
    """Impulse response of an acoustic path (P(z), S(z) or its estimate)."""

    coefficients: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "coefficients", _as_finite_vector(self.coefficients, "FIR taps")
        )

    def __len__(self):
        return self.coefficients.size

    def __eq__(self, other):
        if not isinstance(other, FirPath):
            return NotImplemented
        return np.array_equal(self.coefficients, other.coefficients)


@dataclass
class FirState:
    """Streaming FIR filter; the delay line holds the newest sample first."""

    path: FirPath
    delay_line: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.delay_line is None:
            self.delay_line = np.zeros(len(self.path))
        elif len(self.delay_line) != len(self.path):
            raise InvalidArgumentError("delay line length must equal tap count")

    def reset(self):
        self.delay_line[:] = 0.0


def convolve(a, b) -> np.ndarray:
    """Full linear convolution, length ``len(a) + len(b) - 1``."""
    if isinstance(b, FirPath):
        b = b.coefficients
    a = _as_finite_vector(a, "convolution input")
    b = _as_finite_vector(b, "convolution kernel")
    return np.convolve(a, b)


def fir_step(state: FirState, x: float) -> float:
    x = float(x)
    if not np.isfinite(x):
        raise InvalidArgumentError("FIR input sample is not finite")
    dl = state.delay_line
    dl[1:] = dl[:-1]
    dl[0] = x
    return float(np.dot(state.path.coefficients, dl))


def gaussian_fir(length: int, variance: float, seed: int) -> FirPath:
    """Path with i.i.d. N(0, variance) taps."""
    if length < 1:
        raise InvalidArgumentError("path length must be >= 1")
    if not variance > 0:
        raise InvalidArgumentError("variance must be positive")
    rng = np.random.default_rng(seed)
    return FirPath(rng.normal(0.0, np.sqrt(variance), size=int(length)))


@dataclass(frozen=True)
class NoiseSpec:
    """Generator for one noise subclass: band-limited Gaussian noise with AM.

    Inside the band the magnitude spectrum follows a power-law tilt of
    ``tilt_db_per_octave`` relative to the lower edge (0 gives flat noise,
    -3 gives pink). ``jitter_hz`` shifts the whole band by a uniform random
    offset per realization, so two recordings of a subclass are never
    spectrally identical.
    """

    low_hz: float
    high_hz: float
    am_depth: float = 0.0
    am_rate_hz: float = 0.0
    jitter_hz: float = 0.0
    label: str = ""
    tilt_db_per_octave: float = 0.0

    def __post_init__(self):
        if not 0 <= self.low_hz < self.high_hz:
            raise InvalidArgumentError("noise band requires 0 <= low < high")
        if not 0 <= self.am_depth < 1:
            raise InvalidArgumentError("am_depth must lie in [0, 1)")
        if self.jitter_hz < 0 or self.am_rate_hz < 0:
            raise InvalidArgumentError("jitter and AM rate must be non-negative")


@dataclass(frozen=True)
class CategorySpec:
    """A noise category: ``n_subclasses`` overlapping bands tiling [low, high].

    Subclass ``i`` is centred at the middle of the i-th of ``n_subclasses``
    equal slots; its bandwidth is ``overlap`` slot widths.
    """

    label: str
    low_hz: float
    high_hz: float
    n_subclasses: int = 10
    overlap: float = 2.0
    am_depth: float = 0.3
    am_rate_hz: float = 2.0
    jitter_hz: float = 0.0
    tilt_db_per_octave: float = 0.0

    def __post_init__(self):
        if not 0 <= self.low_hz < self.high_hz:
            raise InvalidArgumentError("category band requires 0 <= low < high")
        if self.n_subclasses < 1:
            raise InvalidArgumentError("a category needs at least one subclass")
        if self.overlap <= 0:
            raise InvalidArgumentError("overlap must be positive")

    def subclass(self, index: int) -> NoiseSpec:
        if not 0 <= index < self.n_subclasses:
            raise InvalidArgumentError(f"subclass index {index} out of range")
        slot = (self.high_hz - self.low_hz) / self.n_subclasses
        center = self.low_hz + (index + 0.5) * slot
        half = 0.5 * self.overlap * slot
        lo = max(self.low_hz, center - half)
        hi = min(self.high_hz, center + half)
        # AM rate varies per subclass so subclasses also differ in envelope.
        rate = self.am_rate_hz * (1.0 + 0.15 * index)
        return NoiseSpec(
            lo, hi, self.am_depth, rate, self.jitter_hz, f"{self.label}/{index}",
            self.tilt_db_per_octave,
        )

    def subclasses(self):
        return [self.subclass(i) for i in range(self.n_subclasses)]


def synth_noise(
    spec: NoiseSpec, duration_s: float, seed: int, sample_rate: int = 16000
) -> Signal:
    """Deterministic band-limited noise realization at RMS 0.1."""
    if not duration_s > 0:
        raise InvalidArgumentError("duration must be positive")
    n = int(round(duration_s * sample_rate))
    if n < 1:
        raise InvalidArgumentError("duration shorter than one sample")
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(n)
    shift = rng.uniform(-spec.jitter_hz, spec.jitter_hz) if spec.jitter_hz else 0.0
    phase = rng.uniform(0.0, 2 * np.pi)

    nyquist = sample_rate / 2
    lo = min(max(spec.low_hz + shift, 0.0), nyquist)
    hi = min(max(spec.high_hz + shift, 0.0), nyquist)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    outside = (freqs < lo) | (freqs > hi)
    if spec.tilt_db_per_octave and hi > lo:
        ref = max(lo, freqs[1] if n > 1 else 1.0)
        gain = np.ones_like(freqs)
        inside = ~outside & (freqs > 0)
        gain[inside] = (freqs[inside] / ref) ** (spec.tilt_db_per_octave / (20 * np.log10(2)))
        spectrum = spectrum * gain
    spectrum[outside] = 0.0
    band = np.fft.irfft(spectrum, n=n)

    if spec.am_depth > 0:
        t = np.arange(n) / sample_rate
        band = band * (1.0 + spec.am_depth * np.sin(2 * np.pi * spec.am_rate_hz * t + phase))

    rms = np.sqrt(np.mean(band**2))
    if rms > 0:
        band = band * (NOISE_RMS / rms)
    return Signal(band, sample_rate)


def tone(freq_hz: float, duration_s: float, sample_rate: int = 16000, amplitude=0.5):
    t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    return Signal(amplitude * np.sin(2 * np.pi * freq_hz * t), sample_rate)


def resample_ratio(samples: np.ndarray, up: int, down: int) -> np.ndarray:
    """Polyphase windowed-sinc resampling by the rational factor up/down."""
    if up < 1 or down < 1:
        raise InvalidArgumentError("resampling factors must be positive")
    frac = Fraction(int(up), int(down))
    if frac == 1:
        return np.array(samples, dtype=np.float64, copy=True)
    return sps.resample_poly(
        samples,
        frac.numerator,
        frac.denominator,
        window=("kaiser", _RESAMPLE_KAISER_BETA),
    )


def resample(sig: Signal, new_rate: int) -> Signal:
    if int(new_rate) <= 0:
        raise InvalidArgumentError("new sample rate must be positive")
    out = resample_ratio(sig.samples, int(new_rate), sig.sample_rate)
    return Signal(out, int(new_rate))


def read_wav(path) -> Signal:
    """Read a 16-bit PCM WAV file; stereo is averaged to mono."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        with wave.open(path, "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if width != 2:
        raise WavFormatError(f"{path}: only 16-bit PCM is supported (got {8 * width}-bit)")
    if n_channels not in (1, 2):
        raise WavFormatError(f"{path}: unsupported channel count {n_channels}")
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise EmptyAudioError(f"{path}: WAV file holds no samples")
    frames = pcm.size // n_channels
    data = pcm[: frames * n_channels].reshape(frames, n_channels).astype(np.float64)
    return Signal(data.mean(axis=1) / 32768.0, rate)


def write_wav(sig: Signal, path):
    """Write ``sig`` as mono 16-bit PCM; samples outside [-1, 1) are clipped."""
    pcm = np.clip(np.round(sig.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(os.fspath(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sig.sample_rate)
        wf.writeframes(pcm.tobytes())
