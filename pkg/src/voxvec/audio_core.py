"""Deterministic DSP primitives.

Pure functions on immutable inputs: band-limited resampling, STFT/iSTFT,
SNR-targeted mixing, gain/speed augmentation, cropping, and mono WAV I/O.
All internal processing is float64; file I/O converts at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.special import i0 as _bessel_i0

from .errors import DegenerateInputError, InvalidArgumentError

# Windowed-sinc resampler quality knobs. 32 zero crossings with a beta-12
# Kaiser taper keeps stopband leakage far below the -40 dB round-trip budget.
_ZERO_CROSSINGS = 32
_KAISER_BETA = 12.0
_RESAMPLE_CHUNK = 8192


@dataclass(frozen=True)
class Waveform:
    """Mono PCM samples at a fixed rate. Samples are nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidArgumentError(f"waveform must be 1-D, got shape {samples.shape}")
        if not (isinstance(self.sample_rate, (int, np.integer)) and self.sample_rate > 0):
            raise InvalidArgumentError(f"sample_rate must be a positive int, got {self.sample_rate!r}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise InvalidArgumentError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate

    def rms(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.sqrt(np.mean(np.square(self.samples))))


def _hann_periodic(n: int) -> np.ndarray:
    # Periodic raised-cosine taper; satisfies COLA for hops dividing n/2.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@dataclass(frozen=True)
class StftConfig:
    """Framing parameters for the STFT. The window must overlap-add to a constant."""

    fft_size: int = 512
    hop: int = 128
    window: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.fft_size <= 0 or (self.fft_size & (self.fft_size - 1)) != 0:
            raise InvalidArgumentError(f"fft_size must be a positive power of two, got {self.fft_size}")
        if not (0 < self.hop <= self.fft_size):
            raise InvalidArgumentError(f"hop must satisfy 0 < hop <= fft_size, got {self.hop}")
        window = self.window
        if window is None:
            window = _hann_periodic(self.fft_size)
        window = np.asarray(window, dtype=np.float64)
        if window.shape != (self.fft_size,):
            raise InvalidArgumentError("window length must equal fft_size")
        object.__setattr__(self, "window", window)
        self._check_cola()

    def _check_cola(self):
        # Sum shifted copies over a span long enough to cover the interior.
        n_shift = 4 * (self.fft_size // self.hop) + 4
        span = self.fft_size + n_shift * self.hop
        acc = np.zeros(span)
        for k in range(n_shift + 1):
            acc[k * self.hop : k * self.hop + self.fft_size] += self.window
        interior = acc[self.fft_size : span - self.fft_size]
        mean = interior.mean()
        if mean <= 0 or np.max(np.abs(interior - mean)) > 1e-8 * mean:
            raise InvalidArgumentError(
                f"window does not satisfy constant overlap-add at hop {self.hop}"
            )

    @property
    def freq_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT bins, shaped (freq_bins, frames)."""

    bins: np.ndarray
    config: StftConfig
    origin_rate: int

    def __post_init__(self):
        bins = np.asarray(self.bins)
        if bins.ndim != 2 or bins.shape[0] != self.config.freq_bins:
            raise InvalidArgumentError(
                f"bins must be (freq_bins={self.config.freq_bins}, frames), got {bins.shape}"
            )
        object.__setattr__(self, "bins", bins)

    @property
    def frames(self) -> int:
        return self.bins.shape[1]


def _kaiser_taper(tau: np.ndarray, half_width: float) -> np.ndarray:
    inside = np.abs(tau) <= half_width
    x = np.where(inside, tau / half_width, 1.0)
    w = _bessel_i0(_KAISER_BETA * np.sqrt(np.maximum(0.0, 1.0 - x * x))) / _bessel_i0(_KAISER_BETA)
    return np.where(inside, w, 0.0)


def _sinc_interpolate(x: np.ndarray, n_out: int, step: float) -> np.ndarray:
    """Evaluate x at fractional positions n*step via a windowed-sinc kernel.

    step is the input-sample advance per output sample; anti-aliasing cutoff
    follows min(Nyquist_in, Nyquist_out).
    """
    fc = 0.5 * min(1.0, 1.0 / step)
    half = int(math.ceil(_ZERO_CROSSINGS / (2.0 * fc)))
    pad = half + 1
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    offsets = np.arange(-half, half + 1)
    out = np.empty(n_out)
    for lo in range(0, n_out, _RESAMPLE_CHUNK):
        hi = min(lo + _RESAMPLE_CHUNK, n_out)
        t = np.arange(lo, hi) * step
        base = np.floor(t).astype(np.int64)
        tau = (base[:, None] + offsets[None, :]) - t[:, None]
        kernel = 2.0 * fc * np.sinc(2.0 * fc * tau) * _kaiser_taper(tau, half)
        # Row normalisation pins DC gain to 1 for every fractional phase.
        kernel /= kernel.sum(axis=1, keepdims=True)
        vals = xp[base[:, None] + offsets[None, :] + pad]
        out[lo:hi] = np.einsum("ij,ij->i", vals, kernel)
    return out


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited (windowed-sinc) rate conversion.

    Output length is round(len * target_rate / sample_rate); identical rates
    pass the samples through bit-identically.
    """
    if not (isinstance(target_rate, (int, np.integer)) and target_rate > 0):
        raise InvalidArgumentError(f"target_rate must be a positive int, got {target_rate!r}")
    target_rate = int(target_rate)
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), target_rate)
    n_out = int(round(len(w) * target_rate / w.sample_rate))
    if len(w) == 0 or n_out == 0:
        return Waveform(np.zeros(n_out), target_rate)
    step = w.sample_rate / target_rate
    return Waveform(_sinc_interpolate(w.samples, n_out, step), target_rate)


def stft(w: Waveform, config: StftConfig | None = None) -> Spectrogram:
    """Short-time Fourier transform; trailing samples short of a frame are dropped."""
    config = config or StftConfig()
    if len(w) < config.fft_size:
        raise InvalidArgumentError(
            f"input of {len(w)} samples is shorter than fft_size {config.fft_size}"
        )
    frames = 1 + (len(w) - config.fft_size) // config.hop
    view = sliding_window_view(w.samples, config.fft_size)[:: config.hop][:frames]
    bins = np.fft.rfft(view * config.window, axis=1).T
    return Spectrogram(bins, config, w.sample_rate)


def istft(s: Spectrogram) -> Waveform:
    """Weighted overlap-add inverse; interior samples reconstruct exactly."""
    config = s.config
    frames = s.frames
    n_out = config.fft_size + (frames - 1) * config.hop
    acc = np.zeros(n_out)
    denom = np.zeros(n_out)
    segs = np.fft.irfft(s.bins.T, n=config.fft_size, axis=1) * config.window
    win_sq = config.window * config.window
    for k in range(frames):
        lo = k * config.hop
        acc[lo : lo + config.fft_size] += segs[k]
        denom[lo : lo + config.fft_size] += win_sq
    good = denom > 1e-10 * denom.max()
    acc[good] /= denom[good]
    return Waveform(acc, s.origin_rate)


def log_magnitude(s: Spectrogram, floor: float = 1e-8) -> np.ndarray:
    """Frame-major log-magnitude features, shaped (frames, freq_bins)."""
    return np.log(np.abs(s.bins.T) + floor)


@dataclass(frozen=True)
class MixResult:
    """Stems and mixture share any post-clip rescale, so mixture == target + interferer."""

    mixture: Waveform
    target: Waveform
    interferer: Waveform
    peak_rescale: float


def mix_at_snr(target: Waveform, interferer: Waveform, snr_db: float) -> MixResult:
    """Scale the interferer so the target-to-interferer ratio equals snr_db, then sum.

    If the sum peaks above 1, all three signals are rescaled together to a
    0.99 peak; the factor is reported in the result.
    """
    if len(target) != len(interferer):
        raise InvalidArgumentError(
            f"stem lengths differ: {len(target)} vs {len(interferer)}"
        )
    if target.sample_rate != interferer.sample_rate:
        raise InvalidArgumentError(
            f"stem rates differ: {target.sample_rate} vs {interferer.sample_rate}"
        )
    rms_t = target.rms()
    rms_i = interferer.rms()
    if rms_t <= 0.0:
        raise DegenerateInputError("target stem is silent")
    if rms_i <= 0.0:
        raise DegenerateInputError("interferer stem is silent")
    scale = (rms_t / rms_i) * 10.0 ** (-snr_db / 20.0)
    t = target.samples
    i = interferer.samples * scale
    m = t + i
    peak = float(np.max(np.abs(m))) if m.size else 0.0
    rescale = 1.0
    if peak > 1.0:
        rescale = 0.99 / peak
        t = t * rescale
        i = i * rescale
        m = m * rescale
    rate = target.sample_rate
    return MixResult(Waveform(m, rate), Waveform(t, rate), Waveform(i, rate), rescale)


def apply_gain_db(w: Waveform, gain_db: float) -> Waveform:
    return Waveform(w.samples * 10.0 ** (gain_db / 20.0), w.sample_rate)


def speed_perturb(w: Waveform, factor: float) -> Waveform:
    """Joint speed/pitch change: resample by 1/factor, reinterpret at the old rate.

    Duration scales by 1/factor and pitch by factor. factor is restricted to
    [0.8, 1.25].
    """
    if not (0.8 <= factor <= 1.25):
        raise InvalidArgumentError(f"speed factor {factor} outside [0.8, 1.25]")
    if factor == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_out = int(round(len(w) / factor))
    if len(w) == 0 or n_out == 0:
        return Waveform(np.zeros(n_out), w.sample_rate)
    return Waveform(_sinc_interpolate(w.samples, n_out, factor), w.sample_rate)


@dataclass(frozen=True)
class CropInfo:
    n_padded: int
    fully_padded: bool


def crop_or_pad(w: Waveform, n_samples: int, offset: int) -> tuple[Waveform, CropInfo]:
    """Take w[offset : offset+n_samples], zero-padding the tail if exhausted."""
    if offset < 0:
        raise InvalidArgumentError(f"offset must be >= 0, got {offset}")
    if n_samples < 0:
        raise InvalidArgumentError(f"n_samples must be >= 0, got {n_samples}")
    available = max(0, min(len(w) - offset, n_samples))
    out = np.zeros(n_samples)
    if available:
        out[:available] = w.samples[offset : offset + available]
    info = CropInfo(n_padded=n_samples - available, fully_padded=available == 0 and n_samples > 0)
    return Waveform(out, w.sample_rate), info


def read_wav(path) -> Waveform:
    """Read a RIFF WAVE file; multi-channel input is averaged to mono."""
    rate, data = wavfile.read(path)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    return Waveform(samples, int(rate))


def write_wav(path, w: Waveform, encoding: str = "float32") -> None:
    """Write mono RIFF WAVE as 32-bit float (default) or 16-bit PCM."""
    if encoding == "float32":
        wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))
    elif encoding == "int16":
        clipped = np.clip(w.samples, -1.0, 1.0 - 1.0 / 32768.0)
        wavfile.write(path, w.sample_rate, np.round(clipped * 32768.0).astype(np.int16))
    else:
        raise InvalidArgumentError(f"unsupported encoding {encoding!r}")
