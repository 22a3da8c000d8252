"""Differentiable log-mel filterbank front-end.

The whole map (framing, Hamming window, zero-padding, DFT power
spectrum, mel integration, log) is built from autodiff ops: run it on a
tape tensor and the gradient w.r.t. the waveform is exact; run it on a
plain array and the identical arithmetic executes without recording.
The DFT is a dense matrix product rather than an FFT. At these frame
sizes the matmul is fast, and its gradient is just the transposed
matrix, which keeps the pipeline one uniform op chain.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class FeatureConfig:
    """Front-end geometry. Defaults are the 8 kHz desk-scale setup:
    25 ms Hamming windows with a 10 ms shift and 24 mel bands."""

    sample_rate: int = 8000
    win_length: int = 200
    hop_length: int = 80
    n_fft: int = 256
    n_mels: int = 24
    # sits near the quiet-frame mel power of 16-bit audio, so silent
    # cells bottom out at a level real recordings actually reach
    log_floor: float = 2e-7

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.win_length < 2:
            raise ValueError("win_length must be at least 2")
        if self.win_length > self.n_fft:
            raise ValueError(
                f"win_length {self.win_length} exceeds n_fft {self.n_fft}"
            )
        if self.hop_length < 1:
            raise ValueError("hop_length must be at least 1")
        if self.n_mels < 1:
            raise ValueError("n_mels must be at least 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


@lru_cache(maxsize=None)
def hamming_window(n: int) -> np.ndarray:
    """w[i] = 0.54 - 0.46 cos(2 pi i / (n - 1)), the classic Hamming taper."""
    if n < 2:
        raise ValueError("hamming_window: length must be at least 2")
    return np.hamming(n)


def frame_count(n_samples: int, win_length: int, hop_length: int) -> int:
    if n_samples < win_length:
        raise ValueError(
            f"utterance too short: {n_samples} samples, window is {win_length}"
        )
    return (n_samples - win_length) // hop_length + 1


@lru_cache(maxsize=None)
def _frame_indices(n_samples, win_length, hop_length):
    t = frame_count(n_samples, win_length, hop_length)
    starts = np.arange(t)[:, None] * hop_length
    return starts + np.arange(win_length)[None, :]


def frame_signal(waveform, win_length: int, hop_length: int) -> ad.Tensor:
    """Slice a waveform into overlapping frames, shape (..., T, win_length).

    Partial frames at the tail are dropped; a waveform shorter than one
    window is an error.
    """
    x = ad.as_tensor(waveform)
    idx = _frame_indices(x.shape[-1], win_length, hop_length)
    return ad.gather(x, idx)


@lru_cache(maxsize=None)
def _dft_matrices(n_fft: int):
    n = np.arange(n_fft)[:, None]
    k = np.arange(n_fft // 2 + 1)[None, :]
    ang = 2.0 * np.pi * n * k / n_fft
    return np.cos(ang), -np.sin(ang)


def power_spectrum(frames) -> ad.Tensor:
    """Squared DFT magnitudes of zero-padded frames.

    The last axis of ``frames`` is the transform length; the result has
    n_fft/2 + 1 non-negative bins per frame.
    """
    f = ad.as_tensor(frames)
    real_m, imag_m = _dft_matrices(f.shape[-1])
    re = ad.matmul(f, real_m)
    im = ad.matmul(f, imag_m)
    return ad.add(ad.square(re), ad.square(im))


@lru_cache(maxsize=None)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters on the HTK scale, shape (n_mels, n_fft/2+1).

    mel(f) = 2595 log10(1 + f / 700). Band edges are equally spaced in
    mel between 0 and the Nyquist frequency; every filter is checked to
    cover at least one DFT bin.
    """
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges = from_mel(np.linspace(to_mel(0.0), to_mel(sample_rate / 2.0), n_mels + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    weights = np.zeros((n_mels, bin_freqs.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_freqs - lo) / (mid - lo)
        falling = (hi - bin_freqs) / (hi - mid)
        weights[m] = np.maximum(0.0, np.minimum(rising, falling))
    row_sums = weights.sum(axis=1)
    if np.any(row_sums <= 0.0):
        empty = int(np.argmin(row_sums))
        raise ValueError(
            f"mel_filterbank: filter {empty} covers no DFT bin "
            f"(n_mels={n_mels}, n_fft={n_fft}, sample_rate={sample_rate})"
        )
    return weights


@lru_cache(maxsize=None)
def _mel_matrix_t(n_mels, n_fft, sample_rate):
    return np.ascontiguousarray(mel_filterbank(n_mels, n_fft, sample_rate).T)


def extract_fbank(waveform, config: FeatureConfig) -> ad.Tensor:
    """Log-mel features of one waveform or a batch, shape (..., T, n_mels)."""
    x = ad.as_tensor(waveform)
    frames = frame_signal(x, config.win_length, config.hop_length)
    windowed = ad.multiply(frames, hamming_window(config.win_length))
    pad = config.n_fft - config.win_length
    if pad:
        zeros = np.zeros(windowed.shape[:-1] + (pad,))
        padded = ad.concat([windowed, ad.Tensor(zeros)], axis=-1)
    else:
        padded = windowed
    power = power_spectrum(padded)
    mel = ad.matmul(
        power, _mel_matrix_t(config.n_mels, config.n_fft, config.sample_rate)
    )
    return ad.log(mel, floor=config.log_floor)
