"""Mono 16-bit PCM WAV reading and writing (stdlib wave + numpy)."""

import wave

import numpy as np

# one 16-bit quantisation step in the float waveform domain; attack and
# defense magnitudes are specified in these units
AMPLITUDE_UNIT = 1.0 / 32768.0


def float_to_pcm16(waveform) -> np.ndarray:
    x = np.asarray(waveform, dtype=np.float64)
    return np.clip(np.rint(x * 32768.0), -32768, 32767).astype("<i2")


def pcm16_to_float(samples) -> np.ndarray:
    return np.asarray(samples, dtype=np.float64) * AMPLITUDE_UNIT


def write_wav(path, waveform, sample_rate: int):
    data = float_to_pcm16(waveform)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(data.tobytes())


def read_wav(path):
    """Returns (waveform in [-1, 1), sample_rate)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit samples")
        raw = w.readframes(w.getnframes())
        rate = w.getframerate()
    return pcm16_to_float(np.frombuffer(raw, dtype="<i2")), rate
