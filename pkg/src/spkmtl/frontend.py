"""Deterministic MFCC extraction from mono waveforms.

Pipeline: pre-emphasis -> framing -> Hamming window -> magnitude FFT ->
mel filterbank -> log (floored) -> orthonormal DCT-II -> first n_ceps
coefficients -> optional per-utterance cepstral mean subtraction.

Everything here is a pure function of (waveform, config); precomputed
FEAT1 features are first-class and pipelines may skip this module
entirely.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .errors import DataError

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # float, nominally in [-1, 1]
    sample_rate: int = 16000

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be > 0, got {self.sample_rate}")
        if not np.isfinite(self.samples).all():
            raise DataError("waveform contains non-finite samples")


@dataclass(frozen=True)
class MfccConfig:
    frame_length: float = 0.025  # seconds
    frame_shift: float = 0.010
    pre_emphasis: float = 0.97
    n_mels: int = 30
    n_ceps: int = 30  # includes c0
    fmin: float = 20.0
    fmax: float | None = None  # default: sample_rate / 2 - 100
    mean_subtract: bool = True

    def __post_init__(self):
        if self.n_ceps > self.n_mels:
            raise DataError("n_ceps must be <= n_mels")
        if self.frame_shift > self.frame_length:
            raise DataError("frame_shift must be <= frame_length")

    def fmax_for(self, sample_rate: int) -> float:
        return self.fmax if self.fmax is not None else sample_rate / 2 - 100.0


def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM WAV file. Anything else is rejected."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"WAV file {path} does not exist")
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise DataError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise DataError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        sample_rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=sample_rate)


def write_wav(path, wav: Waveform) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(wav.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(wav.sample_rate)
        wf.writeframes(pcm.tobytes())


def pre_emphasize(wav: Waveform, alpha: float) -> Waveform:
    """y[0] = x[0]*(1-alpha); y[n] = x[n] - alpha*x[n-1]."""
    if not (0.0 <= alpha < 1.0):
        raise DataError(f"pre-emphasis coefficient must be in [0, 1), got {alpha}")
    x = wav.samples
    y = np.empty_like(x)
    if len(x):
        y[0] = x[0] * (1.0 - alpha)
        y[1:] = x[1:] - alpha * x[:-1]
    return Waveform(samples=y, sample_rate=wav.sample_rate)


def frame_count(n_samples: int, frame_length_samples: int, frame_shift_samples: int) -> int:
    if n_samples < frame_length_samples:
        return 0
    return (n_samples - frame_length_samples) // frame_shift_samples + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft: int, n_mels: int, fmin: float, fmax: float, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank, n_mels x (n_fft//2 + 1), peak height 1.

    Filter centers are uniform on the mel scale between fmin and fmax.
    """
    if n_mels < 1:
        raise DataError("n_mels must be >= 1")
    if not (0 <= fmin < fmax):
        raise DataError(f"need 0 <= fmin < fmax, got fmin={fmin}, fmax={fmax}")
    if fmax > sample_rate / 2:
        raise DataError(f"fmax={fmax} exceeds Nyquist frequency {sample_rate / 2}")
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fbank = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        fbank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
        if not fbank[m].any():
            raise DataError(
                f"mel filter {m} has no FFT bin support; reduce n_mels or "
                f"increase n_fft"
            )
    return fbank


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def compute_mfcc(wav: Waveform, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Compute a T x n_ceps float32 MFCC matrix for one utterance."""
    sr = wav.sample_rate
    win = int(round(cfg.frame_length * sr))
    hop = int(round(cfg.frame_shift * sr))
    n_frames = frame_count(len(wav.samples), win, hop)
    if n_frames < 1:
        raise DataError(
            f"waveform too short for one frame: {len(wav.samples)} samples "
            f"< {win} window samples"
        )
    emphasized = pre_emphasize(wav, cfg.pre_emphasis).samples
    frames = np.lib.stride_tricks.sliding_window_view(emphasized, win)[::hop][:n_frames]
    frames = frames * np.hamming(win)
    n_fft = _next_pow2(win)
    spectrum = np.abs(np.fft.rfft(frames, n=n_fft, axis=1))
    fbank = mel_filterbank(n_fft, cfg.n_mels, cfg.fmin, cfg.fmax_for(sr), sr)
    mel_energies = spectrum @ fbank.T
    log_mel = np.log(np.maximum(mel_energies, LOG_FLOOR))
    ceps = dct(log_mel, type=2, axis=1, norm="ortho")[:, : cfg.n_ceps]
    if cfg.mean_subtract:
        ceps = ceps - ceps.mean(axis=0, keepdims=True)
    return ceps.astype(np.float32)
