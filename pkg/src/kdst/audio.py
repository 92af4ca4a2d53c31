"""Waveform I/O and the acoustic feature pipeline.

Raw PCM16 audio goes through log-Mel filterbanks, per-utterance mean and
variance normalization, then left-context frame stacking with downsampling.
:func:`project_features` maps the result into the model dimension.
"""
from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, InputError
from .nn import positional_encoding
from .tensor import Tensor

LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-8


@dataclass
class Waveform:
    samples: np.ndarray  # float in [-1, 1)
    sample_rate: int = 16000

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # [n_frames, dim]
    frame_shift_ms: float

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def read_wav(path) -> Waveform:
    """Read a mono PCM16 WAV file; anything else is a :class:`FormatError`."""
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            raw = f.readframes(n)
    except wave.Error as exc:
        raise FormatError(f"{path}: unsupported WAV ({exc})") from exc
    except EOFError as exc:
        raise FormatError(f"{path}: truncated WAV") from exc
    if channels != 1:
        raise FormatError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise FormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float32) / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(np.asarray(w.samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    """Center frequency in Hz of each triangular filter."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters spanning 0 Hz to Nyquist, shape [n_mels, n_fft // 2 + 1]."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = (len(x) - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def log_mel_filterbank(w: Waveform, n_mels: int = 80, win_ms: float = 25.0, hop_ms: float = 10.0) -> FeatureMatrix:
    win = int(round(w.sample_rate * win_ms / 1000))
    hop = int(round(w.sample_rate * hop_ms / 1000))
    if len(w.samples) < win:
        raise InputError(f"waveform has {len(w.samples)} samples, shorter than one {win}-sample window")
    n_fft = 1 << (win - 1).bit_length()
    frames = frame_signal(np.asarray(w.samples, dtype=np.float64), win, hop) * np.hanning(win)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(n_mels, n_fft, w.sample_rate).T
    return FeatureMatrix(np.log(np.maximum(energies, LOG_FLOOR)).astype(np.float32), hop_ms)


def cmvn(f: FeatureMatrix) -> FeatureMatrix:
    if f.n_frames < 2:
        raise InputError("cmvn needs at least two frames")
    x = f.frames.astype(np.float64)
    mu = x.mean(axis=0)
    var = np.maximum(x.var(axis=0), VAR_FLOOR)
    return FeatureMatrix(((x - mu) / np.sqrt(var)).astype(np.float32), f.frame_shift_ms)


def stack_and_downsample(f: FeatureMatrix, n_left: int = 3, stride: int = 3) -> FeatureMatrix:
    """Concatenate each kept frame with its ``n_left`` predecessors, keeping every ``stride``-th.

    Positions before the first frame repeat frame 0.
    """
    if n_left < 0 or stride < 1:
        raise ConfigError(f"invalid stacking n_left={n_left}, stride={stride}")
    if f.n_frames == 0:
        raise InputError("cannot stack an empty feature matrix")
    centers = np.arange(0, f.n_frames, stride)
    idx = np.maximum(centers[:, None] + np.arange(-n_left, 1)[None, :], 0)
    out = f.frames[idx].reshape(len(centers), -1)
    return FeatureMatrix(np.ascontiguousarray(out), f.frame_shift_ms * stride)


def featurize(w: Waveform, n_mels: int = 80, n_left: int = 3, stride: int = 3) -> FeatureMatrix:
    return stack_and_downsample(cmvn(log_mel_filterbank(w, n_mels)), n_left, stride)


def project_features(features, proj: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """layer_norm(features @ proj) plus sinusoidal positions: the acoustic encoder input.

    ``features`` is a :class:`FeatureMatrix`, an array or a Tensor of shape
    ``[..., n, dim]``.
    """
    if isinstance(features, FeatureMatrix):
        features = features.frames
    if not isinstance(features, Tensor):
        features = Tensor(np.asarray(features, dtype=proj.dtype))
    if features.shape[-1] != proj.shape[0]:
        raise ConfigError(f"feature dim {features.shape[-1]} does not match projection {proj.shape}")
    x = T.layer_norm(T.matmul(features, proj), gain, bias)
    n, d = x.shape[-2], x.shape[-1]
    return T.add(x, Tensor(positional_encoding(n, d, dtype=x.dtype)))


def num_stacked_frames(n_samples: int, sample_rate: int = 16000, win_ms: float = 25.0, hop_ms: float = 10.0,
                       stride: int = 3) -> int:
    win = int(round(sample_rate * win_ms / 1000))
    hop = int(round(sample_rate * hop_ms / 1000))
    return math.ceil(((n_samples - win) // hop + 1) / stride)


def load_features(path: Path | str, **kwargs) -> FeatureMatrix:
    return featurize(read_wav(path), **kwargs)
