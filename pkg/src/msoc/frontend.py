"""Audio/visual preprocessing into aligned MFCC rows and face-frame clips."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.fft import dct, rfft

FRAME_SIZE = 100


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mfcc: int = 13
    n_mels: int = 40
    visual_fps: float = 25.0
    clip_frames: int = 25

    def __post_init__(self):
        if not math.isclose(1000.0 / self.hop_ms, 4 * self.visual_fps):
            raise ValueError(
                f"audio frame rate {1000.0 / self.hop_ms:g}/s must be 4x visual_fps={self.visual_fps:g}")
        if self.clip_frames < 1 or self.n_mfcc < 1 or self.n_mels < self.n_mfcc:
            raise ValueError("clip_frames, n_mfcc must be positive and n_mels >= n_mfcc")

    @property
    def window(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def audio_rows(self) -> int:
        return 4 * self.clip_frames

    @property
    def clip_seconds(self) -> float:
        return self.clip_frames / self.visual_fps

    @property
    def max_edge_pad(self) -> int:
        # rows lost to framing without padding
        return int(math.ceil(self.window_ms / self.hop_ms))


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-style mel filters, shape [n_mels, n_fft // 2 + 1]."""
    n_bins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def extract_mfcc(waveform, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """MFCC rows of a mono waveform, shape [Ta, n_mfcc], float32.

    Frames are taken without padding, so ``Ta = (len - window) // hop + 1``.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a mono waveform, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("waveform contains non-finite samples")
    win, hop = cfg.window, cfg.hop
    if len(x) < win:
        raise ValueError(f"waveform of {len(x)} samples is shorter than one {win}-sample window")

    n_frames = (len(x) - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(win)[None, :]
    n_fft = 1 << (win - 1).bit_length()
    power = np.abs(rfft(frames, n=n_fft, axis=1)) ** 2 / n_fft
    mel = power @ mel_filterbank(cfg.n_mels, n_fft, cfg.sample_rate).T
    log_mel = np.log(mel + 1e-10)
    return dct(log_mel, type=2, axis=1, norm="ortho")[:, :cfg.n_mfcc].astype(np.float32)


def temporal_crop_offset(n_frames: int, clip_frames: int) -> int:
    return (n_frames - clip_frames) // 2


def prepare_frames(frames, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Center-crop ``frames`` to T in time, resize to 100x100, scale to [0, 1].

    Accepts [N, H, W, 3] or [N, 3, H, W] arrays; uint8 input is divided by 255,
    float input is assumed already in [0, 1]. Returns [T, 3, 100, 100] float32.
    """
    arr = np.asarray(frames)
    if arr.ndim != 4 or not (arr.shape[-1] == 3 or arr.shape[1] == 3):
        raise ValueError(f"expected an image sequence [N, H, W, 3], got shape {arr.shape}")
    if not (np.issubdtype(arr.dtype, np.integer) or np.issubdtype(arr.dtype, np.floating)):
        raise ValueError(f"non-numeric frame dtype {arr.dtype}")
    T = cfg.clip_frames
    if arr.shape[0] < T:
        raise ValueError(f"need at least {T} frames, got {arr.shape[0]}")
    start = temporal_crop_offset(arr.shape[0], T)
    arr = arr[start:start + T]
    if arr.shape[-1] == 3 and arr.shape[1] != 3:
        arr = arr.transpose(0, 3, 1, 2)
    if np.issubdtype(arr.dtype, np.integer):
        out = arr.astype(np.float32) / 255.0
    else:
        out = arr.astype(np.float32)
    if out.shape[-2:] != (FRAME_SIZE, FRAME_SIZE):
        out = F.interpolate(torch.from_numpy(np.ascontiguousarray(out)),
                            size=(FRAME_SIZE, FRAME_SIZE), mode="bilinear",
                            align_corners=False).numpy()
    return np.clip(out, 0.0, 1.0)


def desync_shift(audio_features, shift_frames: int) -> np.ndarray:
    """Cyclically delay the audio rows by ``shift_frames``: out[t] = x[t - k]."""
    x = np.asarray(audio_features)
    k = int(shift_frames)
    if not 0 < k < x.shape[0]:
        raise ValueError(f"shift must satisfy 0 < k < {x.shape[0]}, got {k}")
    return np.roll(x, k, axis=0)


def sample_shift(n_rows: int, rng: np.random.Generator) -> int:
    """Shift magnitude drawn uniformly from [n_rows/4, 3*n_rows/4]."""
    lo = max(1, int(math.ceil(n_rows / 4)))
    hi = min(n_rows - 1, int(math.floor(3 * n_rows / 4)))
    return int(rng.integers(lo, hi + 1))


def align_audio(audio_features, cfg: FrontendConfig = FrontendConfig(), frame_offset: int = 0
                ) -> np.ndarray:
    """Select the 4T audio rows matching visual frames starting at ``frame_offset``."""
    x = np.asarray(audio_features, dtype=np.float32)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("audio features are empty")
    rows = cfg.audio_rows
    start = 4 * frame_offset
    chunk = x[start:start + rows]
    if chunk.shape[0] < rows - cfg.max_edge_pad:
        raise ValueError(
            f"audio covers {chunk.shape[0]} rows from row {start}, need {rows} for {cfg.clip_frames} frames")
    if chunk.shape[0] < rows:
        chunk = np.concatenate([chunk, np.repeat(chunk[-1:], rows - chunk.shape[0], axis=0)])
    return chunk


def align_pair(audio_features, visual_frames, cfg: FrontendConfig = FrontendConfig()):
    """Return ([4T, 13] audio, [T, 3, 100, 100] frames) covering the same interval."""
    visual = np.asarray(visual_frames)
    if visual.ndim != 4:
        raise ValueError(f"expected an image sequence, got shape {visual.shape}")
    if visual.shape[0] < cfg.clip_frames:
        raise ValueError(f"need at least {cfg.clip_frames} frames, got {visual.shape[0]}")
    offset = temporal_crop_offset(visual.shape[0], cfg.clip_frames)
    return align_audio(audio_features, cfg, offset), prepare_frames(visual, cfg)
