"""Rhythmic audio features, transcript content features and their gated fusion."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np
import torch
import torch.nn as nn

from .errors import EmptyAudio, ShapeMismatch
from .motion_data import AudioClip, Transcript

N_FFT = 512
RHYTHM_RAW = 2  # onset strength, RMS amplitude


@dataclass
class RhythmFeatures:
    raw: np.ndarray  # (T, 2): onset, amplitude
    r: np.ndarray  # (T, d)

    @property
    def onset(self) -> np.ndarray:
        return self.raw[:, 0]

    @property
    def amplitude(self) -> np.ndarray:
        return self.raw[:, 1]


@dataclass
class ContentFeatures:
    raw: np.ndarray  # (T, k) provider vectors
    c: np.ndarray  # (T, d)


@dataclass
class FusedFeatures:
    f: torch.Tensor
    alpha: torch.Tensor


def _fixed_projection(k: int, d: int, salt: int) -> np.ndarray:
    rng = np.random.default_rng([salt, k, d])
    return rng.normal(size=(k, d)) / np.sqrt(k)


def _apply_projection(x: np.ndarray, d: Optional[int], projection, salt: int) -> np.ndarray:
    if projection is None:
        if d is None:
            return x.astype(np.float32)
        projection = _fixed_projection(x.shape[1], d, salt)
    if isinstance(projection, nn.Module):
        with torch.no_grad():
            return projection(torch.from_numpy(x.astype(np.float32))).numpy()
    if callable(projection):
        return np.asarray(projection(x), dtype=np.float32)
    return (x @ np.asarray(projection)).astype(np.float32)


# ---------------------------------------------------------------------------
# rhythm


def onset_strength(audio: AudioClip, T: int) -> np.ndarray:
    """Half-wave rectified spectral flux, one value per frame.

    Frame t is analysed with a Hann-windowed 512-sample transform centred on
    its sample window; magnitudes are normalised by the window sum so the
    flux is in amplitude units.
    """
    hop_win = audio.window_size
    starts = np.floor(np.arange(T) * audio.sf + 1e-9).astype(np.int64)
    centers = starts + hop_win // 2
    padded = np.pad(audio.samples.astype(np.float64), (N_FFT, N_FFT))
    idx = (centers - N_FFT // 2 + N_FFT)[:, None] + np.arange(N_FFT)[None, :]
    win = np.hanning(N_FFT)
    mag = np.abs(np.fft.rfft(padded[idx] * win, axis=1)) / win.sum()
    prev = np.vstack([np.zeros((1, mag.shape[1])), mag[:-1]])
    return np.maximum(mag - prev, 0.0).sum(axis=1)


def rms_amplitude(audio: AudioClip, T: int) -> np.ndarray:
    w = audio.frame_windows()[:T].astype(np.float64)
    return np.sqrt((w * w).mean(axis=1))


def rhythm_raw(audio: AudioClip, T: Optional[int] = None) -> np.ndarray:
    T = audio.frames if T is None else T
    if audio.samples.size == 0 or T <= 0 or audio.window_size <= 0:
        raise EmptyAudio("audio has no samples")
    if audio.frames != T:
        audio = AudioClip(audio.samples, audio.sample_rate, audio.fps, T)
    return np.stack([onset_strength(audio, T), rms_amplitude(audio, T)], axis=1).astype(np.float32)


def extract_rhythm(audio: AudioClip, T: Optional[int] = None, d: Optional[int] = None,
                   projection=None) -> RhythmFeatures:
    """Onset + amplitude per frame (concatenated), linearly projected to ``d`` channels.

    ``projection`` may be a (2, d) matrix, a module or a callable; by default a
    fixed seeded matrix without bias is used.
    """
    raw = rhythm_raw(audio, T)
    return RhythmFeatures(raw, _apply_projection(raw, d, projection, salt=11))


# ---------------------------------------------------------------------------
# content


class HashedNgramEmbedder:
    """Deterministic character n-gram embedding; no external files needed."""

    def __init__(self, width: int = 64, n_min: int = 3, n_max: int = 5):
        self.width, self.n_min, self.n_max = width, n_min, n_max
        self._cache: Dict[str, np.ndarray] = {}

    def _gram(self, g: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.blake2b(g.encode("utf-8"), digest_size=8).digest(), "little")
        return np.random.default_rng(seed).normal(size=self.width)

    def __call__(self, word: str) -> np.ndarray:
        if word not in self._cache:
            token = f"<{word.lower()}>"
            grams = [token[i:i + n] for n in range(self.n_min, self.n_max + 1)
                     for i in range(max(1, len(token) - n + 1))]
            v = np.mean([self._gram(g) for g in grams], axis=0)
            self._cache[word] = (v / (np.linalg.norm(v) + 1e-12)).astype(np.float32)
        return self._cache[word]


class PretrainedEmbeddings:
    """Word vectors from a text file of ``word v1 ... vk`` lines."""

    def __init__(self, table: Dict[str, np.ndarray], fallback: Optional[Callable[[str], np.ndarray]] = None):
        if not table:
            raise ShapeMismatch("empty embedding table")
        widths = {v.shape[0] for v in table.values()}
        if len(widths) != 1:
            raise ShapeMismatch(f"inconsistent vector widths {sorted(widths)}")
        self.table = table
        self.width = widths.pop()
        self.fallback = fallback

    @classmethod
    def from_file(cls, path, fallback=None) -> "PretrainedEmbeddings":
        table = {}
        for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            if i == 0 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue  # fastText-style "count dim" header
            try:
                table[parts[0]] = np.asarray([float(x) for x in parts[1:]], dtype=np.float32)
            except ValueError:
                continue
        return cls(table, fallback)

    def __call__(self, word: str) -> np.ndarray:
        v = self.table.get(word)
        if v is None:
            v = self.table.get(word.lower())
        if v is None:
            if self.fallback is not None:
                return np.resize(self.fallback(word), self.width).astype(np.float32)
            return np.zeros(self.width, dtype=np.float32)
        return v


def transcript_raw(t: Transcript, T: int, provider) -> np.ndarray:
    width = getattr(provider, "width", None) or provider("_").shape[0]
    out = np.zeros((T, width), dtype=np.float32)
    for w, s, e in t.words:
        s, e = max(0, s), min(T, e)
        if e > s:
            out[s:e] = provider(w)
    return out


def embed_transcript(t: Transcript, T: int, provider=None, d: Optional[int] = None,
                     projection=None) -> ContentFeatures:
    """Copy each word vector across its frame span, then project without bias."""
    provider = provider or default_provider()
    raw = transcript_raw(t, T, provider)
    return ContentFeatures(raw, _apply_projection(raw, d, projection, salt=23))


@lru_cache(maxsize=None)
def default_provider(width: int = 64) -> HashedNgramEmbedder:
    return HashedNgramEmbedder(width)


# ---------------------------------------------------------------------------
# fusion


class FusionGate(nn.Module):
    """Per (frame, channel) two-logit softmax gate computed from ``[r, c]``."""

    def __init__(self, d: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or d
        self.d = d
        self.mlp = nn.Sequential(nn.Linear(2 * d, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, 2 * d))

    def forward(self, r: torch.Tensor, c: torch.Tensor):
        if r.shape != c.shape:
            raise ShapeMismatch(f"rhythm {tuple(r.shape)} vs content {tuple(c.shape)}")
        logits = self.mlp(torch.cat([r, c], dim=-1)).unflatten(-1, (self.d, 2))
        alpha = torch.softmax(logits, dim=-1)[..., 0]
        return alpha * r + (1.0 - alpha) * c, alpha


def fuse(r, c, gate: Optional[FusionGate] = None) -> FusedFeatures:
    r = torch.as_tensor(getattr(r, "r", r))
    c = torch.as_tensor(getattr(c, "c", c), dtype=r.dtype)
    if r.shape != c.shape:
        raise ShapeMismatch(f"rhythm {tuple(r.shape)} vs content {tuple(c.shape)}")
    if gate is None:
        g = torch.Generator().manual_seed(0)
        gate = FusionGate(r.shape[-1]).to(r.dtype)
        with torch.no_grad():
            for p in gate.parameters():
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.1)
    f, alpha = gate(r, c)
    return FusedFeatures(f, alpha)
