"""Evaluation metrics: FGD, diversity, beat alignment, face MSE / LVD."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.signal import find_peaks
from scipy.spatial.distance import pdist

from .audio_features import onset_strength
from .errors import LengthMismatch, TooFewSamples
from .motion_data import FACE_SLICE, AudioClip, GestureSequence, PartLayout, rot6d_to_matrix_torch

DEVIATION_NOTES = (
    "FGD uses a locally trained temporal-conv autoencoder; absolute values are not comparable to "
    "published numbers, only orderings are.",
    "Face MSE and LVD are computed on the 100 expression parameters, not on mesh vertices; "
    "LVD is the mean L1 difference of per-frame parameter velocities.",
    "Diversity is the mean pairwise L1 distance normalised by channels x frames.",
)


def _motion_array(x) -> np.ndarray:
    if isinstance(x, GestureSequence):
        return x.data
    if hasattr(x, "gesture"):
        return x.gesture.data
    return np.asarray(x)


def _stack(clips) -> np.ndarray:
    if isinstance(clips, np.ndarray) and clips.ndim == 3:
        return clips
    return np.stack([_motion_array(c) for c in clips])


def body_joint_channels(layout: Optional[PartLayout] = None) -> np.ndarray:
    """Rot6D channels of the upper, hands and lower parts."""
    layout = layout or PartLayout.default()
    return np.concatenate([layout.indices[p][:6 * layout.rot_joints[p]] for p in ("upper", "hands", "lower")])


# ---------------------------------------------------------------------------
# Frechet distance


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    a = (a + a.T) / 2.0
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_stats(mu1, sigma1, mu2, sigma2) -> float:
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    # tr sqrt(r1 s2 r1) is the nuclear norm of r1 r2; singular values stay accurate
    # on rank-deficient covariances where an eigen square root amplifies noise
    cross = np.linalg.svd(sqrtm_psd(s1) @ sqrtm_psd(s2), compute_uv=False).sum()
    d = float(((mu1 - mu2) ** 2).sum() + np.trace(s1) + np.trace(s2) - 2.0 * cross)
    return max(d, 0.0)


def frechet_distance(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two (N, k) feature sets."""
    feat_a, feat_b = np.asarray(feat_a, np.float64), np.asarray(feat_b, np.float64)
    if feat_a.ndim == 1:
        feat_a = feat_a[:, None]
    if feat_b.ndim == 1:
        feat_b = feat_b[:, None]
    if len(feat_a) < 2 or len(feat_b) < 2:
        raise TooFewSamples("need at least two samples per side")
    return frechet_from_stats(feat_a.mean(0), np.atleast_2d(np.cov(feat_a, rowvar=False)),
                              feat_b.mean(0), np.atleast_2d(np.cov(feat_b, rowvar=False)))


class FeatureExtractor(nn.Module):
    """Four strided conv layers down to a 128-d code, mirrored by transposed convs.

    Clip embeddings are the code averaged over time.
    """

    def __init__(self, n_in: int, width: int = 128, code: int = 128):
        super().__init__()
        self.register_buffer("mean", torch.zeros(n_in))
        self.register_buffer("std", torch.ones(n_in))
        self.channels: Optional[np.ndarray] = None
        chans = [n_in, width, width, width, code]
        enc, dec = [], []
        for i in range(4):
            enc += [nn.Conv1d(chans[i], chans[i + 1], 4, 2, 1)]
            if i < 3:
                enc.append(nn.LeakyReLU(0.2))
        rev = chans[::-1]
        for i in range(4):
            dec += [nn.ConvTranspose1d(rev[i], rev[i + 1], 4, 2, 1)]
            if i < 3:
                dec.append(nn.LeakyReLU(0.2))
        self.encoder, self.decoder = nn.Sequential(*enc), nn.Sequential(*dec)

    def _norm(self, x):
        return ((x - self.mean) / self.std).transpose(1, 2)

    def forward(self, x):
        return self.decoder(self.encoder(self._norm(x))).transpose(1, 2) * self.std + self.mean

    @torch.no_grad()
    def embed(self, motion) -> np.ndarray:
        """(N, T, 437) motion or a list of sequences -> (N, code) embeddings."""
        x = _stack(motion)
        if self.channels is not None and x.shape[-1] != len(self.channels):
            x = x[..., self.channels]
        x = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
        x = _canonical_rot(x)
        return self.encoder(self._norm(x)).mean(-1).double().numpy()


def _canonical_rot(x: torch.Tensor) -> torch.Tensor:
    n = x.shape[-1] // 6
    m = rot6d_to_matrix_torch(x[..., :6 * n].reshape(x.shape[:-1] + (n, 6)))
    r = torch.cat([m[..., :, 0], m[..., :, 1]], -1).reshape(x.shape[:-1] + (6 * n,))
    return torch.cat([r, x[..., 6 * n:]], -1)


def train_feature_extractor(motion, layout: Optional[PartLayout] = None, steps: int = 400, lr: float = 1e-3,
                            batch_size: int = 32, seed: int = 0, width: int = 128) -> FeatureExtractor:
    """Fit the autoencoder on ground-truth body rotations; returned frozen."""
    ch = body_joint_channels(layout)
    x = torch.from_numpy(np.ascontiguousarray(_stack(motion)[..., ch], dtype=np.float32))
    if x.shape[1] % 16:
        raise LengthMismatch("feature extractor needs window lengths divisible by 16")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    fx = FeatureExtractor(len(ch), width)
    fx.channels = ch
    fx.mean.copy_(x.mean((0, 1)))
    fx.std.copy_(x.std((0, 1)).clamp_min(1e-3))
    opt = torch.optim.Adam(fx.parameters(), lr=lr)
    for _ in range(steps):
        b = x[torch.from_numpy(rng.integers(0, len(x), size=min(batch_size, len(x))))]
        loss = F.mse_loss(fx(b), b)
        opt.zero_grad()
        loss.backward()
        opt.step()
    fx.eval()
    fx.requires_grad_(False)
    return fx


def fgd(real_clips, gen_clips, fx: FeatureExtractor) -> float:
    real, gen = _stack(real_clips), _stack(gen_clips)
    if len(real) < 2 or len(gen) < 2:
        raise TooFewSamples("FGD needs at least two clips per side")
    return frechet_distance(fx.embed(real), fx.embed(gen))


def save_extractor(fx: FeatureExtractor, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": "m3g-fgd-extractor", "n_in": fx.mean.numel(),
                "width": fx.encoder[0].out_channels, "channels": fx.channels,
                "state_dict": fx.state_dict()}, path)
    return path


def load_extractor(path) -> FeatureExtractor:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    fx = FeatureExtractor(payload["n_in"], payload["width"])
    fx.load_state_dict(payload["state_dict"])
    fx.channels = payload["channels"]
    fx.eval()
    fx.requires_grad_(False)
    return fx


# ---------------------------------------------------------------------------
# diversity, face errors


def diversity(clips, channels: Optional[np.ndarray] = None) -> float:
    """Mean pairwise L1 distance of body motion, per element."""
    x = _stack(clips)
    if len(x) < 2:
        raise TooFewSamples("diversity needs at least two clips")
    if channels is None and x.shape[-1] == 437:
        channels = body_joint_channels()
    if channels is not None:
        x = x[..., channels]
    flat = x.reshape(len(x), -1).astype(np.float64)
    return float(pdist(flat, "cityblock").mean() / flat.shape[1])


def face_error(real, gen) -> tuple:
    """(mse, lvd) on matched clip pairs, computed on the expression parameters."""
    a, b = _stack(real), _stack(gen)
    if a.shape != b.shape:
        raise LengthMismatch(f"real {a.shape} vs generated {b.shape}")
    if a.shape[-1] == 437:
        a, b = a[..., FACE_SLICE], b[..., FACE_SLICE]
    a, b = a.astype(np.float64), b.astype(np.float64)
    mse = float(((a - b) ** 2).mean())
    lvd = float(np.abs(np.diff(a, axis=-2) - np.diff(b, axis=-2)).mean()) if a.shape[-2] > 1 else 0.0
    return mse, lvd


# ---------------------------------------------------------------------------
# beat alignment


def motion_velocity(motion, fps: float, layout: Optional[PartLayout] = None) -> np.ndarray:
    """Mean body-joint angular speed (rad/s) at interior frames via central differences.

    Entry t corresponds to frame t + 1.
    """
    x = _motion_array(motion)[..., body_joint_channels(layout)]
    if x.shape[0] < 3:
        return np.zeros(0)
    r6 = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64)).reshape(x.shape[0], -1, 6)
    R = rot6d_to_matrix_torch(r6)
    M = R[2:] @ R[:-2].transpose(-1, -2)
    cos = ((M.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0) / 2.0).clamp(-1.0, 1.0)
    return (torch.arccos(cos).mean(-1) * fps / 2.0).numpy()


def motion_beats(motion, fps: float, layout: Optional[PartLayout] = None) -> np.ndarray:
    """Frame indices of local minima of the mean angular speed."""
    v = motion_velocity(motion, fps, layout)
    if v.size < 3:
        return np.zeros(0, dtype=np.int64)
    idx = np.nonzero((v[1:-1] < v[:-2]) & (v[1:-1] <= v[2:]))[0] + 1
    return idx + 1


def audio_beats(audio: AudioClip, T: Optional[int] = None, rel_height: float = 0.5) -> np.ndarray:
    """Onset-strength peaks above mean + rel_height * std."""
    T = audio.frames if T is None else T
    o = onset_strength(audio, T)
    if not np.any(o > 0):
        return np.zeros(0, dtype=np.int64)
    peaks, _ = find_peaks(np.concatenate([[0.0], o, [0.0]]), height=o.mean() + rel_height * o.std())
    return peaks - 1


def beat_align_score(audio_times, motion_times, sigma: float = 0.1) -> float:
    a = np.asarray(audio_times, np.float64)
    m = np.asarray(motion_times, np.float64)
    if a.size == 0 or m.size == 0:
        return 0.0
    d2 = ((a[:, None] - m[None, :]) ** 2).min(1)
    return float(np.exp(-d2 / (2.0 * sigma ** 2)).mean())


def beat_align(audio: AudioClip, motion, sigma: float = 0.1, layout: Optional[PartLayout] = None) -> float:
    g = _motion_array(motion)
    T = min(audio.frames, g.shape[0])
    fps = audio.fps
    return beat_align_score(audio_beats(audio, T) / fps, motion_beats(g[:T], fps, layout) / fps, sigma)


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    fgd: float
    beat_align: float
    diversity: float
    face_mse: float
    face_lvd: float
    n_real: int
    n_gen: int
    notes: List[str] = field(default_factory=lambda: list(DEVIATION_NOTES))

    def row(self) -> dict:
        d = asdict(self)
        d.pop("notes")
        return d

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.row()), lineterminator="\n")
        w.writeheader()
        w.writerow(self.row())
        if path is not None:
            Path(path).write_text(buf.getvalue())
        return buf.getvalue()

    def to_text(self, config_hash: str = "", path=None) -> str:
        lines = ["# metrics report"]
        if config_hash:
            lines.append(f"config_hash: {config_hash}")
        lines.append("deviations:")
        lines += [f"  - {n}" for n in self.notes]
        lines += [f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}" for k, v in self.row().items()]
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def evaluate(real, gen, audios: Sequence[AudioClip], fx: FeatureExtractor, sigma: float = 0.1) -> MetricsReport:
    """Full metric battery on matched real/generated clips and their audio."""
    r, g = _stack(real), _stack(gen)
    if len(r) < 2 or len(g) < 2:
        raise TooFewSamples("evaluation needs at least two clips per side")
    mse, lvd = face_error(r, g)
    ba = float(np.mean([beat_align(a, m, sigma) for a, m in zip(audios, g)])) if audios else 0.0
    return MetricsReport(fgd(r, g, fx), ba, diversity(g), mse, lvd, len(r), len(g))


def is_finite_report(rep: MetricsReport) -> bool:
    return all(math.isfinite(v) for v in (rep.fgd, rep.beat_align, rep.diversity, rep.face_mse, rep.face_lvd))
