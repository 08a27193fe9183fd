"""Holistic gesture data model, file ingestion, synthetic corpus and part layout.

A gesture frame has 437 channels::

    [0, 330)    55 joints x Rot6D (first two rotation-matrix columns)
    [330, 430)  100 face expression parameters
    [430, 434)  4 foot-contact labels in [0, 1]
    [434, 437)  3 global translation values
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
import yaml
from scipy.io import wavfile
from scipy.spatial.transform import Rotation

from .errors import (
    ConfigError,
    DegenerateInput,
    InvalidDuration,
    LengthMismatch,
    LengthNotDivisible,
    MissingStream,
    ShapeMismatch,
)

N_JOINTS = 55
ROT_DIM = 6
N_JOINT_CH = N_JOINTS * ROT_DIM  # 330
N_FACE = 100
N_CONTACT = 4
N_TRANS = 3
N_CHANNELS = N_JOINT_CH + N_FACE + N_CONTACT + N_TRANS  # 437

FACE_SLICE = slice(N_JOINT_CH, N_JOINT_CH + N_FACE)
CONTACT_SLICE = slice(N_JOINT_CH + N_FACE, N_JOINT_CH + N_FACE + N_CONTACT)
TRANS_SLICE = slice(N_JOINT_CH + N_FACE + N_CONTACT, N_CHANNELS)

PART_NAMES = ("face", "upper", "hands", "lower", "global")

# SMPL-X joint order
LOWER_JOINTS = (0, 1, 2, 4, 5, 7, 8, 10, 11)  # pelvis, hips, knees, ankles, feet
HAND_JOINTS = tuple(range(25, 55))
FACE_JOINTS = (22,)  # jaw
UPPER_JOINTS = tuple(
    j for j in range(N_JOINTS) if j not in LOWER_JOINTS + HAND_JOINTS + FACE_JOINTS
)
FOOT_JOINTS = (7, 8, 10, 11)

DEFAULT_FPS = 30.0
DEFAULT_SAMPLE_RATE = 16000


# ---------------------------------------------------------------------------
# rotations


def rot6d_to_matrix(r6, eps: float = 1e-8) -> np.ndarray:
    """Gram-Schmidt completion of a 6D rotation (two stacked columns) to 3x3.

    Accepts a single 6-vector or any array of shape (..., 6). Raises
    DegenerateInput when a column is zero or the two columns are parallel.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape[-1] != 6:
        raise ShapeMismatch(f"expected trailing dimension 6, got {r6.shape}")
    a1, a2 = r6[..., :3], r6[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < eps):
        raise DegenerateInput("zero first column in Rot6D input")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < eps * np.maximum(1.0, np.linalg.norm(a2, axis=-1, keepdims=True))):
        raise DegenerateInput("parallel or zero columns in Rot6D input")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def rot6d_to_matrix_torch(r6: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Differentiable batched variant used by the losses; never raises."""
    a1, a2 = r6[..., :3], r6[..., 3:]
    b1 = a1 / a1.norm(dim=-1, keepdim=True).clamp_min(eps)
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = u2 / u2.norm(dim=-1, keepdim=True).clamp_min(eps)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def axis_angle_to_rot6d(aa: np.ndarray) -> np.ndarray:
    """(L, J*3) axis-angle -> (L, J*6) Rot6D."""
    aa = np.asarray(aa, dtype=np.float64)
    L = aa.shape[0]
    mats = Rotation.from_rotvec(aa.reshape(-1, 3)).as_matrix()
    return matrix_to_rot6d(mats).reshape(L, -1)


def rot6d_to_axis_angle(r6: np.ndarray) -> np.ndarray:
    r6 = np.asarray(r6, dtype=np.float64)
    L = r6.shape[0]
    mats = rot6d_to_matrix(r6.reshape(-1, 6))
    return Rotation.from_matrix(mats).as_rotvec().reshape(L, -1)


# ---------------------------------------------------------------------------
# data types


@dataclass
class GestureSequence:
    data: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[1] != N_CHANNELS:
            raise ShapeMismatch(f"gesture must be L x {N_CHANNELS}, got {self.data.shape}")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def joints(self) -> np.ndarray:
        return self.data[:, :N_JOINT_CH].reshape(self.frames, N_JOINTS, ROT_DIM)

    @property
    def face(self) -> np.ndarray:
        return self.data[:, FACE_SLICE]

    @property
    def contacts(self) -> np.ndarray:
        return self.data[:, CONTACT_SLICE]

    @property
    def trans(self) -> np.ndarray:
        return self.data[:, TRANS_SLICE]

    def rotations(self) -> np.ndarray:
        """(L, 55, 3, 3) orthonormalized joint rotations."""
        return rot6d_to_matrix(self.joints)

    def check(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise ShapeMismatch("non-finite gesture values")
        c = self.contacts
        if c.size and (c.min() < 0 or c.max() > 1):
            raise ShapeMismatch("contact labels outside [0, 1]")
        det = np.linalg.det(self.rotations())
        if not np.allclose(det, 1.0, atol=1e-5):
            raise ShapeMismatch("Rot6D block does not complete to a proper rotation")

    def window(self, start: int, length: int) -> "GestureSequence":
        return GestureSequence(self.data[start:start + length], self.fps)


@dataclass
class AudioClip:
    """Mono waveform holding exactly ``ceil(frames * sf)`` samples.

    Frame ``t`` owns the ``floor(sf)`` samples starting at ``floor(t * sf)``;
    the running fractional offset keeps frames aligned when ``sf`` is not an
    integer.
    """

    samples: np.ndarray
    sample_rate: int
    fps: float
    frames: int

    def __post_init__(self):
        if self.sample_rate <= 0 or self.fps <= 0:
            raise ConfigError("sample_rate and fps must be positive")
        need = samples_for_frames(self.frames, self.sf)
        s = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if s.shape[0] < need:
            s = np.pad(s, (0, need - s.shape[0]))
        self.samples = s[:need]

    @property
    def sf(self) -> float:
        return self.sample_rate / self.fps

    @property
    def window_size(self) -> int:
        return int(math.floor(self.sf))

    def frame_start(self, t: int) -> int:
        return int(math.floor(t * self.sf + 1e-9))

    def frame_window(self, t: int) -> np.ndarray:
        s = self.frame_start(t)
        return self.samples[s:s + self.window_size]

    def frame_windows(self) -> np.ndarray:
        """(frames, floor(sf)) view of the per-frame sample windows."""
        starts = np.floor(np.arange(self.frames) * self.sf + 1e-9).astype(np.int64)
        idx = starts[:, None] + np.arange(self.window_size)[None, :]
        return self.samples[idx]

    def slice_frames(self, start: int, length: int) -> "AudioClip":
        s = self.frame_start(start)
        n = samples_for_frames(length, self.sf)
        return AudioClip(self.samples[s:s + n], self.sample_rate, self.fps, length)


def samples_for_frames(frames: int, sf: float) -> int:
    return int(math.ceil(frames * sf - 1e-9))


@dataclass
class Transcript:
    words: List[Tuple[str, int, int]] = field(default_factory=list)

    def validate(self, frames: int) -> None:
        prev_end = 0
        for w, s, e in self.words:
            if not (0 <= s <= e <= frames):
                raise ShapeMismatch(f"word {w!r} interval [{s}, {e}) outside [0, {frames}]")
            if s < prev_end:
                raise ShapeMismatch(f"word {w!r} overlaps previous word")
            prev_end = e

    def slice_frames(self, start: int, length: int) -> "Transcript":
        out = []
        for w, s, e in self.words:
            s2, e2 = max(s, start) - start, min(e, start + length) - start
            if e2 > s2:
                out.append((w, s2, e2))
        return Transcript(out)


@dataclass
class Clip:
    gesture: GestureSequence
    audio: AudioClip
    transcript: Transcript
    speaker_id: int = 0

    def __post_init__(self):
        L = self.gesture.frames
        if self.audio.frames != L:
            raise LengthMismatch(f"audio covers {self.audio.frames} frames, gesture {L}")
        if abs(self.audio.fps - self.gesture.fps) > 1e-9:
            raise ShapeMismatch("audio and gesture disagree on fps")
        self.transcript.validate(L)

    @property
    def frames(self) -> int:
        return self.gesture.frames

    def window(self, start: int, length: int) -> "Clip":
        return Clip(
            self.gesture.window(start, length),
            self.audio.slice_frames(start, length),
            self.transcript.slice_frames(start, length),
            self.speaker_id,
        )


# ---------------------------------------------------------------------------
# part layout


def _joint_channels(joints: Sequence[int]) -> List[int]:
    return [6 * j + k for j in joints for k in range(6)]


@dataclass
class PartLayout:
    """Channel-index lists of the five body parts.

    Within every part the Rot6D joint channels come first (``rot_joints[part]``
    joints, 6 channels each); any remaining channels are plain values.
    """

    indices: Dict[str, np.ndarray]
    rot_joints: Dict[str, int]

    def __post_init__(self):
        self.indices = {k: np.asarray(v, dtype=np.int64) for k, v in self.indices.items()}
        if set(self.indices) != set(PART_NAMES):
            raise ConfigError(f"layout must define exactly {PART_NAMES}")
        allc = np.concatenate([self.indices[p] for p in PART_NAMES])
        if allc.size != N_CHANNELS or np.unique(allc).size != N_CHANNELS \
                or allc.min() != 0 or allc.max() != N_CHANNELS - 1:
            raise ConfigError("part index lists must be disjoint and cover all 437 channels")

    @classmethod
    def from_joints(cls, face, upper, hands, lower) -> "PartLayout":
        joint_sets = {"face": face, "upper": upper, "hands": hands, "lower": lower}
        idx = {p: _joint_channels(js) for p, js in joint_sets.items()}
        idx["face"] = idx["face"] + list(range(FACE_SLICE.start, FACE_SLICE.stop))
        idx["global"] = list(range(CONTACT_SLICE.start, N_CHANNELS))
        rot = {p: len(js) for p, js in joint_sets.items()}
        rot["global"] = 0
        return cls(idx, rot)

    @classmethod
    def default(cls) -> "PartLayout":
        return cls.from_joints(FACE_JOINTS, UPPER_JOINTS, HAND_JOINTS, LOWER_JOINTS)

    @classmethod
    def from_file(cls, path) -> "PartLayout":
        spec = yaml.safe_load(Path(path).read_text())
        try:
            return cls.from_joints(spec["face"], spec["upper"], spec["hands"], spec["lower"])
        except KeyError as e:
            raise ConfigError(f"layout file missing part {e}") from None

    def width(self, part: str) -> int:
        return int(self.indices[part].size)

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in PART_NAMES:
            h.update(p.encode())
            h.update(self.indices[p].tobytes())
        return h.hexdigest()[:16]


def split_parts(g, layout: PartLayout) -> Dict[str, np.ndarray]:
    data = g.data if isinstance(g, GestureSequence) else np.asarray(g)
    return {p: data[..., layout.indices[p]] for p in PART_NAMES}


def merge_parts(parts: Dict[str, np.ndarray], layout: PartLayout) -> np.ndarray:
    first = parts[PART_NAMES[0]]
    out = np.zeros(first.shape[:-1] + (N_CHANNELS,), dtype=first.dtype)
    for p in PART_NAMES:
        out[..., layout.indices[p]] = parts[p]
    return out


def mask_for_hints(g: GestureSequence, k_seed: int) -> GestureSequence:
    if not 0 <= k_seed <= g.frames:
        raise ValueError(f"k_seed must lie in [0, {g.frames}]")
    data = np.zeros_like(g.data)
    data[:k_seed] = g.data[:k_seed]
    return GestureSequence(data, g.fps)


# ---------------------------------------------------------------------------
# file ingestion


def _find_one(root: Path, patterns: Sequence[str], what: str) -> Path:
    for pat in patterns:
        hits = sorted(root.glob(pat))
        if hits:
            return hits[0]
    raise MissingStream(f"no {what} file in {root}")


def read_transcript(path, fps: float, frames: int) -> Transcript:
    words = []
    prev_end = 0
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ShapeMismatch(f"bad transcript line: {line!r}")
        w, s, e = parts[0], float(parts[1]), float(parts[2])
        sf = min(max(int(round(s * fps)), prev_end), frames)
        ef = min(max(int(round(e * fps)), sf), frames)
        if ef > sf:
            words.append((w, sf, ef))
            prev_end = ef
    return Transcript(words)


def write_transcript(t: Transcript, path, fps: float) -> None:
    lines = [f"{w}\t{s / fps:.6f}\t{e / fps:.6f}" for w, s, e in t.words]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _read_wav(path) -> Tuple[int, np.ndarray]:
    sr, x = wavfile.read(path)
    if x.ndim > 1:
        x = x.mean(axis=1)
    if np.issubdtype(x.dtype, np.integer):
        x = x.astype(np.float32) / float(np.iinfo(x.dtype).max)
    return int(sr), np.asarray(x, dtype=np.float32)


def load_clip(path, fps: float = DEFAULT_FPS, strict: bool = True) -> Clip:
    """Read a clip directory: ``*.npz`` motion archive, ``*.wav``, ``*.txt``.

    The archive holds ``poses`` (L x 165 axis-angle), ``expressions`` (L x 100),
    ``trans`` (L x 3) and ``contacts`` (L x 4); an optional ``mocap_frame_rate``
    triggers nearest-frame resampling to ``fps``. Audio and motion may disagree
    by at most one frame unless ``strict`` is False.
    """
    root = Path(path)
    if not root.is_dir():
        raise MissingStream(f"{root} is not a directory")
    motion_p = _find_one(root, ["*.npz"], "motion archive")
    wav_p = _find_one(root, ["*.wav"], "waveform")
    txt_p = _find_one(root, ["*.txt", "*.tsv"], "word-timing")

    with np.load(motion_p, allow_pickle=False) as z:
        arrays = {}
        for key, width in (("poses", N_JOINTS * 3), ("expressions", N_FACE),
                           ("trans", N_TRANS), ("contacts", N_CONTACT)):
            if key not in z:
                raise MissingStream(f"motion archive lacks {key!r}")
            a = np.asarray(z[key], dtype=np.float64)
            if a.ndim != 2 or a.shape[1] != width:
                raise ShapeMismatch(f"{key}: expected L x {width}, got {a.shape}")
            arrays[key] = a
        src_fps = float(z["mocap_frame_rate"]) if "mocap_frame_rate" in z else fps
        speaker = int(z["speaker_id"]) if "speaker_id" in z else 0

    lens = {a.shape[0] for a in arrays.values()}
    if len(lens) != 1:
        raise ShapeMismatch(f"motion streams disagree on length: {sorted(lens)}")
    n_src = lens.pop()
    if abs(src_fps - fps) > 1e-6:
        n_dst = int(math.floor(n_src * fps / src_fps))
        pick = np.minimum(np.round(np.arange(n_dst) * src_fps / fps).astype(np.int64), n_src - 1)
        arrays = {k: v[pick] for k, v in arrays.items()}
    n_motion = next(iter(arrays.values())).shape[0]

    sr, samples = _read_wav(wav_p)
    sf = sr / fps
    n_audio = int(round(samples.shape[0] / sf))
    if strict and abs(n_audio - n_motion) > 1:
        raise LengthMismatch(f"audio spans {n_audio} frames but motion has {n_motion}")
    L = min(n_motion, n_audio) if strict else n_motion

    data = np.concatenate([
        axis_angle_to_rot6d(arrays["poses"][:L]),
        arrays["expressions"][:L],
        np.clip(arrays["contacts"][:L], 0.0, 1.0),
        arrays["trans"][:L],
    ], axis=1)
    gesture = GestureSequence(data, fps)
    audio = AudioClip(samples, sr, fps, L)
    transcript = read_transcript(txt_p, fps, L)
    return Clip(gesture, audio, transcript, speaker)


def save_clip(clip: Clip, path) -> Path:
    """Write a clip in the layout ``load_clip`` reads."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    g = clip.gesture
    np.savez(
        root / "motion.npz",
        poses=rot6d_to_axis_angle(g.data[:, :N_JOINT_CH]),
        expressions=g.face.astype(np.float64),
        trans=g.trans.astype(np.float64),
        contacts=g.contacts.astype(np.float64),
        speaker_id=np.int64(clip.speaker_id),
    )
    wavfile.write(root / "audio.wav", clip.audio.sample_rate, clip.audio.samples.astype(np.float32))
    write_transcript(clip.transcript, root / "words.txt", g.fps)
    return root


# ---------------------------------------------------------------------------
# synthetic corpus

_VOCAB = [
    "yes", "well", "maybe", "look", "here", "there", "really", "never",
    "always", "think", "right", "left", "small", "huge", "nothing", "every",
    "quick", "slow", "again", "stop", "open", "close", "around", "through",
]


def _is_pow2(d: int) -> bool:
    return isinstance(d, (int, np.integer)) and d >= 1 and (d & (d - 1)) == 0


def _motif_shape(rng: np.random.Generator, D: int) -> np.ndarray:
    if D == 1:
        return np.ones(1)
    if D == 2:
        return np.array([1.0, -1.0])
    t = np.arange(D) / D
    y = np.zeros(D)
    for k in range(1, min(3, D // 2) + 1):
        a, b = rng.normal(size=2) / k
        y += a * np.cos(2 * np.pi * k * t) + b * np.sin(2 * np.pi * k * t)
    return y / (np.abs(y).max() + 1e-12)


def _motif_gain(D: int) -> float:
    return {1: 1.0, 2: 0.25, 4: 0.5}.get(D, 1.0)


def synth_corpus(seed: int, n_clips: int, L: int, granule_menu: Sequence[int] = (1, 2, 4, 8, 16),
                 fps: float = DEFAULT_FPS, sample_rate: int = DEFAULT_SAMPLE_RATE,
                 n_speakers: int = 4, n_latent: int = 12, motifs_per_duration: int = 4) -> List[Clip]:
    """Deterministic desk-scale corpus of periodic motif mixtures.

    Each clip sums, for every duration D in ``granule_menu``, one motif of
    period D drawn from a corpus-wide library, modulated by a slow positive
    envelope. The latent mixture drives joint rotations, face parameters and
    translation through fixed random maps. The paired audio's amplitude
    envelope follows motion speed and the transcript's words name the
    coarsest motif.
    """
    menu = [int(d) for d in granule_menu]
    if not menu:
        raise InvalidDuration("granule_menu is empty")
    for d in menu:
        if not _is_pow2(d) or d > 16:
            raise InvalidDuration(f"motif duration {d} is not a power of two in [1, 16]")
    if L % max(menu):
        raise LengthNotDivisible(f"L={L} not divisible by {max(menu)}")
    if n_clips <= 0:
        return []

    crng = np.random.default_rng([seed, 0xC0DE])
    K = n_latent
    w_aa = crng.normal(size=(N_JOINTS * 3, K)) / math.sqrt(K)
    w_face = crng.normal(size=(N_FACE, K)) / math.sqrt(K)
    w_trans = crng.normal(size=(N_TRANS, K)) / math.sqrt(K)
    library = {D: [_motif_shape(crng, D) for _ in range(motifs_per_duration)] for D in menu}
    directions = {D: crng.normal(size=(motifs_per_duration, K)) for D in menu}
    spk_gain = 0.8 + 0.4 * crng.random(n_speakers)
    spk_pose = 0.3 * crng.normal(size=(n_speakers, K))
    coarse = max(menu)
    vocab = np.array(_VOCAB)
    n_per_motif = max(1, len(vocab) // motifs_per_duration)

    t = np.arange(L)
    clips = []
    for i in range(n_clips):
        rng = np.random.default_rng([seed, i])
        spk = int(rng.integers(n_speakers))
        latent = np.tile(spk_pose[spk], (L, 1))
        coarse_id = 0
        for D in menu:
            m = int(rng.integers(motifs_per_duration))
            if D == coarse:
                coarse_id = m
            u = directions[D][m] + 0.3 * rng.normal(size=K)
            u /= np.linalg.norm(u) + 1e-12
            phase, rate = rng.random() * 2 * np.pi, 0.5 + rng.random()
            env = 1.0 + 0.3 * np.sin(2 * np.pi * rate * t / L + phase)
            shape = library[D][m][t % D]
            latent += (spk_gain[spk] * _motif_gain(D) * env * shape)[:, None] * u[None, :]

        aa = 0.6 * np.tanh(latent @ w_aa.T)
        face = 3.0 * np.tanh(latent @ w_face.T / 3.0)
        trans = 0.5 * np.tanh(latent @ w_trans.T)
        aa_j = aa.reshape(L, N_JOINTS, 3)
        foot_speed = np.zeros((L, len(FOOT_JOINTS)))
        foot_speed[1:] = np.linalg.norm(np.diff(aa_j[:, FOOT_JOINTS], axis=0), axis=-1)
        thr = np.median(foot_speed) + 1e-6
        contacts = 1.0 / (1.0 + np.exp(8.0 * (foot_speed / thr - 1.0)))
        data = np.concatenate([axis_angle_to_rot6d(aa), face, contacts, trans], axis=1)
        gesture = GestureSequence(data, fps)

        speed = np.zeros(L)
        speed[1:] = np.abs(np.diff(latent, axis=0)).mean(axis=1)
        speed[0] = speed[1] if L > 1 else 0.0
        env = speed / (speed.max() + 1e-12)
        n_samp = samples_for_frames(L, sample_rate / fps)
        ts = np.arange(n_samp) / sample_rate
        env_s = np.interp(ts * fps, t, env)
        carrier = 0.6 * np.sin(2 * np.pi * 220.0 * ts) + 0.4 * rng.normal(size=n_samp)
        audio = AudioClip((0.8 * env_s * carrier).astype(np.float32), sample_rate, fps, L)

        words = []
        for s0 in range(0, L, coarse):
            if rng.random() < 0.15:
                continue
            w = vocab[(coarse_id * n_per_motif + int(rng.integers(n_per_motif))) % len(vocab)]
            length = max(1, int(rng.integers(max(1, coarse // 2), coarse + 1)))
            words.append((str(w), s0, min(L, s0 + length)))
        clips.append(Clip(gesture, audio, Transcript(words), spk))
    return clips


def gestures_array(clips: Sequence[Clip]) -> np.ndarray:
    """Stack equal-length clips into (N, L, 437)."""
    return np.stack([c.gesture.data for c in clips]).astype(np.float32)


def windows(clips: Sequence[Clip], T: int, stride: int | None = None) -> np.ndarray:
    """Cut every clip into length-T windows; returns (N, T, 437)."""
    stride = stride or T
    out = []
    for c in clips:
        for s in range(0, c.frames - T + 1, stride):
            out.append(c.gesture.data[s:s + T])
    if not out:
        return np.zeros((0, T, N_CHANNELS), dtype=np.float32)
    return np.stack(out).astype(np.float32)
