"""Multi-granular token predictor: audio/text/hints -> per-part token pyramids."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio_features import FusionGate, RHYTHM_RAW, default_provider, rhythm_raw, transcript_raw
from .errors import LengthNotDivisible, ModelMismatch, ShapeMismatch, UnknownSpeaker
from .mgvqvae import GranularitySpec, MgvqvaeModel, MultiGranularTCN, decode_tokens
from .motion_data import (
    CONTACT_SLICE, N_CHANNELS, AudioClip, GestureSequence, PartLayout, Transcript,
    merge_parts,
)

BODY_PARTS = ("upper", "hands", "lower")
TOKEN_PARTS = ("face", "upper", "hands", "lower", "global")
CHECKPOINT_VERSION = 1


@dataclass
class PredictorConfig:
    hidden: int = 64
    feat_dim: int = 64
    text_width: int = 64
    heads: int = 4
    san_layers: int = 1
    n_speakers: int = 4
    window: int = 64
    seed_frames: int = 8
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    temperature: float = 0.0


def sinusoid(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=positions.dtype) / max(1, half))
    ang = positions[:, None] * freq[None, :]
    out = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    return F.pad(out, (0, dim - out.shape[-1]))


def level_positions(length: int, factor: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal code of each step's centre frame at a given granularity."""
    centers = (torch.arange(length, dtype=dtype) + 0.5) * factor - 0.5
    return sinusoid(centers, dim)


def mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.LeakyReLU(0.2), nn.Linear(d_hidden, d_out))


class TCAT(nn.Module):
    """Temporal cross-attention transformer decoder block with an output projection."""

    def __init__(self, dim: int, heads: int, zero_out: bool = False):
        super().__init__()
        self.layer = nn.TransformerDecoderLayer(dim, heads, 2 * dim, dropout=0.0, batch_first=True,
                                                norm_first=True)
        self.out = nn.Linear(dim, dim)
        if zero_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, query, memory, q_pos=None, m_pos=None):
        if q_pos is not None:
            query = query + q_pos
        if m_pos is not None:
            memory = memory + m_pos
        return self.out(self.layer(query, memory))


class TokenHead(nn.Module):
    """Coarse-to-fine logits: each finer level adds a projection of the coarser logits."""

    def __init__(self, hidden: int, codebook_size: int):
        super().__init__()
        self.mlp = mlp(hidden, hidden, codebook_size)
        self.up = nn.Linear(codebook_size, hidden)

    def forward(self, levels: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        n = len(levels)
        logits: List[Optional[torch.Tensor]] = [None] * n
        logits[n - 1] = self.mlp(levels[n - 1])
        for i in range(n - 2, -1, -1):
            coarse = logits[i + 1].repeat_interleave(2, dim=-2)
            logits[i] = self.mlp(levels[i] + self.up(coarse))
        return logits


def mean_pyramid(h: torch.Tensor, n: int) -> List[torch.Tensor]:
    """Level i holds non-overlapping means over windows of 2**i frames."""
    T = h.shape[-2]
    if T % 2 ** (n - 1):
        raise LengthNotDivisible(f"T={T} not divisible by {2 ** (n - 1)}")
    squeeze = h.dim() == 2
    x = (h[None] if squeeze else h).transpose(1, 2)
    out = [x] + [F.avg_pool1d(x, 2 ** i, 2 ** i) for i in range(1, n)]
    out = [o.transpose(1, 2) for o in out]
    return [o[0] for o in out] if squeeze else out


class MultiGranularPredictor(nn.Module):
    def __init__(self, cfg: PredictorConfig, spec: GranularitySpec, codebook_size: int,
                 latent_dims: Dict[str, int]):
        super().__init__()
        self.cfg, self.spec, self.codebook_size = cfg, spec, codebook_size
        self.latent_dims = dict(latent_dims)
        h, d = cfg.hidden, cfg.feat_dim
        spec.check_length(cfg.window)

        self.rhythm_proj = nn.ModuleDict({k: nn.Linear(RHYTHM_RAW, d) for k in ("face", "body")})
        self.text_proj = nn.ModuleDict({k: nn.Linear(cfg.text_width, d, bias=False) for k in ("face", "body")})
        self.gate = nn.ModuleDict({k: FusionGate(d) for k in ("face", "body")})

        self.speaker = nn.Embedding(cfg.n_speakers, d)
        self.face_mlp = mlp(2 * d, h, h)

        self.pos = nn.Parameter(torch.randn(cfg.window, h) * 0.02)
        self.hint_in = nn.Linear(N_CHANNELS, h)
        self.san = nn.TransformerEncoder(
            nn.TransformerEncoderLayer(h, cfg.heads, 2 * h, dropout=0.0, batch_first=True, norm_first=True),
            cfg.san_layers, enable_nested_tensor=False)
        self.hint_query = nn.Linear(2 * h, h)
        self.body_kv = nn.Linear(d, h)
        self.body_tcat = TCAT(h, cfg.heads, zero_out=True)
        self.split_heads = nn.ModuleDict({p: mlp(h, h, h) for p in BODY_PARTS})

        parts = ("face",) + BODY_PARTS
        self.tcn = nn.ModuleDict({p: MultiGranularTCN(h, h, h, spec) for p in parts})
        self.rec_tcat = nn.ModuleDict({p: TCAT(h, cfg.heads) for p in parts})
        self.rec_proj = nn.ModuleDict({p: nn.Linear(h, self.latent_dims[p]) for p in parts})
        self.full_tcat = nn.ModuleDict({p: TCAT(h, cfg.heads) for p in BODY_PARTS})
        self.heads = nn.ModuleDict({p: TokenHead(h, codebook_size) for p in TOKEN_PARTS})

    # -- single stages -----------------------------------------------------

    def fused(self, which: str, rhythm: torch.Tensor, text: torch.Tensor):
        r = self.rhythm_proj[which](rhythm)
        c = self.text_proj[which](text)
        return self.gate[which](r, c)

    def face_hidden(self, f_face: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
        if speaker.numel() and (int(speaker.max()) >= self.cfg.n_speakers or int(speaker.min()) < 0):
            raise UnknownSpeaker(f"speaker id outside [0, {self.cfg.n_speakers})")
        p = self.speaker(speaker)[:, None, :].expand(-1, f_face.shape[1], -1)
        return self.face_mlp(torch.cat([f_face, p], dim=-1))

    def positions(self, T: int) -> torch.Tensor:
        if T > self.pos.shape[0]:
            raise ShapeMismatch(f"window {T} longer than positional table {self.pos.shape[0]}")
        return self.pos[:T]

    def body_hints(self, g_masked: torch.Tensor, use_positions: bool = True) -> torch.Tensor:
        x = self.hint_in(g_masked)
        if use_positions:
            x = x + self.positions(x.shape[1])
        return self.san(x)

    def body_hidden(self, h_hints: torch.Tensor, f_body: torch.Tensor) -> torch.Tensor:
        p = self.positions(h_hints.shape[1]).expand(h_hints.shape[0], -1, -1)
        q = self.hint_query(torch.cat([h_hints, p], dim=-1))
        kv = self.body_kv(f_body) + p
        return h_hints + self.body_tcat(q, kv)

    def split_body_latents(self, h_body: torch.Tensor):
        return tuple(self.split_heads[p](h_body) for p in ("upper", "lower", "hands"))

    def _level_pos(self, levels):
        return [level_positions(x.shape[-2], 2 ** i, x.shape[-1], x.dtype) for i, x in enumerate(levels)]

    def cross_levels(self, tcat: TCAT, queries, memories):
        if len(queries) != len(memories):
            raise ShapeMismatch("pyramids differ in level count")
        for a, b in zip(queries, memories):
            if a.shape != b.shape:
                raise ShapeMismatch(f"level shapes {tuple(a.shape)} vs {tuple(b.shape)}")
        pos = self._level_pos(queries)
        return [tcat(q, m, p, p) for q, m, p in zip(queries, memories, pos)]

    def rec_latent(self, part: str, H_mean, H_tcn):
        fused = self.cross_levels(self.rec_tcat[part], H_mean, H_tcn)
        return fused, [self.rec_proj[part](x) for x in fused]

    def fullbody_fuse(self, H_tcn: Dict[str, List[torch.Tensor]], H_mean: Dict[str, List[torch.Tensor]]):
        shapes = {p: [tuple(x.shape) for x in H_tcn[p]] for p in BODY_PARTS}
        if len({tuple(v) for v in shapes.values()}) != 1:
            raise ShapeMismatch(f"body pyramids disagree: {shapes}")
        # summing sorted values makes the result independent of argument order to the bit
        H_full = [torch.sort(torch.stack(lv), dim=0).values.sum(0) for lv in zip(*(H_tcn[p] for p in BODY_PARTS))]
        return H_full, {p: self.cross_levels(self.full_tcat[p], H_mean[p], H_full) for p in BODY_PARTS}

    # -- full pass ---------------------------------------------------------

    def forward(self, rhythm, text, speaker, hints) -> dict:
        n = self.spec.n
        f_face, _ = self.fused("face", rhythm, text)
        f_body, _ = self.fused("body", rhythm, text)
        hidden = {"face": self.face_hidden(f_face, speaker)}
        h_hints = self.body_hints(hints)
        h_body = self.body_hidden(h_hints, f_body)
        hidden["upper"], hidden["lower"], hidden["hands"] = self.split_body_latents(h_body)

        H_mean = {p: mean_pyramid(h, n) for p, h in hidden.items()}
        H_tcn = {p: self.tcn[p](h) for p, h in hidden.items()}
        rec, face_fused = {}, None
        for p in hidden:
            fused, rec[p] = self.rec_latent(p, H_mean[p], H_tcn[p])
            if p == "face":
                face_fused = fused
        _, H_tilde = self.fullbody_fuse(H_tcn, H_mean)
        H_tilde["face"] = face_fused
        logits = {p: self.heads[p](H_tilde[p]) for p in ("face",) + BODY_PARTS}
        logits["global"] = self.heads["global"](H_tilde["lower"])
        return {"logits": logits, "rec": rec, "hidden": hidden}


# ---------------------------------------------------------------------------
# losses


def cross_entropy_levels(logits: Sequence[torch.Tensor], targets: Sequence[torch.Tensor]) -> torch.Tensor:
    """Mean token cross-entropy over every level of one part."""
    lg = torch.cat([x.reshape(-1, x.shape[-1]) for x in logits])
    tg = torch.cat([torch.as_tensor(t).reshape(-1) for t in targets]).long()
    return F.cross_entropy(lg, tg)


def latent_mse(pred: Sequence[torch.Tensor], target: Sequence[torch.Tensor]) -> torch.Tensor:
    a = torch.cat([x.reshape(-1) for x in pred])
    b = torch.cat([torch.as_tensor(x).reshape(-1) for x in target]).to(a.dtype)
    return F.mse_loss(a, b)


def predictor_loss(logits: Dict[str, Sequence[torch.Tensor]], targets: Dict[str, Sequence[torch.Tensor]],
                   rec: Optional[Dict[str, Sequence[torch.Tensor]]] = None,
                   targets_latent: Optional[Dict[str, Sequence[torch.Tensor]]] = None) -> Dict[str, torch.Tensor]:
    """Sum over parts of token cross-entropy plus latent MSE, all weights 1."""
    out: Dict[str, torch.Tensor] = {}
    total = None
    for p in logits:
        ce = cross_entropy_levels(logits[p], targets[p])
        out[f"ce_{p}"] = ce
        term = ce
        if rec is not None and targets_latent is not None and p in rec:
            mse = latent_mse(rec[p], targets_latent[p])
            out[f"mse_{p}"] = mse
            term = term + mse
        total = term if total is None else total + term
    out["total"] = total
    return out


def token_accuracy(logits: Sequence[torch.Tensor], targets: Sequence[torch.Tensor]) -> List[float]:
    return [float((lg.argmax(-1) == torch.as_tensor(t)).double().mean()) for lg, t in zip(logits, targets)]


# ---------------------------------------------------------------------------
# data preparation and training


@dataclass
class PredictorBatchData:
    rhythm: torch.Tensor  # (N, T, 2)
    text: torch.Tensor  # (N, T, k)
    speaker: torch.Tensor  # (N,)
    gesture: torch.Tensor  # (N, T, 437)
    tokens: Dict[str, List[torch.Tensor]]
    latents: Dict[str, List[torch.Tensor]]

    def __len__(self):
        return self.rhythm.shape[0]

    def select(self, idx) -> "PredictorBatchData":
        idx = torch.as_tensor(idx)
        return PredictorBatchData(
            self.rhythm[idx], self.text[idx], self.speaker[idx], self.gesture[idx],
            {p: [q[idx] for q in v] for p, v in self.tokens.items()},
            {p: [q[idx] for q in v] for p, v in self.latents.items()},
        )


def hint_mask(gesture: torch.Tensor, k_seed: int) -> torch.Tensor:
    out = torch.zeros_like(gesture)
    out[..., :k_seed, :] = gesture[..., :k_seed, :]
    return out


@torch.no_grad()
def prepare_windows(clips, vq_models: Dict[str, MgvqvaeModel], layout: PartLayout, T: int,
                    provider=None, stride: Optional[int] = None) -> PredictorBatchData:
    """Slice clips into windows and compute frozen-tokenizer targets."""
    provider = provider or default_provider()
    stride = stride or T
    R, X, S, G = [], [], [], []
    for c in clips:
        rr = rhythm_raw(c.audio, c.frames)
        tr = transcript_raw(c.transcript, c.frames, provider)
        for s in range(0, c.frames - T + 1, stride):
            R.append(rr[s:s + T])
            X.append(tr[s:s + T])
            S.append(c.speaker_id)
            G.append(c.gesture.data[s:s + T])
    if not R:
        raise ShapeMismatch(f"no clip is at least {T} frames long")
    gesture = torch.from_numpy(np.stack(G).astype(np.float32))
    tokens, latents = {}, {}
    for p, m in vq_models.items():
        x = gesture[..., torch.from_numpy(layout.indices[p])]
        tokens[p] = m.tokenize(x)
        latents[p] = [z.detach() for z in m.lookup(tokens[p])]
    return PredictorBatchData(
        torch.from_numpy(np.stack(R)), torch.from_numpy(np.stack(X)),
        torch.as_tensor(S, dtype=torch.long), gesture, tokens, latents,
    )


def check_compatible(vq_models: Dict[str, MgvqvaeModel], spec: Optional[GranularitySpec] = None) -> tuple:
    missing = [p for p in TOKEN_PARTS if p not in vq_models]
    if missing:
        raise ModelMismatch(f"missing tokenizers for {missing}")
    specs = {p: m.spec.n for p, m in vq_models.items()}
    sizes = {p: m.codebook_size for p, m in vq_models.items()}
    if len(set(specs.values())) != 1:
        raise ModelMismatch(f"tokenizers disagree on granularity count: {specs}")
    if len(set(sizes.values())) != 1:
        raise ModelMismatch(f"tokenizers disagree on codebook size: {sizes}")
    n = next(iter(specs.values()))
    if spec is not None and spec.n != n:
        raise ModelMismatch(f"predictor expects {spec.n} levels, tokenizers have {n}")
    return GranularitySpec(n), next(iter(sizes.values()))


def build_predictor(cfg: PredictorConfig, vq_models: Dict[str, MgvqvaeModel]) -> MultiGranularPredictor:
    spec, C = check_compatible(vq_models)
    torch.manual_seed(cfg.seed)
    return MultiGranularPredictor(cfg, spec, C, {p: m.dim for p, m in vq_models.items()})


def predictor_step_loss(model: MultiGranularPredictor, b: PredictorBatchData) -> Dict[str, torch.Tensor]:
    out = model(b.rhythm, b.text, b.speaker, hint_mask(b.gesture, model.cfg.seed_frames))
    return predictor_loss(out["logits"], b.tokens, out["rec"], b.latents)


def train_predictor(data: PredictorBatchData, vq_models: Dict[str, MgvqvaeModel], cfg: PredictorConfig):
    """Train with the tokenizers frozen; returns ``(model, history)``."""
    for m in vq_models.values():
        m.requires_grad_(False)
    model = build_predictor(cfg, vq_models)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    for _ in range(cfg.steps):
        b = data.select(rng.integers(0, len(data), size=min(cfg.batch_size, len(data))))
        losses = predictor_step_loss(model, b)
        opt.zero_grad()
        losses["total"].backward()
        opt.step()
        history.append({k: float(v.detach()) for k, v in losses.items()})
    model.eval()
    return model, history


@torch.no_grad()
@torch.no_grad()
def evaluate_predictor(model: MultiGranularPredictor, data: PredictorBatchData) -> dict:
    out = model(data.rhythm, data.text, data.speaker, hint_mask(data.gesture, model.cfg.seed_frames))
    acc = {p: token_accuracy(out["logits"][p], data.tokens[p]) for p in out["logits"]}
    losses = predictor_loss(out["logits"], data.tokens, out["rec"], data.latents)
    return {"accuracy": acc, "losses": {k: float(v) for k, v in losses.items()}}


# ---------------------------------------------------------------------------
# generation


@dataclass
class M3GSystem:
    vq_models: Dict[str, MgvqvaeModel]
    predictor: MultiGranularPredictor
    layout: PartLayout
    provider: object = None

    def __post_init__(self):
        spec, C = check_compatible(self.vq_models, self.predictor.spec)
        if C != self.predictor.codebook_size:
            raise ModelMismatch(f"predictor codebook {self.predictor.codebook_size} != tokenizers {C}")
        for p, m in self.vq_models.items():
            if m.d_part != self.layout.width(p):
                raise ModelMismatch(f"{p} tokenizer width {m.d_part} != layout width {self.layout.width(p)}")
        self.provider = self.provider or default_provider(self.predictor.cfg.text_width)


@torch.no_grad()
def decode_window(system: M3GSystem, logits: Dict[str, List[torch.Tensor]], temperature: float = 0.0,
                  generator: Optional[torch.Generator] = None) -> np.ndarray:
    """Token logits of one batch of windows -> (B, T, 437) motion."""
    parts = {}
    for p in TOKEN_PARTS:
        if temperature > 0:
            toks = [torch.multinomial(torch.softmax(lg.reshape(-1, lg.shape[-1]) / temperature, -1), 1,
                                      generator=generator).reshape(lg.shape[:-1]) for lg in logits[p]]
        else:
            toks = [lg.argmax(-1) for lg in logits[p]]
        parts[p] = decode_tokens(system.vq_models[p], toks).numpy()
    motion = merge_parts(parts, system.layout)
    motion[..., CONTACT_SLICE] = np.clip(motion[..., CONTACT_SLICE], 0.0, 1.0)
    return motion


@torch.no_grad()
def generate(audio: AudioClip, transcript: Transcript, speaker_id: int, seed_motion, system: M3GSystem,
             temperature: Optional[float] = None, seed: int = 0) -> GestureSequence:
    """Sliding-window generation; each window is seeded by the previous window's last frames."""
    model = system.predictor
    cfg = model.cfg
    T, k = cfg.window, cfg.seed_frames
    temperature = cfg.temperature if temperature is None else temperature
    L = audio.frames
    seed_motion = np.asarray(getattr(seed_motion, "data", seed_motion), dtype=np.float32)
    if seed_motion.shape != (k, N_CHANNELS):
        raise ShapeMismatch(f"seed motion must be {k} x {N_CHANNELS}, got {seed_motion.shape}")
    if not 0 <= speaker_id < cfg.n_speakers:
        raise UnknownSpeaker(f"speaker {speaker_id} not in [0, {cfg.n_speakers})")

    stride = T - k
    n_win = max(1, math.ceil(max(L - k, 1) / stride))
    L_pad = k + n_win * stride
    rr = np.zeros((L_pad, RHYTHM_RAW), dtype=np.float32)
    rr[:L] = rhythm_raw(audio, L)
    tx = np.zeros((L_pad, cfg.text_width), dtype=np.float32)
    tx[:L] = transcript_raw(transcript, L, system.provider)

    out = np.zeros((L_pad, N_CHANNELS), dtype=np.float32)
    out[:k] = seed_motion
    gen = torch.Generator().manual_seed(seed)
    spk = torch.tensor([speaker_id])
    for w in range(n_win):
        s = w * stride
        hints = np.zeros((1, T, N_CHANNELS), dtype=np.float32)
        hints[0, :k] = out[s:s + k]
        res = model(torch.from_numpy(rr[None, s:s + T]), torch.from_numpy(tx[None, s:s + T]), spk,
                    torch.from_numpy(hints))
        motion = decode_window(system, res["logits"], temperature, gen)[0]
        out[s + k:s + T] = motion[k:]
    return GestureSequence(out[:L], audio.fps)


# ---------------------------------------------------------------------------
# persistence


def save_predictor(model: MultiGranularPredictor, path, layout: PartLayout) -> Path:
    payload = {
        "format": "m3g-predictor",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "granularity": {"n": model.spec.n, "factors": model.spec.factors},
        "codebook_size": model.codebook_size,
        "latent_dims": model.latent_dims,
        "layout_digest": layout.digest(),
        "speaker_table": model.speaker.weight.detach().clone(),
        "state_dict": model.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_predictor(path, layout: Optional[PartLayout] = None) -> MultiGranularPredictor:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "m3g-predictor" or payload.get("version") != CHECKPOINT_VERSION:
        raise ModelMismatch(f"{path} is not a supported predictor checkpoint")
    if layout is not None and payload["layout_digest"] != layout.digest():
        raise ModelMismatch("predictor was trained with a different part layout")
    cfg = PredictorConfig(**payload["config"])
    model = MultiGranularPredictor(cfg, GranularitySpec(payload["granularity"]["n"]),
                                   payload["codebook_size"], payload["latent_dims"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
