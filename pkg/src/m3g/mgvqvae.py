"""Multi-granular VQ-VAE: TCN encoder bank, shared codebook, TransTCN decoder bank."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, LengthNotDivisible, ModelMismatch, ShapeMismatch
from .motion_data import PART_NAMES, Clip, PartLayout, rot6d_to_matrix_torch, windows

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
TOKEN_STREAM_VERSION = 1


@dataclass(frozen=True)
class GranularitySpec:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("granularity count must be >= 1")

    @property
    def factors(self) -> List[int]:
        return [2 ** i for i in range(self.n)]

    def check_length(self, T: int) -> None:
        if T % self.factors[-1]:
            raise LengthNotDivisible(f"T={T} not divisible by {self.factors[-1]}")

    def lengths(self, T: int) -> List[int]:
        self.check_length(T)
        return [T // f for f in self.factors]


# ---------------------------------------------------------------------------
# convolutions


def normalized_conv(x, weight, bias=None, stride: int = 1, padding: int = 0, scaled: bool = True):
    """Temporal convolution of a (T, d_in) or (B, T, d_in) input, divided by kernel size.

    ``weight`` has shape (d_out, d_in, ks).
    """
    x = torch.as_tensor(x)
    weight = torch.as_tensor(weight, dtype=x.dtype)
    if bias is not None:
        bias = torch.as_tensor(bias, dtype=x.dtype)
    squeeze = x.dim() == 2
    xb = x.unsqueeze(0) if squeeze else x
    y = F.conv1d(xb.transpose(1, 2), weight, bias, stride=stride, padding=padding).transpose(1, 2)
    if scaled:
        y = y / weight.shape[-1]
    return y[0] if squeeze else y


class NormConv1d(nn.Conv1d):
    """Conv1d whose output (bias included) is divided by the kernel size."""

    def __init__(self, *args, scaled: bool = True, **kwargs):
        super().__init__(*args, **kwargs)
        self.scaled = scaled

    def forward(self, x):
        y = super().forward(x)
        return y / self.kernel_size[0] if self.scaled else y


class NormConvTranspose1d(nn.ConvTranspose1d):
    def __init__(self, *args, scaled: bool = True, **kwargs):
        super().__init__(*args, **kwargs)
        self.scaled = scaled

    def forward(self, x):
        y = super().forward(x)
        return y / self.kernel_size[0] if self.scaled else y


def tcn_level(d_in: int, width: int, d_out: int, level: int, scaled: bool = True) -> nn.Sequential:
    """Encoder stack for one level: a stride-1 block then ``level`` stride-2 blocks."""
    layers: List[nn.Module] = [NormConv1d(d_in, width, 3, 1, 1, scaled=scaled), nn.LeakyReLU(0.2)]
    for _ in range(level):
        layers += [NormConv1d(width, width, 4, 2, 1, scaled=scaled), nn.LeakyReLU(0.2)]
    layers.append(NormConv1d(width, d_out, 1, scaled=scaled))
    return nn.Sequential(*layers)


def transtcn_level(d_in: int, width: int, d_out: int, level: int, scaled: bool = True) -> nn.Sequential:
    """Mirror of ``tcn_level``: ``level`` stride-2 transposed blocks upsample back to T."""
    layers: List[nn.Module] = [NormConv1d(d_in, width, 1, scaled=scaled), nn.LeakyReLU(0.2)]
    for _ in range(level):
        layers += [NormConvTranspose1d(width, width, 4, 2, 1, scaled=scaled), nn.LeakyReLU(0.2)]
    layers.append(NormConv1d(width, d_out, 3, 1, 1, scaled=scaled))
    return nn.Sequential(*layers)


class MultiGranularTCN(nn.Module):
    """n parallel TCN stacks; level i maps (B, T, d_in) to (B, T / 2**i, d_out)."""

    def __init__(self, d_in: int, width: int, d_out: int, spec: GranularitySpec, scaled: bool = True):
        super().__init__()
        self.spec = spec
        self.levels = nn.ModuleList(tcn_level(d_in, width, d_out, i, scaled) for i in range(spec.n))

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        self.spec.check_length(x.shape[1])
        xt = x.transpose(1, 2)
        return [lvl(xt).transpose(1, 2) for lvl in self.levels]


class MultiGranularTransTCN(nn.Module):
    def __init__(self, d_in: int, width: int, d_out: int, spec: GranularitySpec, scaled: bool = True):
        super().__init__()
        self.spec = spec
        self.levels = nn.ModuleList(transtcn_level(d_in, width, d_out, i, scaled) for i in range(spec.n))

    def level_outputs(self, pyramid: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        if len(pyramid) != self.spec.n:
            raise ShapeMismatch(f"expected {self.spec.n} levels, got {len(pyramid)}")
        T = pyramid[0].shape[1]
        outs = []
        for i, (lvl, f) in enumerate(zip(self.levels, pyramid)):
            if f.shape[1] * 2 ** i != T:
                raise ShapeMismatch(f"level {i} has length {f.shape[1]}, expected {T // 2 ** i}")
            outs.append(lvl(f.transpose(1, 2)).transpose(1, 2))
        return outs

    def forward(self, pyramid: Sequence[torch.Tensor]) -> torch.Tensor:
        return torch.stack(self.level_outputs(pyramid)).sum(0)


# ---------------------------------------------------------------------------
# quantizer


def nearest_codes(flat: torch.Tensor, codebook: torch.Tensor, tie_rtol: float = 1e-10) -> torch.Tensor:
    """argmin_j ||z_j - f||_2 per row, ties broken to the lowest index.

    Squared distances are expanded in float64; entries within ``tie_rtol`` of
    the row minimum count as tied so rounding never reorders equal distances.
    """
    if flat.shape[0] == 0:
        return torch.zeros(0, dtype=torch.long)
    f = flat.double()
    z = codebook.double()
    d = (f * f).sum(1, keepdim=True) - 2.0 * f @ z.T + (z * z).sum(1)[None, :]
    dmin = d.min(1, keepdim=True).values
    scale = (f * f).sum(1, keepdim=True) + (z * z).sum(1).max()
    tied = d <= dmin + tie_rtol * scale
    # first True per row
    return tied.to(torch.int8).argmax(1)


def quantize(F_levels: Sequence[torch.Tensor], Z: torch.Tensor):
    """Map every level of the latent pyramid onto the one shared codebook.

    Returns ``(tokens, quantized)``; quantized level i is ``Z[tokens[i]]``.
    """
    Z = torch.as_tensor(Z)
    tokens, quantized = [], []
    for f in F_levels:
        f = torch.as_tensor(f)
        if f.shape[-1] != Z.shape[-1]:
            raise ShapeMismatch(f"embedding width {f.shape[-1]} != codebook width {Z.shape[-1]}")
        with torch.no_grad():
            q = nearest_codes(f.reshape(-1, f.shape[-1]).to(Z.dtype), Z.detach()).reshape(f.shape[:-1])
        tokens.append(q)
        quantized.append(F.embedding(q, Z))
    return tokens, quantized


def lookup(tokens: Sequence[torch.Tensor], Z: torch.Tensor) -> List[torch.Tensor]:
    return [F.embedding(torch.as_tensor(q, dtype=torch.long), Z) for q in tokens]


def straight_through(F_levels, Fq_levels) -> List[torch.Tensor]:
    """Forward value of the quantized latents, gradient copied onto the encoder output."""
    return [f + (fq - f).detach() for f, fq in zip(F_levels, Fq_levels)]


# ---------------------------------------------------------------------------
# model


class MgvqvaeModel(nn.Module):
    def __init__(self, d_part: int, spec: GranularitySpec, codebook_size: int = 256, dim: int = 128,
                 width: int = 128, rot_joints: int = 0, scaled: bool = True):
        super().__init__()
        if codebook_size < 2:
            raise ConfigError("codebook needs at least 2 entries")
        self.d_part, self.spec, self.rot_joints = d_part, spec, rot_joints
        self.codebook_size, self.dim, self.width, self.scaled = codebook_size, dim, width, scaled
        self.encoder = MultiGranularTCN(d_part, width, dim, spec, scaled)
        self.decoder = MultiGranularTransTCN(dim, width, d_part, spec, scaled)
        self.codebook = nn.Parameter(torch.randn(codebook_size, dim) / math.sqrt(dim))

    def arch(self) -> dict:
        return dict(d_part=self.d_part, n=self.spec.n, codebook_size=self.codebook_size, dim=self.dim,
                    width=self.width, rot_joints=self.rot_joints, scaled=self.scaled)

    def encode(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self.encoder(x)

    def decode(self, pyramid: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.decoder(pyramid)

    def tokenize(self, x: torch.Tensor) -> List[torch.Tensor]:
        return quantize(self.encode(x), self.codebook)[0]

    def lookup(self, tokens: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        return lookup(tokens, self.codebook)

    def forward(self, x: torch.Tensor) -> dict:
        F_levels = self.encode(x)
        tokens, Fq = quantize(F_levels, self.codebook)
        x_hat = self.decode(straight_through(F_levels, Fq))
        return {"x_hat": x_hat, "F": F_levels, "F_hat": Fq, "tokens": tokens}


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def width_for_budget(d_part: int, spec: GranularitySpec, codebook_size: int, dim: int, budget: int) -> int:
    """Largest hidden width whose parameter count does not exceed ``budget``."""
    lo, hi = 1, 4096

    def count(w):
        return param_count(MgvqvaeModel(d_part, spec, codebook_size, dim, w))

    if count(lo) > budget:
        return lo
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if count(mid) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return lo


# public operation forms on single (T, d) tensors

def encode(g_part, model: MgvqvaeModel) -> List[torch.Tensor]:
    x = torch.as_tensor(np.asarray(g_part) if not torch.is_tensor(g_part) else g_part,
                        dtype=next(model.parameters()).dtype)
    return [f[0] for f in model.encode(x[None])]


def decode(F_hat: Sequence[torch.Tensor], model: MgvqvaeModel) -> torch.Tensor:
    return model.decode([torch.as_tensor(f)[None] for f in F_hat])[0]


# ---------------------------------------------------------------------------
# losses


def geodesic_angles(r6_a: torch.Tensor, r6_b: torch.Tensor) -> torch.Tensor:
    """Rotation angle between paired Rot6D values, shape (...,)."""
    Ra, Rb = rot6d_to_matrix_torch(r6_a), rot6d_to_matrix_torch(r6_b)
    M = Ra @ Rb.transpose(-1, -2)
    cos = (M.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0) / 2.0
    axis = torch.stack([M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0],
                        M[..., 1, 0] - M[..., 0, 1]], dim=-1) / 2.0
    sin = (axis * axis).sum(-1).clamp_min(1e-20).sqrt()
    return torch.atan2(sin, cos)


def geodesic_loss(r6_a: torch.Tensor, r6_b: torch.Tensor) -> torch.Tensor:
    return geodesic_angles(r6_a, r6_b).mean()


def _rot_joints_for(part: Optional[str], rot_joints: Optional[int]) -> int:
    if rot_joints is not None:
        return rot_joints
    if part is None:
        return 0
    return PartLayout.default().rot_joints[part]


def reconstruction_loss(g: torch.Tensor, g_hat: torch.Tensor, rot_joints: int) -> torch.Tensor:
    nr = 6 * rot_joints
    loss = g.new_zeros(())
    if nr:
        shp = g.shape[:-1] + (rot_joints, 6)
        loss = loss + geodesic_loss(g_hat[..., :nr].reshape(shp), g[..., :nr].reshape(shp))
    if g.shape[-1] > nr:
        loss = loss + F.mse_loss(g_hat[..., nr:], g[..., nr:])
    return loss


def vqvae_loss(g, g_hat, F_levels, Fq_levels, part: Optional[str] = None,
               rot_joints: Optional[int] = None) -> Dict[str, torch.Tensor]:
    """Composite loss on (..., T, d_part) tensors; returns the total and every term."""
    if g.shape != g_hat.shape:
        raise ShapeMismatch(f"{tuple(g.shape)} vs {tuple(g_hat.shape)}")
    nj = _rot_joints_for(part, rot_joints)
    rec = reconstruction_loss(g, g_hat, nj)
    dg, dh = torch.diff(g, dim=-2), torch.diff(g_hat, dim=-2)
    vel = F.l1_loss(dh, dg) if dg.shape[-2] else g.new_zeros(())
    ddg, ddh = torch.diff(dg, dim=-2), torch.diff(dh, dim=-2)
    acc = F.l1_loss(ddh, ddg) if ddg.shape[-2] else g.new_zeros(())
    f = torch.cat([x.reshape(-1) for x in F_levels])
    fq = torch.cat([x.reshape(-1) for x in Fq_levels])
    codebook = F.mse_loss(fq, f.detach())
    commit = F.mse_loss(f, fq.detach())
    total = rec + vel + acc + codebook + commit
    return {"total": total, "rec": rec, "vel": vel, "acc": acc, "codebook": codebook, "commit": commit}


# ---------------------------------------------------------------------------
# training


@dataclass
class VQConfig:
    codebook_size: int = 256
    dim: int = 128
    width: int = 128
    window: int = 64
    lr: float = 2e-4
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    scaled: bool = True
    reseed_dead_codes: bool = True

    def validate(self, spec: GranularitySpec) -> None:
        for k in ("codebook_size", "dim", "width", "window", "batch_size", "steps"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive")
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.window % spec.factors[-1]:
            raise ConfigError(f"window {self.window} not divisible by {spec.factors[-1]}")


@dataclass
class TrainResult:
    model: MgvqvaeModel
    history: List[Dict[str, float]] = field(default_factory=list)
    usage: List[List[int]] = field(default_factory=list)
    config: Optional[VQConfig] = None
    part: str = ""


def part_windows(corpus: Sequence[Clip], part: str, T: int, layout: Optional[PartLayout] = None) -> np.ndarray:
    layout = layout or PartLayout.default()
    w = windows(corpus, T)
    return w[..., layout.indices[part]]


def train_vqvae(corpus: Sequence[Clip], part: str, spec: GranularitySpec, hyper: VQConfig,
                layout: Optional[PartLayout] = None, data: Optional[np.ndarray] = None) -> TrainResult:
    """Fit one part model with Adam; codebook entries unused for an epoch are reseeded."""
    if part not in PART_NAMES:
        raise ConfigError(f"unknown part {part!r}")
    hyper.validate(spec)
    layout = layout or PartLayout.default()
    if data is None:
        if not corpus:
            raise ConfigError("empty corpus")
        data = part_windows(corpus, part, hyper.window, layout)
    if len(data) == 0:
        raise ConfigError("corpus yields no training windows")

    torch.manual_seed(hyper.seed)
    rng = np.random.default_rng(hyper.seed)
    model = MgvqvaeModel(data.shape[-1], spec, hyper.codebook_size, hyper.dim, hyper.width,
                         layout.rot_joints[part], hyper.scaled)
    x_all = torch.from_numpy(np.ascontiguousarray(data))
    opt = torch.optim.Adam(model.parameters(), lr=hyper.lr)
    steps_per_epoch = max(1, math.ceil(len(x_all) / hyper.batch_size))

    with torch.no_grad():
        _init_codebook(model, x_all[rng.permutation(len(x_all))[:hyper.batch_size]], rng)

    result = TrainResult(model=model, config=hyper, part=part)
    usage = torch.zeros(hyper.codebook_size, dtype=torch.long)
    for step in range(hyper.steps):
        idx = rng.integers(0, len(x_all), size=min(hyper.batch_size, len(x_all)))
        x = x_all[idx]
        out = model(x)
        losses = vqvae_loss(x, out["x_hat"], out["F"], out["F_hat"], rot_joints=model.rot_joints)
        opt.zero_grad()
        losses["total"].backward()
        opt.step()
        result.history.append({k: float(v.detach()) for k, v in losses.items()})
        for q in out["tokens"]:
            usage += torch.bincount(q.reshape(-1), minlength=hyper.codebook_size)
        if (step + 1) % steps_per_epoch == 0:
            result.usage.append(usage.tolist())
            if hyper.reseed_dead_codes:
                with torch.no_grad():
                    _reseed_dead(model, usage, torch.cat([f.reshape(-1, model.dim) for f in out["F"]]), rng)
            usage.zero_()
    model.eval()
    return result


def _init_codebook(model: MgvqvaeModel, x: torch.Tensor, rng: np.random.Generator) -> None:
    flat = torch.cat([f.reshape(-1, model.dim) for f in model.encode(x)])
    pick = rng.choice(len(flat), size=model.codebook_size, replace=len(flat) < model.codebook_size)
    model.codebook.copy_(flat[torch.from_numpy(pick)] + 1e-3 * torch.randn(model.codebook_size, model.dim))


def _reseed_dead(model: MgvqvaeModel, usage: torch.Tensor, pool: torch.Tensor, rng) -> int:
    dead = torch.nonzero(usage == 0).reshape(-1)
    if len(dead) == 0:
        return 0
    pick = torch.from_numpy(rng.integers(0, len(pool), size=len(dead)))
    model.codebook[dead] = pool[pick].detach() + 1e-3 * torch.randn(len(dead), model.dim)
    return len(dead)


def canonicalize_rot6d(x: torch.Tensor, rot_joints: int) -> torch.Tensor:
    """Replace every leading Rot6D block by its Gram-Schmidt projection."""
    if not rot_joints:
        return x
    nr = 6 * rot_joints
    r6 = x[..., :nr].reshape(x.shape[:-1] + (rot_joints, 6))
    m = rot6d_to_matrix_torch(r6)
    canon = torch.cat([m[..., :, 0], m[..., :, 1]], dim=-1).reshape(x.shape[:-1] + (nr,))
    return torch.cat([canon, x[..., nr:]], dim=-1)


def decode_tokens(model: MgvqvaeModel, tokens: Sequence[torch.Tensor]) -> torch.Tensor:
    """Codebook lookup, decode, and Rot6D canonicalization."""
    return canonicalize_rot6d(model.decode(model.lookup(tokens)), model.rot_joints)


@torch.no_grad()
def reconstruct(model: MgvqvaeModel, x: torch.Tensor, batch: int = 256) -> torch.Tensor:
    """Encode, quantize and decode a (B, T, d_part) batch."""
    outs = []
    for s in range(0, len(x), batch):
        outs.append(decode_tokens(model, model.tokenize(x[s:s + batch])))
    return torch.cat(outs)


@torch.no_grad()
def reconstruction_mse(model: MgvqvaeModel, data: np.ndarray) -> float:
    x = torch.from_numpy(np.ascontiguousarray(data))
    return float(F.mse_loss(reconstruct(model, x), x))


# ---------------------------------------------------------------------------
# persistence


def save_checkpoint(result_or_model, path, part: str = "", config: Optional[VQConfig] = None) -> Path:
    model = getattr(result_or_model, "model", result_or_model)
    part = part or getattr(result_or_model, "part", "")
    config = config or getattr(result_or_model, "config", None)
    payload = {
        "format": "m3g-mgvqvae",
        "version": CHECKPOINT_VERSION,
        "part": part,
        "granularity": {"n": model.spec.n, "factors": model.spec.factors},
        "arch": model.arch(),
        "state_dict": model.state_dict(),
        "config": asdict(config) if config is not None else None,
        "rng_state": torch.get_rng_state(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple:
    """Returns ``(model, part, config_dict)``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "m3g-mgvqvae":
        raise ModelMismatch(f"{path} is not an MGVQ-VAE checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ModelMismatch(f"unsupported checkpoint version {payload.get('version')}")
    a = dict(payload["arch"])
    spec = GranularitySpec(a.pop("n"))
    model = MgvqvaeModel(a["d_part"], spec, a["codebook_size"], a["dim"], a["width"], a["rot_joints"], a["scaled"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["part"], payload["config"]


def save_token_stream(path, tokens: Sequence, part: str, T: int, codebook_size: int, fps: float) -> Path:
    levels = [np.asarray(q.detach().cpu() if torch.is_tensor(q) else q, dtype=np.int64) for q in tokens]
    header = {"version": TOKEN_STREAM_VERSION, "part": part, "n": len(levels), "T": int(T),
              "C": int(codebook_size), "fps": float(fps)}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **{f"level_{i}": q for i, q in enumerate(levels)})
    return path


def load_token_stream(path) -> tuple:
    """Returns ``(header, levels)``."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        levels = [z[f"level_{i}"] for i in range(header["n"])]
    for i, q in enumerate(levels):
        if q.shape[-1] * 2 ** i != header["T"]:
            raise ShapeMismatch(f"level {i} length {q.shape[-1]} inconsistent with T={header['T']}")
        if q.size and (q.min() < 0 or q.max() >= header["C"]):
            raise ShapeMismatch(f"level {i} holds tokens outside [0, {header['C']})")
    return header, levels
