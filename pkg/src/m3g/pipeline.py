"""Experiment configuration, orchestration, persistence and the command line."""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import yaml

from .audio_features import default_provider
from .errors import ConfigError, LengthNotDivisible, M3GError, ModelMismatch, TooFewSamples
from .metrics import MetricsReport, evaluate, load_extractor, save_extractor, train_feature_extractor
from .mgvqvae import (GranularitySpec, MgvqvaeModel, VQConfig, decode_tokens, load_checkpoint,
                      load_token_stream, param_count, part_windows, reconstruct, save_checkpoint,
                      save_token_stream, train_vqvae, width_for_budget)
from .motion_data import (PART_NAMES, Clip, GestureSequence, PartLayout, load_clip, merge_parts,
                          save_clip, split_parts, synth_corpus, windows)
from .token_predictor import (M3GSystem, PredictorConfig, check_compatible, evaluate_predictor, generate,
                              load_predictor, prepare_windows, save_predictor, train_predictor)

log = logging.getLogger("m3g")

# ---------------------------------------------------------------------------
# configuration

DEFAULTS: Dict[str, dict] = {
    "corpus": {
        "source": "synthetic",  # or a directory of clip folders
        "seed": 0,
        "n_clips": 240,
        "n_heldout": 40,
        "length": 64,
        "granule_menu": [1, 2, 4, 8, 16],
        "n_speakers": 4,
        "fps": 30.0,
        "sample_rate": 16000,
    },
    "granularity": {"n": 4},
    "vqvae": {
        "codebook_size": 64,
        "dim": 32,
        "width": 32,
        "window": 64,
        "lr": 5e-3,
        "batch_size": 16,
        "steps": 600,
        "scaled": True,
        "reseed_dead_codes": True,
    },
    "predictor": {
        "hidden": 64,
        "feat_dim": 64,
        "text_width": 64,
        "heads": 4,
        "san_layers": 1,
        "window": 64,
        "seed_frames": 8,
        "lr": 1e-3,
        "batch_size": 16,
        "steps": 500,
        "temperature": 0.0,
    },
    "metrics": {"sigma": 0.1, "fx_steps": 400, "fx_width": 128, "fx_lr": 1e-3},
    "ablation": {"n_list": [1, 2, 3, 4, 5], "seeds": [0, 1, 2], "budget_n": 4},
    "seed": 0,
    "out_dir": "runs/default",
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{path + k!r} must be a section")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    """Fully resolved experiment settings; every value is written to the manifest."""

    corpus: dict
    granularity: dict
    vqvae: dict
    predictor: dict
    metrics: dict
    ablation: dict
    seed: int
    out_dir: str

    @classmethod
    def from_dict(cls, d: Optional[dict] = None) -> "ExperimentConfig":
        cfg = cls(**_merge(DEFAULTS, d or {}))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def spec(self) -> GranularitySpec:
        return GranularitySpec(self.granularity["n"])

    def vq_config(self, seed: Optional[int] = None, **over) -> VQConfig:
        kw = dict(self.vqvae, seed=self.seed if seed is None else seed)
        kw.update(over)
        return VQConfig(**kw)

    def predictor_config(self) -> PredictorConfig:
        return PredictorConfig(**self.predictor, n_speakers=self.corpus["n_speakers"], seed=self.seed)

    def validate(self) -> None:
        def need_int(name, v, lo=0):
            if isinstance(v, bool) or not isinstance(v, int) or v < lo:
                raise ConfigError(f"{name} must be an integer >= {lo}, got {v!r}")

        need_int("seed", self.seed)
        need_int("granularity.n", self.granularity["n"], 1)
        try:
            spec = self.spec
        except ValueError as e:
            raise ConfigError(str(e)) from e
        top = spec.factors[-1]
        for sec in ("vqvae", "predictor"):
            need_int(f"{sec}.window", self[sec]["window"], 1)
            if self[sec]["window"] % top:
                raise ConfigError(f"{sec}.window={self[sec]['window']} not divisible by {top}")
        c = self.corpus
        need_int("corpus.seed", c["seed"])
        need_int("corpus.n_clips", c["n_clips"], 1)
        need_int("corpus.n_heldout", c["n_heldout"])
        need_int("corpus.length", c["length"], 1)
        if c["n_heldout"] >= c["n_clips"]:
            raise ConfigError("corpus.n_heldout must be smaller than corpus.n_clips")
        for s in self.ablation["seeds"]:
            need_int("ablation.seeds[]", s)
        for n in self.ablation["n_list"]:
            need_int("ablation.n_list[]", n, 1)
        if self.predictor["seed_frames"] >= self.predictor["window"]:
            raise ConfigError("predictor.seed_frames must be smaller than predictor.window")
        try:
            self.vq_config().validate(spec)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def __getitem__(self, k):
        return getattr(self, k)


# ---------------------------------------------------------------------------
# manifest


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    config: dict
    files: Dict[str, str] = field(default_factory=dict)  # relative path -> sha256
    inputs: Dict[str, str] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def add(self, root: Path, path: Path) -> None:
        self.files[str(Path(path).relative_to(root))] = file_digest(path)

    def save(self, root) -> Path:
        p = Path(root) / f"manifest_{self.command}.json"
        p.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=float))
        return p

    @classmethod
    def load(cls, path, verify: bool = True) -> "RunManifest":
        path = Path(path)
        m = cls(**json.loads(path.read_text()))
        if verify:
            m.verify(path.parent)
        return m

    def verify(self, root) -> None:
        for rel, digest in self.files.items():
            p = Path(root) / rel
            if not p.exists():
                raise ModelMismatch(f"manifest entry {rel} is missing")
            if file_digest(p) != digest:
                raise ModelMismatch(f"manifest entry {rel} does not match its digest")


# ---------------------------------------------------------------------------
# corpus, outputs


def load_corpus(cfg: ExperimentConfig):
    """Returns ``(train, heldout)`` clip lists."""
    c = cfg.corpus
    if c["source"] == "synthetic":
        clips = synth_corpus(c["seed"], c["n_clips"], c["length"], c["granule_menu"], fps=c["fps"],
                             sample_rate=c["sample_rate"], n_speakers=c["n_speakers"])
    else:
        root = Path(c["source"])
        dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
        if not dirs:
            raise ConfigError(f"no clip folders under {root}")
        clips = [load_clip(d, fps=c["fps"]) for d in dirs]
    k = c["n_heldout"]
    if k >= len(clips):
        raise ConfigError(f"corpus has {len(clips)} clips, cannot hold out {k}")
    return clips[:len(clips) - k], clips[len(clips) - k:]


def write_curve(history: Sequence[dict], csv_path: Path, png_path: Optional[Path], title: str) -> None:
    keys = list(history[0]) if history else []
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + keys)
        for i, h in enumerate(history):
            w.writerow([i] + [f"{h[k]:.8g}" for k in keys])
    if png_path is None or not history:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for k in keys:
        y = np.array([h[k] for h in history])
        ax.plot(smooth(y), label=k, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_title(title)
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)


def smooth(y: np.ndarray, window: int = 25) -> np.ndarray:
    if len(y) < window:
        return y
    k = np.ones(window) / window
    return np.convolve(y, k, mode="valid")


def _vq_paths(root: Path) -> Dict[str, Path]:
    return {p: root / f"{p}.pt" for p in PART_NAMES}


def load_vq_models(root, spec: Optional[GranularitySpec] = None) -> Dict[str, MgvqvaeModel]:
    models = {}
    for p, path in _vq_paths(Path(root)).items():
        if not path.exists():
            raise ModelMismatch(f"missing tokenizer checkpoint {path}")
        m, part, _ = load_checkpoint(path)
        if part != p:
            raise ModelMismatch(f"{path} holds the {part!r} tokenizer")
        models[p] = m
    check_compatible(models, spec)
    return models


def _save_motion(g: GestureSequence, path: Path) -> Path:
    np.savez(path, motion=g.data.astype(np.float32), fps=np.float64(g.fps))
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train_vqvae(cfg: ExperimentConfig, out: Path) -> RunManifest:
    t0 = time.time()
    train, held = load_corpus(cfg)
    layout = PartLayout.default()
    root = out / "vqvae"
    root.mkdir(parents=True, exist_ok=True)
    man = RunManifest("train-vqvae", cfg.digest(), cfg.to_dict())
    for part in PART_NAMES:
        res = train_vqvae(train, part, cfg.spec, cfg.vq_config(), layout)
        ck = save_checkpoint(res, root / f"{part}.pt")
        write_curve(res.history, root / f"{part}_loss.csv", root / f"{part}_loss.png", f"{part} MGVQ-VAE")
        test = part_windows(held, part, cfg.vqvae["window"], layout)
        x = torch.from_numpy(test)
        with torch.no_grad():
            err = float(((reconstruct(res.model, x) - x) ** 2).mean())
            toks = res.model.tokenize(x)
        stats = {
            "levels": cfg.spec.n,
            "factors": cfg.spec.factors,
            "tokens_per_level": [int(q.numel()) for q in toks],
            "codes_used_per_level": [int(q.unique().numel()) for q in toks],
        }
        man.metrics[part] = {"final_loss": res.history[-1]["total"], "heldout_mse": err, "token_stats": stats}
        for f in (ck, root / f"{part}_loss.csv", root / f"{part}_loss.png"):
            man.add(out, f)
        log.info("%s: final loss %.4f, held-out mse %.5f", part, res.history[-1]["total"], err)
    man.wall_clock = time.time() - t0
    return man


def cmd_train_predictor(cfg: ExperimentConfig, out: Path, vq_dir: Optional[Path] = None) -> RunManifest:
    t0 = time.time()
    vq_dir = vq_dir or out / "vqvae"
    vq = load_vq_models(vq_dir, cfg.spec)
    train, held = load_corpus(cfg)
    layout = PartLayout.default()
    pc = cfg.predictor_config()
    provider = default_provider(pc.text_width)
    data = prepare_windows(train, vq, layout, pc.window, provider)
    model, history = train_predictor(data, vq, pc)
    root = out / "predictor"
    root.mkdir(parents=True, exist_ok=True)
    ck = save_predictor(model, root / "predictor.pt", layout)
    write_curve(history, root / "loss.csv", root / "loss.png", "token predictor")
    man = RunManifest("train-predictor", cfg.digest(), cfg.to_dict())
    man.inputs = {str(p): file_digest(p) for p in _vq_paths(vq_dir).values()}
    ev = evaluate_predictor(model, prepare_windows(held, vq, layout, pc.window, provider))
    man.metrics = {"initial_loss": history[0], "final_loss": history[-1], "heldout": ev}
    for f in (ck, root / "loss.csv", root / "loss.png"):
        man.add(out, f)
    man.wall_clock = time.time() - t0
    return man


def _resolve_clips(cfg: ExperimentConfig, clip: Optional[str]) -> Dict[str, Clip]:
    if clip:
        p = Path(clip)
        return {p.name: load_clip(p, fps=cfg.corpus["fps"])}
    _, held = load_corpus(cfg)
    return {f"clip_{i:04d}": c for i, c in enumerate(held)}


def cmd_tokenize(cfg: ExperimentConfig, out: Path, vq_dir: Optional[Path] = None,
                 clip: Optional[str] = None) -> RunManifest:
    vq = load_vq_models(vq_dir or out / "vqvae", cfg.spec)
    layout = PartLayout.default()
    top = cfg.spec.factors[-1]
    man = RunManifest("tokenize", cfg.digest(), cfg.to_dict())
    for name, c in _resolve_clips(cfg, clip).items():
        L = c.frames - c.frames % top
        if L == 0:
            raise LengthNotDivisible(f"{name}: {c.frames} frames is shorter than one coarsest token")
        parts = split_parts(c.gesture.data[:L], layout)
        for p, m in vq.items():
            with torch.no_grad():
                toks = m.tokenize(torch.from_numpy(parts[p][None]))
            f = save_token_stream(out / "tokens" / name / f"{p}.npz", [q[0] for q in toks], p, L,
                                  m.codebook_size, c.gesture.fps)
            man.add(out, f)
        man.metrics[name] = {"frames": L, "dropped_frames": c.frames - L}
    return man


def cmd_reconstruct(cfg: ExperimentConfig, out: Path, vq_dir: Optional[Path] = None,
                    tokens_dir: Optional[Path] = None, clip: Optional[str] = None) -> RunManifest:
    vq = load_vq_models(vq_dir or out / "vqvae", cfg.spec)
    layout = PartLayout.default()
    tokens_dir = tokens_dir or out / "tokens"
    originals = _resolve_clips(cfg, clip)
    man = RunManifest("reconstruct", cfg.digest(), cfg.to_dict())
    names = sorted(d.name for d in tokens_dir.iterdir() if d.is_dir()) if tokens_dir.is_dir() else []
    if not names:
        raise ModelMismatch(f"no token streams under {tokens_dir}")
    for name in names:
        parts, fps = {}, cfg.corpus["fps"]
        for p, m in vq.items():
            header, levels = load_token_stream(tokens_dir / name / f"{p}.npz")
            if header["n"] != m.spec.n or header["C"] != m.codebook_size:
                raise ModelMismatch(f"{name}/{p}: token stream does not match the tokenizer")
            fps = header["fps"]
            with torch.no_grad():
                parts[p] = decode_tokens(m, [torch.from_numpy(q)[None] for q in levels])[0].numpy()
        g = GestureSequence(merge_parts(parts, layout), fps)
        (out / "reconstructions").mkdir(parents=True, exist_ok=True)
        f = _save_motion(g, out / "reconstructions" / f"{name}.npz")
        man.add(out, f)
        if name in originals:
            ref = split_parts(originals[name].gesture.data[:g.frames], layout)
            man.metrics[name] = {p: float(((parts[p] - ref[p]) ** 2).mean()) for p in PART_NAMES}
    return man


def cmd_generate(cfg: ExperimentConfig, out: Path, vq_dir: Optional[Path] = None,
                 predictor_path: Optional[Path] = None, clip: Optional[str] = None) -> RunManifest:
    layout = PartLayout.default()
    vq = load_vq_models(vq_dir or out / "vqvae", cfg.spec)
    model = load_predictor(predictor_path or out / "predictor" / "predictor.pt", layout)
    system = M3GSystem(vq, model, layout)
    k = model.cfg.seed_frames
    man = RunManifest("generate", cfg.digest(), cfg.to_dict())
    for name, c in _resolve_clips(cfg, clip).items():
        g = generate(c.audio, c.transcript, c.speaker_id, c.gesture.data[:k], system, seed=cfg.seed)
        d = save_clip(Clip(g, c.audio, c.transcript, c.speaker_id), out / "generated" / name)
        if not clip:
            save_clip(c, out / "real" / name)
        for f in sorted(d.iterdir()):
            man.add(out, f)
    return man


def _clip_dirs(root: Path) -> Dict[str, Path]:
    if not root.is_dir():
        raise TooFewSamples(f"{root} is not a directory")
    return {d.name: d for d in sorted(root.iterdir()) if d.is_dir()}


def cmd_evaluate(cfg: ExperimentConfig, out: Path, gen_dir: Path, real_dir: Path,
                 extractor: Optional[Path] = None) -> MetricsReport:
    gen, real = _clip_dirs(gen_dir), _clip_dirs(real_dir)
    names = sorted(set(gen) & set(real))
    if len(names) < 2:
        raise TooFewSamples(f"only {len(names)} matched clips between {gen_dir} and {real_dir}")
    fps = cfg.corpus["fps"]
    real_clips = [load_clip(real[n], fps=fps) for n in names]
    gen_clips = [load_clip(gen[n], fps=fps) for n in names]
    L = min(c.frames for c in real_clips + gen_clips)
    L -= L % 16
    if L == 0:
        raise TooFewSamples("clips are shorter than 16 frames")
    R = np.stack([c.gesture.data[:L] for c in real_clips])
    G = np.stack([c.gesture.data[:L] for c in gen_clips])
    m = cfg.metrics
    if extractor is not None:
        fx = load_extractor(extractor)
    else:
        fx = train_feature_extractor(R, steps=m["fx_steps"], lr=m["fx_lr"], seed=cfg.seed, width=m["fx_width"])
        save_extractor(fx, out / "fgd_extractor.pt")
    report = evaluate(R, G, [c.audio.slice_frames(0, L) for c in gen_clips], fx, sigma=m["sigma"])
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "metrics.csv")
    report.to_text(cfg.digest(), out / "metrics.txt")
    return report


def ablation_run(cfg: ExperimentConfig, train, held, n: int, seed: int, budget: Dict[str, int],
                 layout: PartLayout, scaled: Optional[bool] = None) -> dict:
    """Train all five part tokenizers for one (n, seed) and score held-out reconstructions.

    The row also carries the merged reconstructions under ``recon`` and the trained
    models under ``models``; callers drop both before writing tables.
    """
    spec = GranularitySpec(n)
    T = cfg.vqvae["window"]
    row: dict = {"n": n, "seed": seed}
    recon, models = {}, {}
    for part in PART_NAMES:
        tr = part_windows(train, part, T, layout)
        te = part_windows(held, part, T, layout)
        width = width_for_budget(tr.shape[-1], spec, cfg.vqvae["codebook_size"], cfg.vqvae["dim"], budget[part])
        over = {"width": width} if scaled is None else {"width": width, "scaled": scaled}
        res = train_vqvae(None, part, spec, cfg.vq_config(seed=seed, **over), layout, data=tr)
        models[part] = res.model
        x = torch.from_numpy(te)
        with torch.no_grad():
            recon[part] = reconstruct(res.model, x).numpy()
        var = float(((te - te.mean((0, 1))) ** 2).mean())
        row[f"mse_{part}"] = float(((recon[part] - te) ** 2).mean())
        row[f"nmse_{part}"] = row[f"mse_{part}"] / var
        row[f"width_{part}"] = width
        row[f"params_{part}"] = param_count(res.model)
    row["nmse_mean"] = float(np.mean([row[f"nmse_{p}"] for p in PART_NAMES]))
    row["recon"] = merge_parts(recon, layout)
    row["models"] = models
    return row


def part_budgets(cfg: ExperimentConfig, layout: PartLayout, n_ref: int) -> Dict[str, int]:
    v = cfg.vqvae
    return {p: param_count(MgvqvaeModel(layout.width(p), GranularitySpec(n_ref), v["codebook_size"], v["dim"],
                                        v["width"], layout.rot_joints[p], v["scaled"])) for p in PART_NAMES}


def cmd_ablate_granularity(cfg: ExperimentConfig, out: Path, n_list: Optional[Sequence[int]] = None) -> RunManifest:
    t0 = time.time()
    n_list = list(n_list or cfg.ablation["n_list"])
    seeds = cfg.ablation["seeds"]
    if len(seeds) < 1 or not n_list:
        raise ConfigError("ablation needs at least one seed and one granularity count")
    top = 2 ** (max(n_list) - 1)
    if cfg.vqvae["window"] % top:
        raise ConfigError(f"vqvae.window={cfg.vqvae['window']} not divisible by {top}")
    train, held = load_corpus(cfg)
    layout = PartLayout.default()
    budget = part_budgets(cfg, layout, cfg.ablation["budget_n"])
    T = cfg.vqvae["window"]
    gt = windows(held, T)
    fx = train_feature_extractor(gt, steps=cfg.metrics["fx_steps"], lr=cfg.metrics["fx_lr"], seed=cfg.seed,
                                 width=cfg.metrics["fx_width"])
    audios = [c.audio.slice_frames(s, T) for c in held for s in range(0, c.frames - T + 1, T)]
    rows = []
    for n in n_list:
        for seed in seeds:
            row = ablation_run(cfg, train, held, n, seed, budget, layout)
            row.pop("models")
            rep = evaluate(gt, row.pop("recon"), audios, fx, cfg.metrics["sigma"])
            row.update({"fgd": rep.fgd, "beat_align": rep.beat_align, "diversity": rep.diversity,
                        "face_mse": rep.face_mse, "face_lvd": rep.face_lvd})
            rows.append(row)
            log.info("n=%d seed=%d nmse_mean=%.4f fgd=%.4f", n, seed, row["nmse_mean"], row["fgd"])
    root = out / "ablation"
    root.mkdir(parents=True, exist_ok=True)
    runs_csv = root / "granularity_runs.csv"
    with open(runs_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    summary = summarize(rows, n_list)
    sum_csv = root / "granularity_summary.csv"
    with open(sum_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]))
        w.writeheader()
        w.writerows(summary)
    png = plot_ablation(summary, root / "granularity.png")
    man = RunManifest("ablate-granularity", cfg.digest(), cfg.to_dict())
    man.metrics = {"summary": summary}
    for f in (runs_csv, sum_csv, png):
        man.add(out, f)
    man.wall_clock = time.time() - t0
    return man


def cmd_ablate_scaling(cfg: ExperimentConfig, out: Path) -> RunManifest:
    """Normalized against unnormalized convolutions at ``granularity.n`` and a matched budget."""
    t0 = time.time()
    seeds = cfg.ablation["seeds"]
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    train, held = load_corpus(cfg)
    layout = PartLayout.default()
    budget = part_budgets(cfg, layout, cfg.granularity["n"])
    rows = []
    for scaled in (True, False):
        for seed in seeds:
            row = ablation_run(cfg, train, held, cfg.granularity["n"], seed, budget, layout, scaled=scaled)
            row.pop("recon")
            row.pop("models")
            rows.append({"scaled": scaled, **row})
    wins = {}
    for p in PART_NAMES:
        m = {s: np.mean([r[f"mse_{p}"] for r in rows if r["scaled"] is s]) for s in (True, False)}
        wins[p] = {"scaled_mse": float(m[True]), "unscaled_mse": float(m[False]), "scaled_le": bool(m[True] <= m[False])}
    root = out / "ablation"
    root.mkdir(parents=True, exist_ok=True)
    runs_csv = root / "scaling_runs.csv"
    with open(runs_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    man = RunManifest("ablate-scaling", cfg.digest(), cfg.to_dict())
    man.metrics = {"parts": wins, "scaled_wins": sum(v["scaled_le"] for v in wins.values())}
    man.add(out, runs_csv)
    man.wall_clock = time.time() - t0
    return man


def summarize(rows: List[dict], n_list: Sequence[int]) -> List[dict]:
    keys = [k for k in rows[0] if k not in ("n", "seed") and not k.startswith(("width_", "params_"))]
    out = []
    for n in n_list:
        sel = [r for r in rows if r["n"] == n]
        d = {"n": n, "seeds": len(sel)}
        for k in keys:
            v = np.array([r[k] for r in sel], dtype=np.float64)
            d[f"{k}_mean"] = float(v.mean())
            d[f"{k}_std"] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        out.append(d)
    return out


def plot_ablation(summary: List[dict], path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ns = [s["n"] for s in summary]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for p in PART_NAMES:
        axes[0].errorbar(ns, [s[f"nmse_{p}_mean"] for s in summary], [s[f"nmse_{p}_std"] for s in summary],
                         label=p, capsize=3, marker="o", ms=3)
    axes[0].set_xlabel("granularity levels n")
    axes[0].set_ylabel("held-out MSE / variance")
    axes[0].legend(fontsize=7)
    axes[1].errorbar(ns, [s["fgd_mean"] for s in summary], [s["fgd_std"] for s in summary], capsize=3, marker="o")
    axes[1].set_xlabel("granularity levels n")
    axes[1].set_ylabel("reconstruction FGD")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# command line


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="m3g", description="Multi-granular gesture tokenizer and predictor.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    add("train-vqvae", "train the five part tokenizers")
    p = add("train-predictor", "train the token predictor on frozen tokenizers")
    p.add_argument("--vqvae", type=Path, help="tokenizer checkpoint directory")
    p = add("tokenize", "write token streams for clips")
    p.add_argument("--vqvae", type=Path)
    p.add_argument("--clip", help="clip folder (default: held-out corpus)")
    p = add("reconstruct", "decode token streams back to motion")
    p.add_argument("--vqvae", type=Path)
    p.add_argument("--tokens", type=Path)
    p.add_argument("--clip", help="original clip folder for error reporting")
    p = add("generate", "generate gestures from audio and transcripts")
    p.add_argument("--vqvae", type=Path)
    p.add_argument("--predictor", type=Path)
    p.add_argument("--clip", help="clip folder providing audio, words and seed motion")
    p = add("evaluate", "score generated clips against real clips")
    p.add_argument("--gen", type=Path, help="generated clip folders (default: OUT/generated)")
    p.add_argument("--real", type=Path, help="real clip folders (default: OUT/real)")
    p.add_argument("--extractor", type=Path, help="frozen FGD extractor checkpoint")
    p = add("ablate-granularity", "reconstruction ablation over granularity counts")
    p.add_argument("--n-list", type=lambda s: [int(x) for x in s.split(",")], help="e.g. 1,2,3,4,5")
    add("ablate-scaling", "normalized vs unnormalized convolutions at a matched budget")
    add("write-config", "write the fully resolved config to OUT/config.yaml")
    return ap


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig.from_dict()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out_dir"] = str(args.out)
    return ExperimentConfig.from_dict({**cfg.to_dict(), **over}) if over else cfg


def run(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    c = args.command
    if c == "write-config":
        print(cfg.dump(out / "config.yaml"))
        return 0
    if c == "train-vqvae":
        man = cmd_train_vqvae(cfg, out)
    elif c == "train-predictor":
        man = cmd_train_predictor(cfg, out, args.vqvae)
    elif c == "tokenize":
        man = cmd_tokenize(cfg, out, args.vqvae, args.clip)
    elif c == "reconstruct":
        man = cmd_reconstruct(cfg, out, args.vqvae, args.tokens, args.clip)
    elif c == "generate":
        man = cmd_generate(cfg, out, args.vqvae, args.predictor, args.clip)
    elif c == "evaluate":
        rep = cmd_evaluate(cfg, out, args.gen or out / "generated", args.real or out / "real", args.extractor)
        print(rep.to_text(cfg.digest()), end="")
        return 0
    elif c == "ablate-granularity":
        man = cmd_ablate_granularity(cfg, out, args.n_list)
    elif c == "ablate-scaling":
        man = cmd_ablate_scaling(cfg, out)
    else:  # pragma: no cover - argparse rejects unknown commands
        raise ConfigError(f"unknown command {c}")
    cfg.dump(out / "config.yaml")
    print(man.save(out))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return run(args)
    except M3GError as e:
        print(f"{e.name}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
