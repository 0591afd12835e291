"""Training loop, evaluation, checkpoints, embedding export and ablation grids."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig, from_dict, save_config
from .data import CorpusManifest, SplitData, build_manifest, load_split, mixed_batch_sampler
from .freq import ChannelStats, ChannelStatsAccumulator
from .losses import CenterLoss, SingleCenterLoss, TripletLoss
from .metrics import MetricsReport, ScoredFrame, report
from .model import Detector, weight_parameters

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Corpus:
    splits: dict[str, SplitData]

    def __getitem__(self, split: str) -> SplitData:
        if split not in self.splits:
            raise KeyError(f"corpus has no {split!r} split (have {sorted(self.splits)})")
        return self.splits[split]


def load_corpus(cfg: TrainConfig, splits: tuple[str, ...] | None = None) -> Corpus:
    """Load splits named in the run config from ``data.root``.

    Uses ``root/manifest.jsonl`` when present (synthetic corpora), otherwise
    samples frames from ``root/<split>/{real,fake}`` with the configured
    per-class frame counts.
    """
    root = Path(cfg.data.root)
    splits = splits or tuple(dict.fromkeys(["train", cfg.run.eval_split, cfg.run.test_split]))
    manifest_path = root / "manifest.jsonl"
    out = {}
    for split in splits:
        if manifest_path.exists():
            man = CorpusManifest.load(manifest_path).select(split)
            if not len(man):
                continue
        else:
            if not (root / split).is_dir():
                continue
            man = build_manifest(root / split, cfg.data.frames_real, cfg.data.frames_fake, split)
        out[split] = load_split(man)
    if "train" not in out:
        raise FileNotFoundError(f"no train split under {root}")
    return Corpus(out)


def compute_stats(split: SplitData) -> ChannelStats:
    acc = ChannelStatsAccumulator()
    for f in split.freq:
        acc.update(f.transpose(1, 2, 0))
    return acc.finalize()


# -- tensors ------------------------------------------------------------------


def _dtype(cfg: TrainConfig) -> torch.dtype:
    return torch.float64 if cfg.run.float64 else torch.float32


@dataclass
class _Tensors:
    images: torch.Tensor
    freq: torch.Tensor
    labels: torch.Tensor


def _prepare(split: SplitData, stats: ChannelStats, dtype: torch.dtype) -> _Tensors:
    img = torch.from_numpy(split.images).permute(0, 3, 1, 2).to(dtype) / 127.5 - 1.0
    mean = torch.from_numpy(stats.mean).to(dtype)[None, :, None, None]
    std = torch.from_numpy(stats.std).to(dtype)[None, :, None, None]
    freq = (torch.from_numpy(split.freq).to(dtype) - mean) / std
    return _Tensors(img.contiguous(), freq.contiguous(), torch.from_numpy(split.labels))


# -- model / loss assembly ----------------------------------------------------


def build_model(cfg: TrainConfig) -> Detector:
    torch.manual_seed(cfg.run.seed)
    return Detector(cfg.model).to(_dtype(cfg))


def build_aux_loss(cfg: TrainConfig) -> nn.Module | None:
    # separate generator so the aux-loss init never shifts the model's RNG stream
    gen = torch.Generator().manual_seed(cfg.run.seed + 7919)
    dim = cfg.model.embedding_dim
    v = cfg.loss.variant
    if v == "softmax+scl":
        mod = SingleCenterLoss(dim, cfg.loss.scl, generator=gen)
    elif v == "softmax+center":
        mod = CenterLoss(dim, weight=cfg.loss.center_weight, generator=gen)
    elif v == "softmax+triplet":
        mod = TripletLoss(cfg.loss.triplet_margin, cfg.loss.triplet_weight)
    else:
        return None
    return mod.to(_dtype(cfg))


def aux_weight(cfg: TrainConfig) -> float:
    return {
        "softmax+scl": cfg.loss.scl.lam,
        "softmax+center": cfg.loss.center_weight,
        "softmax+triplet": cfg.loss.triplet_weight,
    }.get(cfg.loss.variant, 0.0)


def build_optimizer(cfg: TrainConfig, model: nn.Module, aux: nn.Module | None) -> torch.optim.Optimizer:
    decay, no_decay = weight_parameters(model)
    groups = [
        {"params": decay, "weight_decay": cfg.optim.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    if aux is not None and any(True for _ in aux.parameters()):
        # loss centers never receive weight decay
        groups.append({"params": list(aux.parameters()), "weight_decay": 0.0})
    if cfg.optim.kind == "sgd":
        return torch.optim.SGD(groups, lr=cfg.optim.lr)
    return torch.optim.Adam(groups, lr=cfg.optim.lr)


# -- checkpoint ---------------------------------------------------------------


@dataclass
class CheckpointRecord:
    model_state: dict
    aux_state: dict | None
    stats: ChannelStats
    config: TrainConfig
    step: int
    history: list[dict] = field(default_factory=list)
    best: dict = field(default_factory=dict)
    final_loss: float = float("nan")

    @property
    def center(self) -> torch.Tensor | None:
        if self.aux_state and "center" in self.aux_state:
            return self.aux_state["center"]
        return None

    def build_model(self) -> Detector:
        model = Detector(self.config.model).to(_dtype(self.config))
        model.load_state_dict(self.model_state)
        model.eval()
        return model

    def save(self, out_dir: str | os.PathLike) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        torch.save({"model": self.model_state, "aux": self.aux_state}, out / "params.pt")
        desc = {
            "config": self.config.to_dict(),
            "stats": self.stats.to_json(),
            "step": self.step,
            "best": self.best,
            "final_loss": self.final_loss,
            "history": self.history,
        }
        (out / "checkpoint.json").write_text(json.dumps(desc, indent=1))
        return out

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CheckpointRecord":
        path = Path(path)
        desc = json.loads((path / "checkpoint.json").read_text())
        blobs = torch.load(path / "params.pt", weights_only=True)
        return cls(
            model_state=blobs["model"],
            aux_state=blobs["aux"],
            stats=ChannelStats.from_json(desc["stats"]),
            config=from_dict(TrainConfig, desc["config"]),
            step=desc["step"],
            history=desc.get("history", []),
            best=desc.get("best", {}),
            final_loss=desc.get("final_loss", float("nan")),
        )


# -- evaluation ---------------------------------------------------------------


@dataclass
class Evaluation:
    frame: MetricsReport
    video: MetricsReport
    frames: list[ScoredFrame]

    def to_json(self) -> dict:
        return {"frame": self.frame.to_json(), "video": self.video.to_json()}


@torch.no_grad()
def _forward_all(model: Detector, t: _Tensors, batch: int = 256):
    model.eval()
    probs, embs = [], []
    for i in range(0, len(t.labels), batch):
        out = model(t.images[i : i + batch], t.freq[i : i + batch] if model.afimb is not None else None)
        probs.append(F.softmax(out.logits, dim=1)[:, 1])
        embs.append(out.embeddings)
    return torch.cat(probs), torch.cat(embs)


def score_frames(model: Detector, split: SplitData, stats: ChannelStats, dtype=torch.float32) -> list[ScoredFrame]:
    probs, _ = _forward_all(model, _prepare(split, stats, dtype))
    return [
        ScoredFrame(v, f, float(p), int(y))
        for v, f, p, y in zip(split.video_ids, split.frame_ids, probs.tolist(), split.labels.tolist())
    ]


def _evaluate_frames(frames: list[ScoredFrame]) -> Evaluation:
    return Evaluation(report(frames, "frame"), report(frames, "video"), frames)


def evaluate(ckpt: CheckpointRecord, split: SplitData) -> Evaluation:
    """Score a split with the checkpoint's parameters and channel statistics."""
    if split.freq.shape[1] != ckpt.stats.mean.shape[0]:
        raise ValueError("split tensors and checkpoint statistics disagree on channel count")
    model = ckpt.build_model()
    return _evaluate_frames(score_frames(model, split, ckpt.stats, _dtype(ckpt.config)))


# -- training -----------------------------------------------------------------


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.optim.warmup_steps > 0 and step < cfg.optim.warmup_steps:
        return cfg.optim.lr * (step + 1) / cfg.optim.warmup_steps
    return cfg.optim.lr


def train(cfg: TrainConfig, corpus: Corpus, out_dir: str | os.PathLike | None = None,
          on_step: Callable[[dict], None] | None = None) -> CheckpointRecord:
    """Train one model and return the best-validation checkpoint.

    Channel statistics come from the train split only. Validation happens at
    step 0, every ``run.eval_every`` steps and after the last step; selection
    is by video-level AUC, ties keeping the earlier checkpoint.
    """
    cfg.validate()
    dtype = _dtype(cfg)
    train_split = corpus["train"]
    val_split = corpus.splits.get(cfg.run.eval_split)
    stats = compute_stats(train_split)
    tr = _prepare(train_split, stats, dtype)
    val = _prepare(val_split, stats, dtype) if val_split is not None else None

    model = build_model(cfg)
    aux = build_aux_loss(cfg)
    weight = aux_weight(cfg)
    opt = build_optimizer(cfg, model, aux)
    sampler = mixed_batch_sampler(train_split.labels, cfg.run.batch_size, cfg.run.seed)
    steps_per_epoch = math.ceil(len(train_split) / cfg.run.batch_size)
    total_steps = cfg.run.max_steps or cfg.run.epochs * steps_per_epoch
    use_freq = model.afimb is not None

    hist_fh = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        save_config(cfg, Path(out_dir) / "config.json")
        hist_fh = open(Path(out_dir) / "history.jsonl", "w")

    history: list[dict] = []
    best = {"step": -1, "auc": -math.inf}
    best_state = None

    def validate(step: int) -> None:
        nonlocal best, best_state
        if val is None:
            return
        probs, _ = _forward_all(model, val)
        frames = [
            ScoredFrame(v, f, float(p), int(y))
            for v, f, p, y in zip(val_split.video_ids, val_split.frame_ids, probs.tolist(),
                                  val_split.labels.tolist())
        ]
        ev = _evaluate_frames(frames)
        rec = {"step": step, "val_auc": ev.video.auc, "val_pauc": ev.video.pauc_at_0_1,
               "val_frame_auc": ev.frame.auc}
        history.append(rec)
        if hist_fh:
            hist_fh.write(json.dumps(rec) + "\n")
        if ev.video.auc > best["auc"]:
            best = {"step": step, "auc": ev.video.auc, "pauc": ev.video.pauc_at_0_1}
            best_state = (copy.deepcopy(model.state_dict()),
                          copy.deepcopy(aux.state_dict()) if aux is not None else None)

    validate(0)
    final_loss = float("nan")
    for step in range(1, total_steps + 1):
        model.train()
        idx = torch.from_numpy(next(sampler))
        y = tr.labels[idx]
        out = model(tr.images[idx], tr.freq[idx] if use_freq else None)
        ce = F.cross_entropy(out.logits, y)
        rec = {"step": step, "ce": ce.item()}
        loss = ce
        if aux is not None:
            aux_val = aux(out.embeddings, y)
            loss = ce + weight * aux_val
            rec["aux"] = aux_val.item()
            if isinstance(aux, SingleCenterLoss):
                last = aux.last
                rec.update(scl=last.loss, m_nat=last.m_nat, m_man=last.m_man,
                           hinge_active=last.hinge_arg > 0, scl_active=last.active,
                           scl_inactive_batches=aux.inactive_batches)
        final_loss = loss.item()
        rec["loss"] = final_loss
        if not math.isfinite(final_loss):
            raise TrainingDiverged(f"non-finite loss at step {step}: {rec}")
        for g in opt.param_groups:
            g["lr"] = _lr_at(cfg, step - 1)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(rec)
        if hist_fh:
            hist_fh.write(json.dumps(rec) + "\n")
        if on_step:
            on_step(rec)
        if step % cfg.run.eval_every == 0 and step != total_steps:
            validate(step)
    validate(total_steps)
    if hist_fh:
        hist_fh.close()

    if best_state is None:  # no validation split: keep the final parameters
        best_state = (copy.deepcopy(model.state_dict()),
                      copy.deepcopy(aux.state_dict()) if aux is not None else None)
        best = {"step": total_steps}
    ckpt = CheckpointRecord(best_state[0], best_state[1], stats, cfg.copy(), total_steps,
                            history, best, final_loss)
    if out_dir is not None:
        ckpt.save(Path(out_dir) / "checkpoint")
    return ckpt


# -- embedding export ---------------------------------------------------------


@dataclass
class EmbeddingExport:
    video_ids: list[str]
    frame_ids: list[str]
    labels: np.ndarray
    distances: np.ndarray
    embeddings: np.ndarray
    center: np.ndarray

    def write_csv(self, path: str | os.PathLike) -> None:
        d = self.embeddings.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["video_id", "frame_id", "label", "distance_to_center"] + [f"e{i}" for i in range(d)])
            for v, f, y, dist, e in zip(self.video_ids, self.frame_ids, self.labels, self.distances,
                                        self.embeddings):
                w.writerow([v, f, int(y), repr(float(dist))] + [repr(float(x)) for x in e])

    def write_center(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps([float(x) for x in self.center]))


def read_export_csv(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(labels, distances, embeddings)`` from an export CSV."""
    labels, dists, embs = [], [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            labels.append(int(row[2]))
            dists.append(float(row[3]))
            embs.append([float(x) for x in row[4:]])
    return np.array(labels), np.array(dists), np.array(embs)


def export_embeddings(ckpt: CheckpointRecord, split: SplitData, n_per_class: int | None = 5000,
                      seed: int = 0) -> EmbeddingExport:
    """Seeded per-class sample of embeddings and their distance to the center.

    Without a learned single center (non-SCL variants) the mean natural
    embedding of the sample stands in for it. ``n_per_class=None`` keeps
    every frame.
    """
    rng = np.random.default_rng(seed)
    chosen = []
    for label in (0, 1):
        idx = np.flatnonzero(split.labels == label)
        if n_per_class is None:
            chosen.append(idx)
            continue
        if n_per_class > idx.size:
            log.warning("requested %d samples of class %d, only %d available", n_per_class, label, idx.size)
        chosen.append(np.sort(rng.choice(idx, size=min(n_per_class, idx.size), replace=False)))
    sel = np.concatenate(chosen)
    sub = SplitData(split.images[sel], split.freq[sel], split.labels[sel],
                    [split.video_ids[i] for i in sel], [split.frame_ids[i] for i in sel],
                    [split.tags[i] for i in sel])
    model = ckpt.build_model()
    _, emb = _forward_all(model, _prepare(sub, ckpt.stats, _dtype(ckpt.config)))
    emb = emb.double().numpy()
    center = ckpt.center
    if center is not None:
        c = center.double().numpy()
    else:
        c = emb[sub.labels == 0].mean(axis=0)
    dist = np.linalg.norm(emb - c, axis=1)
    return EmbeddingExport(sub.video_ids, sub.frame_ids, sub.labels, dist, emb, c)


def distance_gap(export: EmbeddingExport) -> tuple[float, float]:
    """Mean distance to center for natural and manipulated rows."""
    return (float(export.distances[export.labels == 0].mean()),
            float(export.distances[export.labels == 1].mean()))


# -- ablations ----------------------------------------------------------------

PROTOCOLS = ("losses", "fusion", "components", "sweep_lambda", "sweep_m")
SWEEP_M = [0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35]
SWEEP_LAMBDA = [0.0, 0.001, 0.01, 0.1, 0.5, 1.0]


def protocol_grid(protocol: str, base: TrainConfig, grid: list[float] | None = None) -> list[tuple[str, TrainConfig]]:
    """Named config variants for one ablation protocol."""
    cells: list[tuple[str, TrainConfig]] = []

    def cell(name, **edits):
        c = base.copy()
        for path, value in edits.items():
            obj = c
            parts = path.split("__")
            for p in parts[:-1]:
                obj = getattr(obj, p)
            setattr(obj, parts[-1], value)
        cells.append((name, c))

    if protocol == "losses":
        for v in ("softmax", "softmax+center", "softmax+triplet", "softmax+scl"):
            cell(v, loss__variant=v, model__use_affgm=False)
    elif protocol == "fusion":
        for name, kind, k, g in (("concat", "concat", 1, 1), ("sum", "sum", 1, 1),
                                 ("conv3x3_g1", "conv", 3, 1), ("conv1x1_g1", "conv", 1, 1),
                                 ("conv3x3_g2", "conv", 3, 2), ("conv1x1_g2", "conv", 1, 2)):
            cell(name, loss__variant="softmax", model__use_affgm=True,
                 model__fusion__kind=kind, model__fusion__kernel=k, model__fusion__groups=g)
    elif protocol == "components":
        cell("baseline", loss__variant="softmax", model__use_affgm=False)
        cell("+SCL", loss__variant="softmax+scl", model__use_affgm=False)
        cell("+AFFGM", loss__variant="softmax", model__use_affgm=True)
        cell("+SCL+AFFGM", loss__variant="softmax+scl", model__use_affgm=True)
    elif protocol == "sweep_m":
        for m in grid or SWEEP_M:
            cell(f"m={m:g}", loss__variant="softmax+scl", loss__scl__m=float(m), loss__scl__lam=0.5)
    elif protocol == "sweep_lambda":
        for lam in grid or SWEEP_LAMBDA:
            cell(f"lambda={lam:g}", loss__variant="softmax+scl", loss__scl__lam=float(lam), loss__scl__m=0.1)
    else:
        raise ValueError(f"unknown protocol {protocol!r} (choose from {', '.join(PROTOCOLS)})")
    return cells


@dataclass
class AblationCell:
    variant: str
    seed: int
    auc: float = float("nan")
    pauc: float = float("nan")
    acc: float = float("nan")
    frame_auc: float = float("nan")
    natural_distance: float = float("nan")
    manipulated_distance: float = float("nan")
    error: str = ""


def train_and_evaluate(cfg: TrainConfig, corpus: Corpus, out_dir=None) -> tuple[CheckpointRecord, Evaluation]:
    ckpt = train(cfg, corpus, out_dir)
    return ckpt, evaluate(ckpt, corpus[cfg.run.test_split])


def run_ablation(protocol: str, base: TrainConfig, corpus: Corpus, seeds: list[int] | None = None,
                 out_dir: str | os.PathLike | None = None, grid: list[float] | None = None) -> list[AblationCell]:
    """Train/evaluate every cell of a protocol for every seed.

    Failures are recorded in the cell and the grid continues.
    """
    seeds = list(seeds if seeds is not None else base.run.seeds)
    cells: list[AblationCell] = []
    for name, cfg in protocol_grid(protocol, base, grid):
        for seed in seeds:
            c = cfg.copy()
            c.run.seed = seed
            rec = AblationCell(name, seed)
            try:
                sub = None if out_dir is None else Path(out_dir) / _slug(name) / f"seed{seed}"
                ckpt, ev = train_and_evaluate(c, corpus, sub)
                rec.auc, rec.pauc, rec.acc = ev.video.auc, ev.video.pauc_at_0_1, ev.video.accuracy
                rec.frame_auc = ev.frame.auc
                exp = export_embeddings(ckpt, corpus[c.run.test_split], n_per_class=None, seed=seed)
                rec.natural_distance, rec.manipulated_distance = distance_gap(exp)
            except Exception as e:  # noqa: BLE001 - recorded per cell
                log.exception("ablation cell %s seed %d failed", name, seed)
                rec.error = f"{type(e).__name__}: {e}"
            cells.append(rec)
            log.info("%s seed=%d auc=%.4f pauc=%.4f %s", name, seed, rec.auc, rec.pauc, rec.error)
    if out_dir is not None:
        write_ablation_csv(cells, Path(out_dir) / f"{protocol}.csv")
    return cells


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "._=-" else "_" for ch in name)


def summarize(cells: list[AblationCell]) -> list[dict]:
    """One row per variant: mean over successful seeds."""
    rows = []
    for name in dict.fromkeys(c.variant for c in cells):
        ok = [c for c in cells if c.variant == name and not c.error]
        failed = [c for c in cells if c.variant == name and c.error]
        mean = (lambda attr: float(np.mean([getattr(c, attr) for c in ok])) if ok else float("nan"))
        rows.append({
            "variant": name,
            "auc": mean("auc"),
            "pauc_0.1": mean("pauc"),
            "acc": mean("acc"),
            "auc_std": float(np.std([c.auc for c in ok])) if ok else float("nan"),
            "n_seeds": len(ok),
            "failures": len(failed),
        })
    return rows


def write_ablation_csv(cells: list[AblationCell], path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = summarize(cells)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    with open(path.with_name(path.stem + "_cells.csv"), "w", newline="") as fh:
        fields = list(AblationCell.__dataclass_fields__)
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for c in cells:
            w.writerow({k: getattr(c, k) for k in fields})
