"""Training harness: study-level splits, segmentation pre-training/fine-tuning
and femur distance-map training with best-checkpoint selection.

Every sample fetch goes through an :class:`AccessLog` so a run can prove it
never touched held-out studies.
"""
from __future__ import annotations

import copy
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from . import nets
from .core import (
    MANIFEST_NAME,
    MODEL_SIDE,
    FemurAnnotation,
    StudyRecord,
    list_study_ids,
    load_study,
    normalize_intensity,
    read_manifest,
    resize_to_model,
    to_model_coords,
)
from .femur import make_distance_map
from .metrics import dice


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 10
    epochs_pretrain: int = 1000
    epochs_finetune: int = 100
    epochs_femur: int = 1000
    val_fraction: float = 0.10
    val_every: int = 2
    train_fraction: float = 0.75
    seed: int = 0
    image_size: int = MODEL_SIDE
    checkpoint_every: int = 50
    optimizer: str = "adam"

    def __post_init__(self):
        for name in ("val_fraction", "train_fraction"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        for name in ("epochs_pretrain", "epochs_finetune", "epochs_femur", "batch_size",
                     "val_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.optimizer != "adam":
            raise ValueError("only the Adam optimiser is supported")
        if self.image_size % 16:
            raise ValueError("image_size must be divisible by 16")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SplitPlan:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def __post_init__(self):
        sets = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        if any(a & b for i, a in enumerate(sets) for b in sets[i + 1:]):
            raise ValueError("split sets overlap")

    def to_dict(self):
        return {k: list(getattr(self, k)) for k in ("train_ids", "val_ids", "test_ids")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(tuple(d[k]) for k in ("train_ids", "val_ids", "test_ids")))


def _ids_of(studies) -> list[str]:
    if isinstance(studies, StudySource):
        return list(studies.ids)
    return sorted(s if isinstance(s, str) else s.study_id for s in studies)


def make_split(studies, cfg: TrainConfig | None = None, seed: int | None = None) -> SplitPlan:
    """Study-level 75/25 train/test split with 10% of train held out for validation."""
    cfg = cfg or TrainConfig()
    seed = cfg.seed if seed is None else seed
    ids = _ids_of(studies)
    n = len(ids)
    if n < 4:
        raise ValueError(f"need at least 4 studies to split, got {n}")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(n)]
    n_test = min(max(1, int(round((1 - cfg.train_fraction) * n))), n - 2)
    n_val = min(max(1, int(round(cfg.val_fraction * (n - n_test)))), n - n_test - 1)
    test, rest = order[:n_test], order[n_test:]
    val, train = rest[:n_val], rest[n_val:]
    return SplitPlan(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)))


def carve_validation(ids: Iterable[str], fraction: float, seed: int):
    ids = sorted(ids)
    if len(ids) < 2:
        raise ValueError("need at least 2 studies to carve a validation set")
    order = [ids[i] for i in np.random.default_rng([seed, 1]).permutation(len(ids))]
    n_val = min(max(1, int(round(fraction * len(ids)))), len(ids) - 1)
    return sorted(order[n_val:]), sorted(order[:n_val])


# ---------------------------------------------------------------- data


@dataclass
class AccessLog:
    """Records ``(study_id, purpose)`` for every study read."""

    events: list[tuple[str, str]] = field(default_factory=list)

    def record(self, study_id: str, purpose: str):
        self.events.append((study_id, purpose))

    def ids(self, purpose: str | None = None) -> set[str]:
        return {s for s, p in self.events if purpose is None or p == purpose}


class StudySource:
    """Lazy, logged access to studies from a dataset directory or in-memory records."""

    def __init__(self, records: dict[str, StudyRecord] | None = None, root=None,
                 log: AccessLog | None = None):
        self._records = dict(records or {})
        self.root = Path(root) if root is not None else None
        self._manifest = None
        self.log = log if log is not None else AccessLog()
        if self.root is not None:
            self.ids = list_study_ids(self.root)
        else:
            self.ids = sorted(self._records)

    @classmethod
    def from_records(cls, records: Iterable[StudyRecord], log=None) -> "StudySource":
        return cls({r.study_id: r for r in records}, log=log)

    @classmethod
    def from_dir(cls, root, log=None) -> "StudySource":
        return cls(root=root, log=log)

    def get(self, study_id: str, purpose: str) -> StudyRecord:
        self.log.record(study_id, purpose)
        if study_id not in self._records:
            if self.root is None:
                raise KeyError(study_id)
            if self._manifest is None:
                self._manifest = read_manifest(self.root / MANIFEST_NAME)
            self._records[study_id] = load_study(self.root, study_id, self._manifest)
        return self._records[study_id]


def as_source(studies, log: AccessLog | None = None) -> StudySource:
    if isinstance(studies, StudySource):
        if log is not None:
            studies.log = log
        return studies
    if isinstance(studies, (str, Path)):
        return StudySource.from_dir(studies, log=log)
    return StudySource.from_records(studies, log=log)


@dataclass
class Sample:
    study_id: str
    branch: str  # "head", "abdomen" or "femur"
    image: np.ndarray  # model-size float32
    target: np.ndarray  # mask (uint8) or distance map (float32)


def prepare_seg_sample(rec: StudyRecord, plane: str, side: int) -> Sample | None:
    img, mask = rec.image(plane), rec.mask(plane)
    if img is None or mask is None:
        return None
    img_m, mask_m, _ = resize_to_model(normalize_intensity(img), mask, side)
    return Sample(rec.study_id, plane, img_m.pixels.astype(np.float32),
                  mask_m.pixels.astype(np.uint8))


def femur_target(ann: FemurAnnotation, shape, side: int) -> np.ndarray:
    """Distance-map target at model resolution for an annotation in original pixels."""
    scale = (shape[0] / side, shape[1] / side)
    p = np.clip(to_model_coords([ann.p1, ann.p2], scale), 0, side - 1)
    if np.allclose(p[0], p[1]):
        raise ValueError("femur endpoints coincide at model resolution")
    return make_distance_map(FemurAnnotation(tuple(p[0]), tuple(p[1])), (side, side))


def prepare_femur_sample(rec: StudyRecord, side: int) -> Sample | None:
    img, ann = rec.femur_image, rec.femur_annotation
    if img is None or ann is None:
        return None
    img_m, _, _ = resize_to_model(normalize_intensity(img), None, side)
    return Sample(rec.study_id, "femur", img_m.pixels.astype(np.float32),
                  femur_target(ann, img.shape, side).astype(np.float32))


class SampleSet:
    """Prepared samples for a set of studies; every use is logged under ``purpose``."""

    def __init__(self, source: StudySource, ids, kind: str, side: int, purpose: str):
        self.source, self.purpose = source, purpose
        self.samples: list[Sample] = []
        for sid in ids:
            rec = source.get(sid, purpose)
            if kind == "seg":
                found = [prepare_seg_sample(rec, p, side) for p in nets.BRANCHES]
            else:
                found = [prepare_femur_sample(rec, side)]
            self.samples.extend(s for s in found if s is not None)

    def __len__(self):
        return len(self.samples)

    def batch(self, idx) -> list[Sample]:
        out = [self.samples[i] for i in idx]
        for s in out:
            self.source.log.record(s.study_id, self.purpose)
        return out

    def branches(self) -> set[str]:
        return {s.branch for s in self.samples}


def _images(batch: list[Sample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in batch]))[:, None]


def _chunks(n: int, size: int):
    for i in range(0, n, size):
        yield range(i, min(i + size, n))


def _select(feats, idx):
    sel = torch.as_tensor(idx)
    return [f[sel] for f in feats]


def seg_batch_loss(model: nets.SharedUNet, batch: list[Sample]) -> torch.Tensor:
    """Encode the whole batch once; decode each branch only for its own samples."""
    feats = model.encode(_images(batch))
    masks = torch.from_numpy(np.stack([s.target for s in batch]))
    total = 0.0
    for b in nets.BRANCHES:
        idx = [i for i, s in enumerate(batch) if s.branch == b]
        if idx:
            logits = model.decode(_select(feats, idx), b)
            total = total + nets.seg_loss_per_sample(logits, masks[torch.as_tensor(idx)]).sum()
    return total / len(batch)


def femur_batch_loss(model: nets.FemurUNet, batch: list[Sample]) -> torch.Tensor:
    target = torch.from_numpy(np.stack([s.target for s in batch]))[:, None]
    return nets.femur_loss(model(_images(batch)), target)


@torch.no_grad()
def predict_masks(model: nets.SharedUNet, images: np.ndarray, branch: str,
                  batch_size: int = 10) -> np.ndarray:
    """Foreground probability for a stack of model-size images ``(N, S, S)``."""
    model.eval()
    out = []
    for idx in _chunks(len(images), batch_size):
        x = torch.from_numpy(np.asarray(images[idx.start:idx.stop], dtype=np.float32))[:, None]
        out.append(model(x, branch).softmax(1)[:, 1].numpy())
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:])


@torch.no_grad()
def evaluate_seg(model: nets.SharedUNet, samples: SampleSet, batch_size: int = 10) -> dict:
    """Mean validation Dice per branch and their mean (``"dice"``)."""
    model.eval()
    scores: dict[str, list[float]] = {b: [] for b in nets.BRANCHES}
    for idx in _chunks(len(samples), batch_size):
        batch = samples.batch(idx)
        feats = model.encode(_images(batch))
        for b in nets.BRANCHES:
            sel = [i for i, s in enumerate(batch) if s.branch == b]
            if not sel:
                continue
            pred = model.decode(_select(feats, sel), b).argmax(1).numpy().astype(bool)
            for k, i in enumerate(sel):
                scores[b].append(dice(pred[k], batch[i].target.astype(bool)))
    means = {b: float(np.mean(v)) if v else None for b, v in scores.items()}
    present = [v for v in means.values() if v is not None]
    return {"dice_head": means["head"], "dice_abd": means["abdomen"],
            "dice": float(np.mean(present)) if present else float("nan")}


@torch.no_grad()
def evaluate_femur(model: nets.FemurUNet, samples: SampleSet, batch_size: int = 10) -> dict:
    model.eval()
    total, n = 0.0, 0
    for idx in _chunks(len(samples), batch_size):
        batch = samples.batch(idx)
        total += float(femur_batch_loss(model, batch)) * len(batch)
        n += len(batch)
    return {"femur_loss": total / n}


# ------------------------------------------------------------- fitting


def _write_log(path, record: dict):
    if path is None:
        return
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def _log_record(epoch, split, loss=None, dice_head=None, dice_abd=None, femur_loss=None):
    return {"epoch": epoch, "split": split, "loss": loss, "dice_head": dice_head,
            "dice_abd": dice_abd, "femur_loss": femur_loss}


def _fit(model, kind: str, train: SampleSet, val: SampleSet, cfg: TrainConfig, epochs: int,
         loss_fn: Callable, eval_fn: Callable, metric_key: str, maximize: bool,
         out_dir=None, log_path=None, resume=None, extra: dict | None = None) -> dict:
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history: list[dict] = []
    best = {"epoch": None, "metric": None, "state": None}
    start = 1
    if resume is not None:
        state = nets.load_checkpoint(resume) if not isinstance(resume, dict) else resume
        model.load_state_dict(state["state_dict"])
        opt.load_state_dict(state["optimizer"])
        ex = state["extra"]
        history = list(ex["history"])
        best = {"epoch": ex["best_epoch"], "metric": ex["best_metric"],
                "state": ex["best_state"]}
        start = state["epoch"] + 1
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    extra = dict(extra or {})

    for epoch in range(start, epochs + 1):
        model.train()
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        total = 0.0
        for idx in _chunks(len(perm), cfg.batch_size):
            batch = train.batch(perm[idx.start:idx.stop])
            opt.zero_grad()
            loss = loss_fn(model, batch)
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        rec = _log_record(epoch, "train", loss=total / len(train))
        history.append(rec)
        _write_log(log_path, rec)

        if epoch % cfg.val_every == 0:
            scores = eval_fn(model, val)
            rec = _log_record(epoch, "val", **scores_to_log(scores))
            history.append(rec)
            _write_log(log_path, rec)
            m = scores[metric_key]
            better = best["metric"] is None or (m > best["metric"] if maximize else m < best["metric"])
            if better:
                best = {"epoch": epoch, "metric": float(m),
                        "state": copy.deepcopy(model.state_dict())}
                if out_dir is not None:
                    nets.save_checkpoint(out_dir / "best.pt", model, kind=kind, epoch=epoch,
                                         metric=float(m), extra={**extra, "history": history})
        if out_dir is not None and (epoch % cfg.checkpoint_every == 0 or epoch == epochs):
            nets.save_checkpoint(
                out_dir / "last.pt", model, kind=kind, epoch=epoch, metric=best["metric"],
                optimizer=opt,
                extra={**extra, "history": history, "best_epoch": best["epoch"],
                       "best_metric": best["metric"], "best_state": best["state"]})

    if best["state"] is None:
        # no validation epoch happened: keep the final weights
        best = {"epoch": epochs, "metric": None, "state": copy.deepcopy(model.state_dict())}
    model.load_state_dict(best["state"])
    return {
        "magic": nets.CKPT_MAGIC,
        "kind": kind,
        "config": model.cfg.to_dict(),
        "census": nets.layer_census(model),
        "state_dict": best["state"],
        "epoch": best["epoch"],
        "metric": best["metric"],
        "optimizer": None,
        "extra": {**extra, "history": history},
    }


def scores_to_log(scores: dict) -> dict:
    return {k: v for k, v in scores.items() if k in ("dice_head", "dice_abd", "femur_loss")}


def _train_val_ids(source: StudySource, split: SplitPlan | None, cfg: TrainConfig):
    if split is not None:
        return list(split.train_ids), list(split.val_ids)
    return carve_validation(source.ids, cfg.val_fraction, cfg.seed)


def _seg_sets(source, split, cfg):
    train_ids, val_ids = _train_val_ids(source, split, cfg)
    train = SampleSet(source, train_ids, "seg", cfg.image_size, "train")
    val = SampleSet(source, val_ids, "seg", cfg.image_size, "val")
    if len(train) == 0:
        raise ValueError("no segmentation samples (image + mask) in the training studies")
    if len(val) == 0:
        raise ValueError("no segmentation samples in the validation studies")
    missing = set(nets.BRANCHES) - train.branches()
    if missing:
        warnings.warn(f"no {', '.join(sorted(missing))} samples; training the remaining branch only")
    return train, val


def _meta(cfg, split, train, val, stage):
    return {"train_config": cfg.to_dict(), "stage": stage,
            "train_ids": sorted({s.study_id for s in train.samples}),
            "val_ids": sorted({s.study_id for s in val.samples}),
            "split": split.to_dict() if split is not None else None}


def pretrain_seg(model: nets.SharedUNet, studies, cfg: TrainConfig | None = None, *,
                 split: SplitPlan | None = None, epochs: int | None = None, out_dir=None,
                 log_path=None, resume=None, access_log: AccessLog | None = None) -> dict:
    """Train the shared U-Net on (external) segmentation data.

    Without a ``split``, all studies are used and 10% of them are held out
    for validation. The checkpoint with the best mean validation Dice wins.
    """
    cfg = cfg or TrainConfig()
    source = as_source(studies, access_log)
    train, val = _seg_sets(source, split, cfg)
    return _fit(model, "shared", train, val, cfg, epochs or cfg.epochs_pretrain, seg_batch_loss,
                evaluate_seg, "dice", True, out_dir, log_path, resume,
                _meta(cfg, split, train, val, "pretrain"))


def finetune_seg(checkpoint, studies, cfg: TrainConfig | None = None, *,
                 split: SplitPlan | None = None, epochs: int | None = None, out_dir=None,
                 log_path=None, resume=None, access_log: AccessLog | None = None) -> dict:
    """Continue training a shared U-Net checkpoint on the target dataset."""
    cfg = cfg or TrainConfig()
    model = nets.model_from_checkpoint(checkpoint)
    if not isinstance(model, nets.SharedUNet):
        raise ValueError("fine-tuning needs a shared segmentation checkpoint")
    source = as_source(studies, access_log)
    train, val = _seg_sets(source, split, cfg)
    return _fit(model, "shared", train, val, cfg, epochs or cfg.epochs_finetune, seg_batch_loss,
                evaluate_seg, "dice", True, out_dir, log_path, resume,
                _meta(cfg, split, train, val, "finetune"))


def train_femur(model: nets.FemurUNet, studies, cfg: TrainConfig | None = None, *,
                split: SplitPlan | None = None, epochs: int | None = None, out_dir=None,
                log_path=None, resume=None, access_log: AccessLog | None = None) -> dict:
    """Train the distance-map regressor; the lowest validation loss wins."""
    cfg = cfg or TrainConfig()
    source = as_source(studies, access_log)
    train_ids, val_ids = _train_val_ids(source, split, cfg)
    train = SampleSet(source, train_ids, "femur", cfg.image_size, "train")
    val = SampleSet(source, val_ids, "femur", cfg.image_size, "val")
    if len(train) == 0 or len(val) == 0:
        raise ValueError("no femur annotations available for training/validation")
    return _fit(model, "femur", train, val, cfg, epochs or cfg.epochs_femur, femur_batch_loss,
                evaluate_femur, "femur_loss", False, out_dir, log_path, resume,
                _meta(cfg, split, train, val, "femur"))


def validation_curve(ckpt: dict, key: str) -> list[tuple[int, float]]:
    return [(r["epoch"], r[key]) for r in ckpt["extra"]["history"]
            if r["split"] == "val" and r[key] is not None and not math.isnan(r[key])]
