"""Training orchestration: pre-training, the iterative co-training loop, and
the fully supervised and mean-teacher baselines.

Every stochastic choice is drawn from a generator derived from
``(seed, phase, iteration, ...)``, and each phase builds a fresh optimizer, so
a run resumed from an iteration checkpoint continues bit-identically to the
uninterrupted run.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .datasets import DatasetSplit, Sample, derive_rng
from .errors import ContractViolation
from .losses import LambdaSchedule, mse_consistency, registration_objective, soft_dice_loss
from .metrics import dsc
from .models import (RegModel, SegModel, build_reg_model, build_seg_model,
                     load_checkpoint, save_checkpoint, seg_forward)
from .pseudo_masks import SoftPseudoMask, generate_pseudo_mask_detailed, save_soft_mask
from .warp import apply_augment, invert_augment, sample_augment


@dataclass
class ExperimentConfig:
    """All knobs of an experiment; defaults mirror the reference setup.

    ``epoch_scale`` shrinks every epoch count (and the mean-teacher schedule)
    proportionally for desk-scale runs; ``seg_steps_cap``/``reg_pairs_cap``
    bound the per-epoch work on large unions the same way.
    """

    # data
    data_count: int = 250
    image_size: int = 256
    test_fraction: float = 0.2
    val_count: int = 20
    annotation_rate: float = 0.01
    n_annotated: int | None = None
    # pseudo-mask engine
    n_pseudo: int = 5
    # registration pyramid
    k_levels: int = 5
    lambda_start: float = 128.0
    lambda_weights: list[float] | None = None
    # learning rates and epochs
    seg_lr_initial: float = 1e-4
    seg_epochs_initial: int = 500
    seg_lr_later: float = 1e-5
    seg_epochs_later: int = 100
    reg_lr_initial: float = 1e-3
    reg_epochs_initial: int = 200
    reg_lr_later: float = 1e-4
    reg_epochs_later: int = 50
    n_iterations: int = 8
    seed: int = 0
    # mean teacher
    ema_decay: float = 0.99
    consistency_weight: float = 1.0
    mt_ramp_start: int = 100
    mt_ramp_end: int = 200
    # engineering
    epoch_scale: float = 1.0
    batch_size: int = 4
    seg_steps_cap: int | None = None
    reg_pairs_cap: int | None = None
    base_width: int = 16

    def scaled(self, epochs: int) -> int:
        return max(1, round(epochs * self.epoch_scale))

    def lambdas(self) -> LambdaSchedule:
        return LambdaSchedule(self.k_levels, start=self.lambda_start,
                              weights=self.lambda_weights)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1))

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        payload = json.loads(Path(path).read_text())
        unknown = set(payload) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)

    @classmethod
    def desk_scale(cls, **overrides) -> "ExperimentConfig":
        """Small-image preset calibrated to run the full study on a
        laptop-class CPU in well under an hour.

        Two groups of values deviate from the reference defaults and are
        calibrated rather than derived:

        * lambda_start: the reference schedule assumes displacement fields in
          half-image units; fields here are in pixels, so the preset rescales
          lambda_start by (2 / image_size)**2 to keep the same physical
          regularization strength.
        * epoch counts: phases are sized to their observed saturation points
          at 64 px rather than scaled uniformly, because an "epoch" covers a
          2-image pool during segmenter pretraining but a ~190-image pool
          during fine-tuning. Learning rates keep the reference schedule.
        """
        base = dict(
            data_count=250, image_size=64, val_count=10,
            n_iterations=4, epoch_scale=0.5, batch_size=4,
            seg_steps_cap=12, reg_pairs_cap=48,
            seg_epochs_initial=300, seg_epochs_later=300,
            reg_epochs_initial=270, reg_epochs_later=30,
        )
        base.update(overrides)
        if "lambda_start" not in base:
            size = base["image_size"]
            base["lambda_start"] = 128.0 * (2.0 / size) ** 2
        return cls(**base)


@dataclass
class TrainState:
    iteration: int
    seg: SegModel
    reg: RegModel
    pseudo_masks: dict[str, SoftPseudoMask] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


class TrainingLogger:
    """Per-step record of which images entered which training batch.

    Feeds both the per-epoch loss CSV and the split-hygiene audit, which must
    be able to prove that no test id ever reached a gradient step.
    """

    def __init__(self):
        self.rows: list[dict] = []

    def log(self, phase: str, iteration: int, epoch: int, step: int,
            image_ids: list[str], loss: float) -> None:
        self.rows.append({"phase": phase, "iteration": iteration, "epoch": epoch,
                          "step": step, "image_ids": ";".join(image_ids),
                          "loss": float(loss)})

    def all_image_ids(self) -> set[str]:
        out: set[str] = set()
        for row in self.rows:
            if row["image_ids"]:
                out.update(row["image_ids"].split(";"))
        return out

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["phase", "iteration", "epoch", "step",
                                                    "image_ids", "loss"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow({**row, "loss": repr(row["loss"])})

    def epoch_means(self) -> list[dict]:
        keyed: dict[tuple, list[float]] = {}
        for row in self.rows:
            keyed.setdefault((row["phase"], row["iteration"], row["epoch"]), []).append(row["loss"])
        return [{"phase": k[0], "iteration": k[1], "epoch": k[2],
                 "loss": float(np.mean(v))} for k, v in keyed.items()]

    def save_epoch_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["phase", "iteration", "epoch", "loss"])
            writer.writeheader()
            for row in self.epoch_means():
                writer.writerow({**row, "loss": repr(row["loss"])})


def audit_split_hygiene(log_csv_path, test_ids: list[str]) -> list[str]:
    """Ids from the test set that leaked into any logged training batch."""
    test = set(test_ids)
    leaked = set()
    with open(log_csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["image_ids"]:
                leaked.update(set(row["image_ids"].split(";")) & test)
    return sorted(leaked)


def _derive_int(seed: int, *tags) -> int:
    return int(derive_rng(seed, *tags).integers(0, 2 ** 31 - 1))


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def _stack_images(samples: list) -> torch.Tensor:
    return torch.stack([s if isinstance(s, torch.Tensor) else s.image
                        for s in samples])[:, None]


def mean_val_dsc(model: SegModel, samples: list[Sample]) -> float:
    scores = []
    with torch.no_grad():
        for s in samples:
            pred = seg_forward(model, s.image).numpy() > 0.5
            scores.append(dsc(pred, s.mask.numpy() > 0.5))
    return float(np.mean(scores)) if scores else math.nan


def _train_seg_epochs(model: SegModel, pairs: list[tuple[str, torch.Tensor, torch.Tensor]],
                      epochs: int, lr: float, cfg: ExperimentConfig, rng: np.random.Generator,
                      logger: TrainingLogger | None, phase: str, iteration: int,
                      validation: list[Sample] = (), steps_cap: int | None = None) -> float:
    """Dice-loss epochs over (id, image, target) triples; returns last loss.

    With a validation set the best-scoring parameters seen at periodic checks
    are restored at the end.
    """
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    best = (-1.0, None)
    check_every = max(1, epochs // 20)
    last = math.nan
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        if steps_cap is not None:
            order = order[:steps_cap * cfg.batch_size]
        for step, batch_idx in enumerate(_batches(order, cfg.batch_size)):
            batch = [pairs[i] for i in batch_idx]
            x = _stack_images([b[1] for b in batch])
            y = _stack_images([b[2] for b in batch])
            opt.zero_grad()
            loss = soft_dice_loss(model(x), y)
            loss.backward()
            opt.step()
            last = loss.item()
            if logger is not None:
                logger.log(phase, iteration, epoch, step, [b[0] for b in batch], last)
        if validation and (epoch % check_every == 0 or epoch == epochs - 1):
            score = mean_val_dsc(model, validation)
            if score > best[0]:
                best = (score, copy.deepcopy(model.state_dict()))
    if best[1] is not None:
        model.load_state_dict(best[1])
    return last


def pretrain_segmentation(cfg: ExperimentConfig, annotated: list[Sample],
                          validation: list[Sample] = (),
                          logger: TrainingLogger | None = None,
                          phase: str = "seg-pretrain") -> SegModel:
    """Initial segmenter training on the annotated set only."""
    if not annotated:
        raise ContractViolation("cannot pretrain the segmenter with no annotated samples")
    model = build_seg_model(_derive_int(cfg.seed, "seg-init"), cfg.image_size, cfg.base_width)
    pairs = [(s.id, s.image, s.mask) for s in annotated]
    _train_seg_epochs(model, pairs, cfg.scaled(cfg.seg_epochs_initial), cfg.seg_lr_initial,
                      cfg, derive_rng(cfg.seed, phase), logger, phase, 0,
                      validation=validation)
    return model


def _train_reg_epochs(model: RegModel, pair_sampler, n_pairs: int, epochs: int, lr: float,
                      cfg: ExperimentConfig, logger: TrainingLogger | None, phase: str,
                      iteration: int) -> float:
    """Registration epochs over sampled (source, target) pairs.

    ``pair_sampler(rng)`` yields (source_id, target_id, src_img, tgt_img,
    src_mask|None, tgt_mask|None); masks must be all-present or all-absent
    within a batch, which holds because the sampler is phase-fixed.
    """
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = cfg.lambdas()
    rng = derive_rng(cfg.seed, phase, iteration)
    last = math.nan
    for epoch in range(epochs):
        draws = [pair_sampler(rng) for _ in range(n_pairs)]
        for step, start in enumerate(range(0, len(draws), cfg.batch_size)):
            batch = draws[start:start + cfg.batch_size]
            src = _stack_images([b[2] for b in batch])
            tgt = _stack_images([b[3] for b in batch])
            masked = batch[0][4] is not None
            y_s = _stack_images([b[4] for b in batch]) if masked else None
            y_t = _stack_images([b[5] for b in batch]) if masked else None
            opt.zero_grad()
            fields = model(src, tgt)
            loss = registration_objective(fields, src, tgt, sched, y_s, y_t)
            loss.backward()
            opt.step()
            last = loss.item()
            if logger is not None:
                ids = sorted({b[0] for b in batch} | {b[1] for b in batch})
                logger.log(phase, iteration, epoch, step, ids, last)
    return last


def pretrain_registration(cfg: ExperimentConfig, images: list[Sample],
                          logger: TrainingLogger | None = None,
                          phase: str = "reg-pretrain") -> RegModel:
    """Unsupervised registration training on random pairs, masks unused."""
    if len(images) < 2:
        raise ContractViolation("registration pre-training needs at least 2 images")
    model = build_reg_model(_derive_int(cfg.seed, "reg-init"), cfg.image_size,
                            cfg.k_levels, cfg.base_width)

    def sampler(rng):
        i = int(rng.integers(len(images)))
        j = int(rng.integers(len(images) - 1))
        if j >= i:
            j += 1
        return (images[j].id, images[i].id, images[j].image, images[i].image, None, None)

    n_pairs = len(images) if cfg.reg_pairs_cap is None else min(len(images), cfg.reg_pairs_cap)
    _train_reg_epochs(model, sampler, n_pairs, cfg.scaled(cfg.reg_epochs_initial),
                      cfg.reg_lr_initial, cfg, logger, phase, 0)
    return model


def _pseudo_entropy(masks: dict[str, SoftPseudoMask]) -> float:
    if not masks:
        return math.nan
    vals = []
    for pm in masks.values():
        c = pm.confidence.clamp(1e-6, 1 - 1e-6)
        ent = -(c * torch.log(c) + (1 - c) * torch.log(1 - c))
        vals.append(float(ent.mean()))
    return float(np.mean(vals))


def _pseudo_audit_dsc(masks: dict[str, SoftPseudoMask], data: DatasetSplit) -> float:
    if not masks:
        return math.nan
    scores = []
    for sid, pm in masks.items():
        gt = data.audit_hidden_mask(sid).numpy() > 0.5
        scores.append(dsc(pm.confidence.numpy() > 0.5, gt))
    return float(np.mean(scores))


def run_iteration(state: TrainState, cfg: ExperimentConfig, data: DatasetSplit,
                  logger: TrainingLogger | None = None,
                  run_dir: Path | None = None) -> TrainState:
    """One co-training cycle: regenerate pseudo-masks, then fine-tune both nets."""
    it = state.iteration + 1
    seg, reg = state.seg, state.reg

    pseudo: dict[str, SoftPseudoMask] = {}
    unannotated = sorted(data.train_unannotated, key=lambda s: s.id)
    panel_dir = None
    if run_dir is not None:
        panel_dir = Path(run_dir) / "pseudo" / f"iter_{it}"
        panel_dir.mkdir(parents=True, exist_ok=True)
    for idx, s in enumerate(unannotated):
        rng = derive_rng(cfg.seed, "pseudo", it, idx)
        fused, seg_mean, reg_mean = generate_pseudo_mask_detailed(
            seg, reg, s.image, data.train_annotated, cfg.n_pseudo, rng)
        pseudo[s.id] = fused
        if logger is not None:
            logger.log("pseudo-gen", it, 0, idx, [s.id], float(fused.confidence.mean()))
        if panel_dir is not None:
            save_soft_mask(panel_dir / f"{s.id}_seg.png", seg_mean)
            save_soft_mask(panel_dir / f"{s.id}_reg.png", reg_mean)
            save_soft_mask(panel_dir / f"{s.id}_fused.png", fused.confidence)

    seg_pairs = [(s.id, s.image, s.mask) for s in data.train_annotated]
    seg_pairs += [(s.id, s.image, pseudo[s.id].confidence) for s in unannotated]
    seg_loss = _train_seg_epochs(seg, seg_pairs, cfg.scaled(cfg.seg_epochs_later),
                                 cfg.seg_lr_later, cfg, derive_rng(cfg.seed, "seg-tune", it),
                                 logger, "seg-finetune", it, validation=data.validation,
                                 steps_cap=cfg.seg_steps_cap)

    annotated = data.train_annotated
    targets = data.train_images()

    def sampler(rng):
        src = annotated[int(rng.integers(len(annotated)))]
        while True:
            tgt = targets[int(rng.integers(len(targets)))]
            if tgt.id != src.id:
                break
        tgt_mask = tgt.mask if tgt.mask is not None else pseudo[tgt.id].confidence
        return (src.id, tgt.id, src.image, tgt.image, src.mask, tgt_mask)

    reg_loss = math.nan
    if targets and len(annotated) >= 1 and len(targets) >= 2:
        n_pairs = len(targets) if cfg.reg_pairs_cap is None else min(len(targets),
                                                                     cfg.reg_pairs_cap)
        reg_loss = _train_reg_epochs(reg, sampler, n_pairs, cfg.scaled(cfg.reg_epochs_later),
                                     cfg.reg_lr_later, cfg, logger, "reg-finetune", it)

    entry = {
        "iteration": it,
        "seg_loss": seg_loss,
        "reg_loss": reg_loss,
        "pseudo_entropy": _pseudo_entropy(pseudo),
        "pseudo_audit_dsc": _pseudo_audit_dsc(pseudo, data),
        "val_dsc": mean_val_dsc(seg, data.validation) if data.validation else math.nan,
    }
    return TrainState(iteration=it, seg=seg, reg=reg, pseudo_masks=pseudo,
                      history=state.history + [entry])


def _save_iteration(run_dir: Path, state: TrainState, cfg: ExperimentConfig) -> None:
    ck = run_dir / "checkpoints" / f"iter_{state.iteration}"
    save_checkpoint(ck / "seg", state.seg, cfg.seed, state.iteration)
    save_checkpoint(ck / "reg", state.reg, cfg.seed, state.iteration)
    (ck / "state.json").write_text(json.dumps(
        {"iteration": state.iteration, "history": state.history}, indent=1))


def _load_latest_iteration(run_dir: Path) -> TrainState | None:
    root = run_dir / "checkpoints"
    if not root.is_dir():
        return None
    iters = sorted((int(p.name.split("_")[1]), p) for p in root.glob("iter_*"))
    if not iters:
        return None
    _, ck = iters[-1]
    seg, _ = load_checkpoint(ck / "seg")
    reg, _ = load_checkpoint(ck / "reg")
    meta = json.loads((ck / "state.json").read_text())
    return TrainState(iteration=meta["iteration"], seg=seg, reg=reg,
                      history=meta["history"])


def train_joint(cfg: ExperimentConfig, data: DatasetSplit,
                logger: TrainingLogger | None = None,
                run_dir=None, resume: bool = False) -> TrainState:
    """Pretrain both models, then run the co-training iterations.

    With ``run_dir`` set, each iteration checkpoints models, history and the
    per-iteration pseudo-masks; ``resume=True`` restarts after the latest
    complete iteration and continues exactly as the uninterrupted run would.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    state = None
    if resume:
        if run_dir is None:
            raise ContractViolation("resume requires a run directory")
        state = _load_latest_iteration(run_dir)
    if state is None:
        torch.manual_seed(_derive_int(cfg.seed, "joint"))
        seg = pretrain_segmentation(cfg, data.train_annotated, data.validation, logger,
                                    phase="joint-seg-pretrain")
        reg = pretrain_registration(cfg, data.train_images(), logger,
                                    phase="joint-reg-pretrain")
        entry = {"iteration": 0, "seg_loss": math.nan, "reg_loss": math.nan,
                 "pseudo_entropy": math.nan, "pseudo_audit_dsc": math.nan,
                 "val_dsc": mean_val_dsc(seg, data.validation) if data.validation else math.nan}
        state = TrainState(iteration=0, seg=seg, reg=reg, history=[entry])
        if run_dir is not None:
            _save_iteration(run_dir, state, cfg)
    while state.iteration < cfg.n_iterations:
        state = run_iteration(state, cfg, data, logger, run_dir)
        if run_dir is not None:
            _save_iteration(run_dir, state, cfg)
    return state


def train_fully_supervised(cfg: ExperimentConfig, data: DatasetSplit,
                           logger: TrainingLogger | None = None) -> SegModel:
    """The baseline segmenter: annotated data only, no pseudo-labels."""
    return pretrain_segmentation(cfg, data.train_annotated, data.validation, logger,
                                 phase="fs")


def _ema_update(teacher: SegModel, student: SegModel, decay: float) -> None:
    with torch.no_grad():
        for tp, sp in zip(teacher.state_dict().values(), student.state_dict().values()):
            tp.mul_(decay).add_(sp, alpha=1.0 - decay)


def train_mean_teacher(cfg: ExperimentConfig, data: DatasetSplit,
                       logger: TrainingLogger | None = None) -> SegModel:
    """Mean-teacher baseline; returns the teacher for evaluation.

    The student minimizes Dice on annotated data plus a consistency term: the
    mean squared difference between student and teacher predictions of the
    same unannotated image under two independent augmentations, mapped back to
    the original frame. The teacher mirrors the student until the activation
    epoch and follows it by EMA afterwards; the consistency weight ramps
    linearly from the activation epoch to the ramp end.
    """
    if not data.train_annotated:
        raise ContractViolation("mean teacher needs at least one annotated sample")
    student = build_seg_model(_derive_int(cfg.seed, "mt-init"), cfg.image_size, cfg.base_width)
    teacher = copy.deepcopy(student)
    opt = torch.optim.Adam(student.parameters(), lr=cfg.seg_lr_initial)
    epochs = cfg.scaled(cfg.seg_epochs_initial)
    ema_start = cfg.scaled(cfg.mt_ramp_start)
    ramp_end = cfg.scaled(cfg.mt_ramp_end)
    rng = derive_rng(cfg.seed, "mt")
    annotated = data.train_annotated
    unannotated = data.train_unannotated
    best = (-1.0, None)
    check_every = max(1, epochs // 20)
    for epoch in range(epochs):
        if ramp_end > ema_start and epoch >= ema_start:
            w = cfg.consistency_weight * min(1.0, (epoch - ema_start) / (ramp_end - ema_start))
        else:
            w = 0.0
        order = rng.permutation(len(annotated))
        for step, batch_idx in enumerate(_batches(order, cfg.batch_size)):
            batch = [annotated[i] for i in batch_idx]
            x = _stack_images([s.image for s in batch])
            y = _stack_images([s.mask for s in batch])
            loss = soft_dice_loss(student(x), y)
            ids = [s.id for s in batch]
            if unannotated:
                pick = rng.choice(len(unannotated), size=min(cfg.batch_size, len(unannotated)),
                                  replace=False)
                cons_samples = [unannotated[int(i)] for i in pick]
                augments = [(sample_augment(rng), sample_augment(rng)) for _ in cons_samples]
                if w > 0.0:
                    cons = torch.zeros(())
                    for s, (a_student, a_teacher) in zip(cons_samples, augments):
                        sp = student(apply_augment(s.image, a_student, kind="image")[None, None])[0, 0]
                        with torch.no_grad():
                            tp = teacher(apply_augment(s.image, a_teacher, kind="image")[None, None])[0, 0]
                        cons = cons + mse_consistency(invert_augment(sp, a_student),
                                                      invert_augment(tp, a_teacher))
                    loss = loss + w * cons / len(cons_samples)
                    ids += [s.id for s in cons_samples]
            opt.zero_grad()
            loss.backward()
            opt.step()
            if epoch >= ema_start:
                _ema_update(teacher, student, cfg.ema_decay)
            else:
                teacher.load_state_dict(student.state_dict())
            if logger is not None:
                logger.log("mt", 0, epoch, step, ids, loss.item())
        if data.validation and (epoch % check_every == 0 or epoch == epochs - 1):
            score = mean_val_dsc(teacher, data.validation)
            if score > best[0]:
                best = (score, copy.deepcopy(teacher.state_dict()))
    if best[1] is not None:
        teacher.load_state_dict(best[1])
    return teacher
