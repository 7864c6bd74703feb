"""Training loop: one full sequence per step, AdamW, periodic evaluation.

A run directory collects everything needed to reproduce and reuse the
run: the resolved config snapshot, the final and best checkpoints, the
optimizer state, a tab-separated metrics log (one line per epoch) and a
loss-curve figure.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint, plots
from .config import RunConfig, save_config
from .data import Dataset, VideoRecord, actions_in_frames
from .detect import ScoredSegment, detect
from .evaluate import EvalReport, map_report
from .losses import total_loss
from .model import forward, init_params
from .optim import AdamW, Schedule
from .targets import Assignment, assign_targets

log = logging.getLogger("actionloc")

CHECKPOINT_NAME = "checkpoint.cgmg"
BEST_CHECKPOINT_NAME = "checkpoint_best.cgmg"
OPTIM_STATE_NAME = "optim_state.cgmg"
CONFIG_SNAPSHOT_NAME = "config.yaml"
METRICS_NAME = "metrics.tsv"


class TrainingError(RuntimeError):
    """Raised when a step produces a non-finite loss or gradient."""


@dataclass
class EpochStats:
    epoch: int
    total: float
    vfl_pos: float
    vfl_neg: float
    iou: float
    lr: float
    eval_map: float | None = None

    def tsv_line(self) -> str:
        fields = [str(self.epoch)] + [f"{v:.6f}" for v in
                                      (self.total, self.vfl_pos, self.vfl_neg,
                                       self.iou, self.lr)]
        if self.eval_map is not None:
            fields.append(f"{self.eval_map:.6f}")
        return "\t".join(fields)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    stats: list[EpochStats]
    best_map: float | None
    out_dir: Path


def pyramid_lengths(frames: int, levels: int) -> list[int]:
    out = [frames]
    for _ in range(levels - 1):
        out.append((out[-1] + 1) // 2)
    return out


def _level_strides(levels: int) -> list[int]:
    return [2 ** i for i in range(levels)]


def resolve_for_dataset(cfg: RunConfig, dataset: Dataset) -> RunConfig:
    """The dataset is authoritative for feature dim and class count."""
    cfg.encoder.input_dim = dataset.feature_dim
    cfg.decoder.classes = dataset.num_classes
    cfg.validate()
    return cfg


def _video_assignment(video: VideoRecord, dataset: Dataset,
                      cfg: RunConfig) -> Assignment:
    return assign_targets(
        actions_in_frames(video, dataset.feature_fps),
        pyramid_lengths(video.frames, cfg.encoder.levels),
        _level_strides(cfg.encoder.levels),
        radius=cfg.training.center_radius)


def infer_video(video: VideoRecord, params: dict[str, np.ndarray],
                cfg: RunConfig, feature_fps: float) -> list[ScoredSegment]:
    _, outputs, _ = forward(video.features, params, cfg.model)
    return detect(outputs, _level_strides(cfg.encoder.levels), feature_fps,
                  video.duration(feature_fps), cfg.inference)


def evaluate_split(dataset: Dataset, subset: str, params: dict[str, np.ndarray],
                   cfg: RunConfig, jobs: int = 1,
                   ) -> tuple[dict[str, list[ScoredSegment]], EvalReport]:
    """Detections and the mAP report for one subset of the dataset."""
    videos = dataset.split(subset)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            all_dets = list(pool.map(
                lambda v: infer_video(v, params, cfg, dataset.feature_fps), videos))
    else:
        all_dets = [infer_video(v, params, cfg, dataset.feature_fps) for v in videos]
    detections = {v.id: d for v, d in zip(videos, all_dets)}
    gts = {v.id: [(a.start_s, a.end_s, a.label) for a in v.annotations]
           for v in videos}
    report = map_report(detections, gts, dataset.class_names, cfg.evaluation)
    return detections, report


def train(dataset: Dataset, cfg: RunConfig, out_dir: str | Path,
          resume: bool = False) -> TrainResult:
    """Train on the dataset's train split; returns in-memory parameters.

    Deterministic for a fixed (dataset, config): parameter init, epoch
    shuffles and every numeric step derive from the configured seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = resolve_for_dataset(cfg, dataset)
    train_videos = dataset.split("train")
    if not train_videos:
        raise TrainingError("dataset has no train split")
    val_videos = dataset.split("val")
    steps_per_epoch = len(train_videos)
    tcfg = cfg.training

    params = init_params(cfg.model, tcfg.seed)
    optimizer = AdamW(Schedule(base_lr=tcfg.lr, warmup_epochs=tcfg.warmup_epochs,
                               total_epochs=tcfg.epochs,
                               weight_decay=tcfg.weight_decay))
    start_epoch = 0
    if resume:
        params = checkpoint.load_params(out / CHECKPOINT_NAME)
        optimizer.load_state_arrays(checkpoint.load_params(out / OPTIM_STATE_NAME))
        start_epoch = optimizer.step_count // steps_per_epoch
        log.info("resuming at epoch %d (step %d)", start_epoch, optimizer.step_count)

    assignments = [_video_assignment(v, dataset, cfg) for v in train_videos]
    save_config(cfg, out / CONFIG_SNAPSHOT_NAME)

    stats: list[EpochStats] = []
    best_map = None
    metrics_path = out / METRICS_NAME
    mode = "a" if resume and metrics_path.exists() else "w"
    metrics_fh = open(metrics_path, mode)

    try:
        for epoch in range(start_epoch, tcfg.epochs):
            order = np.random.default_rng(
                np.random.SeedSequence([tcfg.seed, epoch])).permutation(steps_per_epoch)
            sums = np.zeros(4)
            lr = 0.0
            for step_i, vi in enumerate(order):
                video = train_videos[vi]
                _, outputs, view = forward(video.features, params, cfg.model)
                breakdown = total_loss(outputs, assignments[vi])
                if not np.isfinite(breakdown.value):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, video {video.id}: "
                        f"vfl_pos={breakdown.vfl_pos}, vfl_neg={breakdown.vfl_neg}, "
                        f"iou={breakdown.iou}")
                ad.backward(breakdown.total)
                try:
                    lr = optimizer.step(params, view.grads(),
                                        epoch + step_i / steps_per_epoch)
                except FloatingPointError as exc:
                    raise TrainingError(
                        f"{exc} at epoch {epoch}, video {video.id}") from exc
                sums += (breakdown.value, breakdown.vfl_pos,
                         breakdown.vfl_neg, breakdown.iou)
            means = sums / steps_per_epoch
            entry = EpochStats(epoch, *means, lr)

            last = epoch == tcfg.epochs - 1
            if val_videos and ((epoch + 1) % tcfg.eval_interval == 0 or last):
                _, report = evaluate_split(dataset, "val", params, cfg)
                entry.eval_map = report.average_map
                if best_map is None or report.average_map >= best_map:
                    best_map = report.average_map
                    checkpoint.save_params(out / BEST_CHECKPOINT_NAME, params)
            stats.append(entry)
            metrics_fh.write(entry.tsv_line() + "\n")
            metrics_fh.flush()
            log.info("epoch %d: loss %.4f lr %.2e%s", epoch, entry.total, entry.lr,
                     f" val mAP {entry.eval_map:.4f}" if entry.eval_map is not None else "")
    finally:
        metrics_fh.close()

    checkpoint.save_params(out / CHECKPOINT_NAME, params)
    checkpoint.save_params(out / OPTIM_STATE_NAME, optimizer.state_arrays())
    if not (out / BEST_CHECKPOINT_NAME).exists():
        checkpoint.save_params(out / BEST_CHECKPOINT_NAME, params)
    if stats:
        plots.save_loss_curve(
            [s.epoch for s in stats], [s.total for s in stats],
            {"cls_pos": [s.vfl_pos for s in stats],
             "cls_neg": [s.vfl_neg for s in stats],
             "iou": [s.iou for s in stats]},
            out / "figures" / "loss_curve.png")
    return TrainResult(params=params, stats=stats, best_map=best_map, out_dir=out)


def load_run(run_or_checkpoint: str | Path, best: bool = False,
             ) -> tuple[dict[str, np.ndarray], RunConfig]:
    """Load a checkpoint plus its resolved config, verifying compatibility."""
    from .config import load_config
    path = Path(run_or_checkpoint)
    if path.is_dir():
        ckpt = path / (BEST_CHECKPOINT_NAME if best else CHECKPOINT_NAME)
        cfg_path = path / CONFIG_SNAPSHOT_NAME
    else:
        ckpt = path
        cfg_path = path.parent / CONFIG_SNAPSHOT_NAME
    if not cfg_path.exists():
        raise checkpoint.CheckpointError(
            f"no config snapshot next to {ckpt} (expected {cfg_path})")
    cfg = load_config(cfg_path)
    params = checkpoint.load_params(ckpt)
    expected = init_params(cfg.model, cfg.training.seed)
    checkpoint.check_compatible(params, expected)
    return params, cfg
