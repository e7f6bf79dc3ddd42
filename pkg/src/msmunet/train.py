"""Training loop, evaluation and run reports."""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import TrainConfig
from .data import AugmentConfig, CtSlice, augment, stack_batch
from .losses import LossReport, MetricReport, segmentation_metrics, total_loss
from .model import DBMSMUNet, check_input_size
from .optim import LrSchedule, adamw_step, cosine_lr
from .tensor import no_grad


class NumericError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    lr: float
    loss: LossReport
    val: MetricReport
    seconds: float

    COLUMNS = ("epoch", "steps", "lr", "loss_total", "loss_area", "loss_aux_area", "loss_edge",
               "loss_aux_edge", "val_dsc", "val_precision", "val_recall", "seconds")

    def row(self) -> list[str]:
        loss = self.loss
        vals = [self.epoch, self.steps, repr(self.lr), loss.total, loss.area, loss.aux_area, loss.edge,
                loss.aux_edge, self.val.dsc, self.val.precision, self.val.recall]
        out = [str(v) if isinstance(v, (int, str)) else f"{v:.6f}" for v in vals]
        return out + [f"{self.seconds:.3f}"]


@dataclass
class RunReport:
    records: list[EpochRecord] = field(default_factory=list)
    parameter_count: int = 0
    best_epoch: int = -1
    best_dsc: float = -1.0
    final_train_dsc: float = float("nan")
    steps: int = 0

    @property
    def lr_trace(self) -> list[float]:
        return [r.lr for r in self.records]

    def to_tsv(self, include_timing: bool = True) -> str:
        cols = EpochRecord.COLUMNS if include_timing else EpochRecord.COLUMNS[:-1]
        buf = io.StringIO()
        buf.write("\t".join(cols) + "\n")
        for r in self.records:
            buf.write("\t".join(r.row()[: len(cols)]) + "\n")
        return buf.getvalue()

    def summary(self) -> str:
        lines = [
            f"parameters\t{self.parameter_count}",
            f"steps\t{self.steps}",
            f"best_epoch\t{self.best_epoch}",
            f"best_val_dsc\t{self.best_dsc:.6f}",
            f"final_train_dsc\t{self.final_train_dsc:.6f}",
        ]
        return "\n".join(lines) + "\n"


def predict(model: DBMSMUNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Foreground probabilities (N,1,H,W) for images from ``stack_batch``."""
    outs = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(model(images[i : i + batch_size]).area_prob().data)
    return np.concatenate(outs)


def evaluate(model: DBMSMUNet, slices: list[CtSlice], batch_size: int = 8) -> MetricReport:
    if not slices:
        raise ValueError("cannot evaluate on an empty dataset")
    images, masks, _ = stack_batch(slices)
    return segmentation_metrics(predict(model, images, batch_size), masks)


def split_dataset(slices: list[CtSlice], val_fraction: float) -> tuple[list[CtSlice], list[CtSlice]]:
    """Hold out the last ``val_fraction`` of the manifest; with no holdout the
    training set doubles as validation set."""
    n_val = int(math.floor(len(slices) * val_fraction))
    if n_val == 0:
        return slices, slices
    return slices[:-n_val], slices[-n_val:]


def train(
    config: TrainConfig,
    train_slices: list[CtSlice],
    val_slices: list[CtSlice] | None = None,
    out_dir: str | Path | None = None,
    log=None,
) -> tuple[DBMSMUNet, RunReport]:
    """AdamW + warm-restart cosine training of the total loss.

    The checkpoint in ``out_dir`` is rewritten whenever validation DSC
    improves, so it always holds the best epoch seen so far.
    """
    if not train_slices:
        raise ValueError("training set is empty")
    h, w = train_slices[0].image.shape
    check_input_size(h, w)
    val_slices = val_slices or train_slices
    out_path = Path(out_dir) if out_dir else None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)

    model = DBMSMUNet(config.model, seed=config.seed)
    params = model.parameters()
    schedule = LrSchedule(config.lr, config.min_lr, config.period)
    order_rng = np.random.default_rng(config.seed)
    aug_rng = np.random.default_rng(config.seed + 1)
    report = RunReport(parameter_count=model.num_parameters())
    n = len(train_slices)
    bs = min(config.batch_size, n)
    step = 0

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(schedule, epoch)
        order = order_rng.permutation(n)
        sums = LossReport()
        batches = 0
        for start in range(0, n, bs):
            if config.max_steps and step >= config.max_steps:
                break
            batch = [augment(train_slices[i], aug_rng, config.augment) for i in order[start : start + bs]]
            images, masks, edges = stack_batch(batch)
            outputs = model(images)
            loss, parts = total_loss(outputs, masks, edges, config.model.ads_weights, config.swap_edge_weights)
            if not math.isfinite(parts.total):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step} ({parts.as_dict()}); "
                    "the last saved checkpoint is kept"
                )
            loss.backward()
            adamw_step(params, lr, weight_decay=config.weight_decay)
            step += 1
            batches += 1
            for key, val in parts.as_dict().items():
                setattr(sums, key, getattr(sums, key) + val)
        if batches == 0:
            break
        mean_loss = LossReport(**{k: v / batches for k, v in sums.as_dict().items()})
        val = evaluate(model, val_slices, bs * 2)
        record = EpochRecord(epoch, step, lr, mean_loss, val, time.perf_counter() - t0)
        report.records.append(record)
        if val.dsc > report.best_dsc:
            report.best_dsc, report.best_epoch = val.dsc, epoch
            if out_path:
                ckpt_io.save(out_path / "best.msmu", model, config)
        if log:
            log(f"epoch {epoch} steps {step} lr {lr:.3e} loss {mean_loss.total:.4f} val_dsc {val.dsc:.4f}")
    report.steps = step
    report.final_train_dsc = evaluate(model, train_slices, bs * 2).dsc
    if out_path:
        ckpt_io.save(out_path / "last.msmu", model, config)
        write_run_report(report, out_path)
    return model, report


def write_run_report(report: RunReport, out_dir: Path) -> None:
    from .data import atomic_write_bytes

    atomic_write_bytes(out_dir / "run_report.tsv", report.to_tsv().encode())
    atomic_write_bytes(out_dir / "summary.tsv", report.summary().encode())


def eval_report(ids: list[str], metrics: MetricReport) -> str:
    lines = ["id\tdsc\tprecision\trecall"]
    for sid, (d, p, r) in zip(ids, metrics.per_image):
        lines.append(f"{sid}\t{d:.6f}\t{p:.6f}\t{r:.6f}")
    lines.append(f"mean\t{metrics.dsc:.6f}\t{metrics.precision:.6f}\t{metrics.recall:.6f}")
    return "\n".join(lines) + "\n"


__all__ = [
    "AugmentConfig",
    "EpochRecord",
    "NumericError",
    "RunReport",
    "eval_report",
    "evaluate",
    "predict",
    "split_dataset",
    "train",
]
