"""Training and evaluation loops.

``train`` walks epoch-keyed shuffled batches, minimizes the hybrid
objective with Adam, and after every epoch re-evaluates both splits in eval
mode, appends one row to the metrics log, rewrites ``metrics.csv``
atomically, and checkpoints on the configured cadence (always at the end).
Everything is keyed off integers in ``TrainConfig``, so two runs with the
same config, data, and starting weights produce identical bytes.

Resuming is the same call with a restored model and optimizer: the number
of completed epochs is recovered from the optimizer step counter, and the
per-epoch shuffle depends only on (seed, epoch), so a resumed run walks the
exact batch sequence the uninterrupted run would have.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import save_checkpoint
from .dataio import batch_iter
from .metrics import format_value, hybrid_loss, mae, mse, psnr, ssim
from .optim import AdamState, adam_step, init_adam, zero_grads
from .tensor import Tape, backward


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 16
    lr: float = 1e-4
    lambda_ssim: float = 0.7
    shuffle_seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    out_dir: str = "run"


@dataclass
class SplitStats:
    psnr: float
    ssim: float
    mse: float
    mae: float
    hybrid: float

    def fields(self):
        return (self.psnr, self.ssim, self.mse, self.mae, self.hybrid)


class EpochLog:
    """Per-epoch metric rows, serialized as a fixed-header CSV.

    Rows are stored as their final strings so that a log loaded from disk
    and rewritten reproduces the file byte for byte.
    """

    HEADER = ("epoch,train_psnr,train_ssim,train_mse,train_mae,train_hybrid,"
              "val_psnr,val_ssim,val_mse,val_mae,val_hybrid")

    def __init__(self):
        self.rows: list[str] = []

    def last_epoch(self) -> int:
        return int(self.rows[-1].split(",", 1)[0]) if self.rows else 0

    def append(self, epoch: int, train_stats: SplitStats, val_stats: SplitStats) -> None:
        if epoch <= self.last_epoch():
            raise ValueError(f"epoch {epoch} already logged (last is {self.last_epoch()})")
        vals = list(train_stats.fields()) + list(val_stats.fields())
        self.rows.append(",".join([str(epoch)] + [format_value(v) for v in vals]))

    def write(self, path) -> None:
        tmp = str(path) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join([self.HEADER] + self.rows) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "EpochLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != cls.HEADER:
            raise ValueError(f"{path}: not a metrics log (unexpected header)")
        log = cls()
        log.rows = lines[1:]
        return log

    def series(self, column: str) -> list[float]:
        idx = self.HEADER.split(",").index(column)
        return [float(r.split(",")[idx]) for r in self.rows]


def evaluate(model, pairs, lambda_ssim: float = 0.7) -> SplitStats:
    """Eval-mode metrics averaged uniformly over pairs (one pair per pass).

    Each metric is computed per pair and then averaged, so e.g. the psnr
    column is the mean of per-pair psnr values, not the psnr of the mean
    error.
    """
    if not pairs:
        raise ValueError("cannot evaluate an empty pair list")
    model.set_training(False)
    totals = [0.0] * 5
    for x, y, _ in pairs:
        out = model.forward(x)
        m = mse(out, y).item()
        a = mae(out, y).item()
        s = ssim(out, y).item()
        vals = (psnr(m), s, m, a, m + lambda_ssim * (1.0 - s))
        totals = [t + v for t, v in zip(totals, vals)]
    n = len(pairs)
    return SplitStats(*(t / n for t in totals))


def train(model, train_pairs, val_pairs, cfg: TrainConfig,
          optimizer: AdamState | None = None) -> EpochLog:
    """Run (or resume) a full training job; returns the metric log."""
    if not train_pairs:
        raise ValueError("no training pairs")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    if optimizer is None:
        optimizer = init_adam(params, cfg.lr)
    else:
        optimizer.lr = cfg.lr  # checkpoints deliberately do not carry lr

    steps_per_epoch = math.ceil(len(train_pairs) / cfg.batch_size)
    if optimizer.step % steps_per_epoch:
        raise ValueError(
            f"optimizer step {optimizer.step} is not a multiple of {steps_per_epoch} "
            "steps per epoch; checkpoint was not taken at an epoch boundary")
    start_epoch = optimizer.step // steps_per_epoch

    csv_path = out_dir / "metrics.csv"
    log = EpochLog()
    if start_epoch and csv_path.exists():
        log = EpochLog.load(csv_path)
        log.rows = log.rows[:start_epoch]

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        model.set_training(True)
        for batch_index, (xs, ys) in enumerate(
                batch_iter(train_pairs, cfg.batch_size, cfg.shuffle_seed, epoch)):
            zero_grads(params)
            with Tape() as tape:
                loss = hybrid_loss(model.forward(xs), ys, lam=cfg.lambda_ssim)
                value = loss.item()
                if math.isnan(value) or math.isinf(value):
                    raise FloatingPointError(
                        f"loss became {value} at epoch {epoch}, batch {batch_index}")
                backward(loss, tape)
            adam_step(params, optimizer)
            tape.release()  # frees the step's graph without waiting on gc

        log.append(epoch,
                   evaluate(model, train_pairs, cfg.lambda_ssim),
                   evaluate(model, val_pairs, cfg.lambda_ssim))
        log.write(csv_path)
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"ckpt_epoch{epoch:04d}.dfnc", model, optimizer)

    save_checkpoint(out_dir / "ckpt_final.dfnc", model, optimizer)
    return log
