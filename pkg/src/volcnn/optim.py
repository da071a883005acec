"""SGD-with-momentum training loop.

Each epoch: seeded shuffle, per-sample augmentation (Gaussian blur with
sigma ~ U[0, blur_hi], then a random crop at the model's input extent),
forward/backward/update, then a validation pass with deterministic
preprocessing (center crop, no blur). The checkpoint is overwritten iff
the validation loss strictly improves, and the best checkpoint's network
is returned.

Augmentation draws come from a substream indexed by a global sample
counter, so a run is reproducible sample-for-sample under its seed.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from . import model as network
from . import ops, tensor
from .data import (LeakageError, center_crop, gaussian_blur,
                   intensity_normalize, random_crop)
from .tensor import Rng, Tensor


class NumericError(RuntimeError):
    """The loss stopped being finite."""


LOG_HEADER = "epoch,train_loss,val_loss,val_bal_acc,seconds,checkpointed"


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int | None = None   # None: 4, or 16 for batch norm
    seed: int = 0
    checkpoint_path: str | None = None
    class_weights: tuple | None = None
    normalize: bool = True          # per-volume z-score before augmentation
    blur_hi: float = 1.5
    # wall time in the log breaks byte-level run reproducibility, so the
    # seconds column stays 0.000 unless explicitly requested
    timing: bool = False

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.learning_rate <= 0.0:
            raise ValueError(
                f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(
                f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(
                f"batch_size must be >= 1, got {self.batch_size}")
        if self.class_weights is not None:
            if len(self.class_weights) != 3 or min(self.class_weights) <= 0:
                raise ValueError("class_weights must be 3 positive values")
        if self.blur_hi < 0.0:
            raise ValueError(f"blur_hi must be >= 0, got {self.blur_hi}")


def resolve_batch_size(cfg: TrainConfig, model_config) -> int:
    """Explicit batch size, else 4 (16 for batch norm, which needs larger
    batches for usable statistics)."""
    bs = cfg.batch_size
    if bs is None:
        bs = 16 if model_config.norm == "batch" else 4
    if model_config.norm == "batch" and bs < 2:
        raise ValueError(f"batch norm needs batch_size >= 2, got {bs}")
    return bs


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_bal_acc: float
    seconds: float
    checkpointed: bool

    def csv_line(self) -> str:
        return (f"{self.epoch},{self.train_loss:.6f},{self.val_loss:.6f},"
                f"{self.val_bal_acc:.6f},{self.seconds:.3f},"
                f"{int(self.checkpointed)}")


@dataclass
class TrainLog:
    records: list

    def to_csv(self) -> str:
        lines = [LOG_HEADER] + [r.csv_line() for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float,
             momentum: float) -> tuple[dict, dict]:
    """Classical momentum: v <- momentum*v + g; p <- p - lr*v.

    Updates params and velocity in place (and returns them)."""
    if not (params.keys() == grads.keys() == velocity.keys()):
        extra = sorted(set(params) ^ set(grads) | set(params) ^ set(velocity))
        raise ValueError(f"parameter/gradient/velocity key mismatch: {extra}")
    for name, p in params.items():
        v = velocity[name].data
        v *= momentum
        v += grads[name].data
        p.data -= lr * v
    return params, velocity


def _check_splits(train_samples, val_samples):
    if not train_samples or not val_samples:
        raise ValueError("train and validation sets must both be non-empty")
    for s in list(train_samples) + list(val_samples):
        if s.split == "test":
            raise ValueError(
                f"test-split sample {s.subject_id!r} reached the training "
                f"loop; the test set is evaluation-only")
    overlap = ({s.subject_id for s in train_samples}
               & {s.subject_id for s in val_samples})
    if overlap:
        raise LeakageError(sorted(overlap))


def _batch_tensors(samples, crop: int, normalize: bool):
    """Deterministic eval preprocessing: optional z-score, center crop."""
    vols = []
    for s in samples:
        vol = s.volume.data[0]
        if normalize:
            vol = intensity_normalize(vol)
        vols.append(center_crop(vol, crop))
    return Tensor(np.stack(vols)[:, None].astype(np.float32))


def evaluate_samples(net, samples, batch_size: int,
                     normalize: bool = True) -> tuple[float, list]:
    """Mean cross-entropy and per-sample records in eval mode.

    Each sample's result is mathematically independent of how the set is
    chunked into batches; bitwise it varies at float32 rounding level
    because the BLAS kernels block differently per matrix shape."""
    if not samples:
        raise ValueError("nothing to evaluate")
    crop = net.config.crop_extent
    use_age = net.config.age_mode != "none"
    loss_sum = 0.0
    records = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x = _batch_tensors(chunk, crop, normalize)
        ages = [s.age for s in chunk] if use_age else None
        logits, _ = network.forward(net, x, ages=ages, mode="eval")
        labels = [s.label for s in chunk]
        loss, _, probs = ops.softmax_xent(logits, labels)
        if not np.isfinite(loss):
            raise NumericError("non-finite loss during evaluation")
        loss_sum += loss * len(chunk)
        for s, p in zip(chunk, probs.data):
            records.append(metrics.make_record(s.subject_id, s.label, p))
    return loss_sum / len(samples), records


def _clone_with(net, params, buffers):
    clone = network.build(net.config, Rng(0), dtype=net.dtype)
    for k, t in params.items():
        clone.params[k].data[...] = t.data
    for k, t in buffers.items():
        clone.buffers[k].data[...] = t.data
    return clone


def train(net, train_samples, val_samples, cfg: TrainConfig,
          echo: bool = True) -> tuple:
    """Returns (best network, TrainLog). The best network is the state at
    the epoch with the lowest validation loss: reloaded from the checkpoint
    when cfg.checkpoint_path is set, otherwise from an in-memory snapshot.
    """
    _check_splits(train_samples, val_samples)
    bs = resolve_batch_size(cfg, net.config)
    crop = net.config.crop_extent
    use_age = net.config.age_mode != "none"
    skip_small = net.config.norm == "batch"

    rng = Rng(cfg.seed)
    velocity = {k: tensor.zeros(t.shape, t.dtype)
                for k, t in net.params.items()}
    best_val = float("inf")
    best_state = None
    records = []
    counter = 0  # global sample counter indexing augmentation substreams
    n = len(train_samples)
    if echo:
        print(LOG_HEADER)

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.stream("shuffle", epoch).permutation(n)
        loss_sum = 0.0
        seen = 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if skip_small and len(idx) < 2:
                continue  # batch statistics undefined on a single sample
            vols = []
            labels = []
            ages = []
            for i in idx:
                s = train_samples[int(i)]
                aug = rng.stream("augment", counter)
                counter += 1
                vol = s.volume.data[0]
                if cfg.normalize:
                    vol = intensity_normalize(vol)
                vol = gaussian_blur(
                    vol, float(aug.uniform(lo=0.0, hi=cfg.blur_hi)))
                vols.append(random_crop(vol, crop, aug))
                labels.append(s.label)
                ages.append(s.age)
            x = Tensor(np.stack(vols)[:, None].astype(np.float32))
            logits, tape = network.forward(
                net, x, ages=ages if use_age else None, mode="train")
            wts = ([cfg.class_weights[l] for l in labels]
                   if cfg.class_weights else None)
            loss, grad, _ = ops.softmax_xent(logits, labels, wts)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, "
                    f"batch {start // bs + 1}")
            grads, _ = network.backward(net, tape, grad)
            sgd_step(net.params, grads, velocity, cfg.learning_rate,
                     cfg.momentum)
            net.note_update()
            loss_sum += loss * len(idx)
            seen += len(idx)
        if seen == 0:
            raise ValueError(
                f"every batch was skipped: {n} train samples at batch size "
                f"{bs} leave no batch of >= 2 for batch norm")
        train_loss = loss_sum / seen

        val_loss, val_recs = evaluate_samples(net, val_samples, bs,
                                              cfg.normalize)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # tiny val sets may miss a class
            bal = metrics.balanced_accuracy([r.pred for r in val_recs],
                                            [r.label for r in val_recs])
        improved = val_loss < best_val
        if improved:
            best_val = val_loss
            if cfg.checkpoint_path is not None:
                network.save_checkpoint(cfg.checkpoint_path, net,
                                        extra={"val_loss": repr(val_loss)},
                                        velocity=velocity)
            else:
                best_state = ({k: t.copy() for k, t in net.params.items()},
                              {k: t.copy() for k, t in net.buffers.items()})
        seconds = time.perf_counter() - t0 if cfg.timing else 0.0
        rec = EpochRecord(epoch, train_loss, val_loss, float(bal), seconds,
                          improved)
        records.append(rec)
        if echo:
            print(rec.csv_line())

    if cfg.checkpoint_path is not None:
        best, _, _ = network.load_checkpoint(cfg.checkpoint_path)
    else:
        best = _clone_with(net, *best_state)
    return best, TrainLog(records)
