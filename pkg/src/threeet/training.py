"""MSE regression training with plain SGD and full-clip BPTT."""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .events import Dataset, slice_clips
from .metrics import detection_rates, to_csv
from .model import Model, to_normalized, to_pixels

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["epoch", "train_loss", "val_loss", "p3", "p5", "p10", "seconds"]


def sub_seed(seed, name):
    """Independent, reproducible seed for one named consumer of randomness."""
    return [int(seed), zlib.crc32(name.encode())]


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 30
    batch_size: int = 16
    seq_len: int = 40
    split: float = 0.8
    theta: float = 0.0
    seed: int = 0
    stride: int = 1
    clips_per_epoch: int | None = None
    eval_batch: int = 16
    validate: bool = True

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 0:
            raise ValueError("lr and epochs must be non-negative")
        if self.batch_size < 1 or self.seq_len < 1 or self.stride < 1:
            raise ValueError("batch_size, seq_len and stride must be >= 1")
        if not 0 < self.split < 1:
            raise ValueError("split must lie in (0, 1)")
        if self.theta < 0:
            raise ValueError("theta must be non-negative")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    aborted: str | None = None

    def to_csv(self, with_timing=True):
        cols = REPORT_COLUMNS if with_timing else REPORT_COLUMNS[:-1]
        return to_csv(self.epochs, cols)


def mse_loss(predictions, labels):
    """Mean squared error over every element and its gradient."""
    pred = np.asarray(predictions)
    diff = pred - np.asarray(labels, dtype=pred.dtype)
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype, copy=False)


def sgd_step(params: dict, grads: dict, lr):
    """In-place ``w -= lr * g``; refuses non-finite gradients."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    for name, g in grads.items():
        params[name] -= np.asarray(lr * g, dtype=params[name].dtype)
    return params


@dataclass
class StreamSplit:
    frames: np.ndarray  # [N, H, W] float
    labels: np.ndarray  # [N, 2] pixels
    train_end: int  # frames [0, train_end) train, [train_end, N) validation

    @property
    def val_range(self):
        return self.train_end, len(self.frames)


def split_stream(num_frames, split):
    """Contiguous temporal split: the first ``split`` fraction trains."""
    return int(np.floor(num_frames * split))


def prepare_streams(datasets, split, dtype=np.float32):
    out = []
    for ds in datasets:
        frames = ds.frames().astype(dtype) if isinstance(ds, Dataset) else np.asarray(ds[0], dtype)
        labels = ds.labels if isinstance(ds, Dataset) else np.asarray(ds[1], np.float64)
        out.append(StreamSplit(frames, labels, split_stream(len(frames), split)))
    return out


def training_clips(streams, seq_len, stride):
    """``(stream_index, start)`` for every training clip; clips never touch validation frames."""
    clips = []
    for si, s in enumerate(streams):
        n = s.train_end
        for sample in slice_clips(np.arange(n), np.arange(n), seq_len, stride):
            clips.append((si, sample.start))
    return clips


def clip_loss_and_grads(model: Model, frames, labels_norm, theta_model=None):
    m = theta_model or model
    preds, cache = m.forward(frames, "train", keep_cache=True)
    loss, g = mse_loss(preds, labels_norm)
    grads = m.backward(cache, g)
    return loss, grads


def predict_frames(model: Model, frames, seq_len, batch=16, counter=None, trace=None):
    """Evaluate consecutive non-overlapping chunks of ``seq_len`` frames.

    Every frame is predicted exactly once; state is reset at each chunk.
    Returns pixel predictions ``[N, 2]``.
    """
    n = len(frames)
    out = np.empty((n, 2), dtype=np.float64)
    starts = list(range(0, n, seq_len))
    full = [s for s in starts if s + seq_len <= n]
    for i in range(0, len(full), batch):
        group = full[i : i + batch]
        x = np.stack([frames[s : s + seq_len] for s in group])
        p, _ = model.forward(x, "eval", counter, trace)
        for k, s in enumerate(group):
            out[s : s + seq_len] = to_pixels(p[k], model.config)
    tail = [s for s in starts if s + seq_len > n]
    for s in tail:
        p, _ = model.forward(frames[s:][None], "eval", counter, trace)
        out[s:] = to_pixels(p[0], model.config)
    return out


def evaluate_streams(model, streams, seq_len, region="val", batch=16, counter=None, trace=None):
    preds, labels = [], []
    for s in streams:
        lo, hi = s.val_range if region == "val" else (0, s.train_end)
        if hi <= lo:
            continue
        preds.append(predict_frames(model, s.frames[lo:hi], seq_len, batch, counter, trace))
        labels.append(s.labels[lo:hi])
    if not preds:
        raise ValueError(f"no frames in the {region} region")
    return np.concatenate(preds), np.concatenate(labels)


def _bn_snapshot(model):
    return [(s.running_mean.copy(), s.running_var.copy()) for s in model.bn_stats]


def _bn_restore(model, saved):
    for s, (m, v) in zip(model.bn_stats, saved):
        s.running_mean[...] = m
        s.running_var[...] = v


def train(model: Model, datasets, config: TrainConfig, progress=None):
    """Train ``model`` in place.  Returns ``(model, TrainReport)``."""
    streams = prepare_streams(datasets, config.split, model.config.np_dtype)
    clips = training_clips(streams, config.seq_len, config.stride)
    if not clips:
        raise ValueError("dataset yields no training clips")
    rng = np.random.default_rng(sub_seed(config.seed, "shuffle"))
    train_model = model.with_cell(theta=config.theta)
    report = TrainReport()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(clips))
        if config.clips_per_epoch is not None:
            order = order[: config.clips_per_epoch]
        losses = []
        for b in range(0, len(order), config.batch_size):
            idx = order[b : b + config.batch_size]
            x = np.stack([streams[clips[i][0]].frames[clips[i][1] : clips[i][1] + config.seq_len] for i in idx])
            y = np.stack([
                to_normalized(streams[clips[i][0]].labels[clips[i][1] : clips[i][1] + config.seq_len], model.config)
                for i in idx
            ])
            try:
                saved = _bn_snapshot(model) if config.lr == 0 else None
                loss, grads = clip_loss_and_grads(train_model, x, y)
                sgd_step(model.params, grads, config.lr)
                if saved is not None:
                    # a frozen model keeps its running statistics as well
                    _bn_restore(model, saved)
            except NumericalError as exc:
                report.aborted = f"epoch {epoch}: {exc}"
                log.error("NaN guard tripped: %s", exc)
                raise
            losses.append(loss * len(idx))
        row = {"epoch": epoch, "train_loss": float(np.sum(losses) / len(order))}
        if config.validate:
            preds, labels = evaluate_streams(model, streams, config.seq_len, "val", config.eval_batch)
            row["val_loss"] = float(np.mean((to_normalized(preds, model.config) - to_normalized(labels, model.config)) ** 2))
            row.update(detection_rates(preds, labels))
        row["seconds"] = time.perf_counter() - t0
        report.epochs.append(row)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
        if progress is not None:
            progress(row)
    return model, report


# ---------------------------------------------------------------------------
# gradient checking


def numeric_gradient(f, x, eps=1e-5, indices=None):
    """Central differences of scalar ``f()`` w.r.t. the array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    it = range(flat.size) if indices is None else indices
    for i in it:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        grad.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)


def gradient_check(model: Model, frames, labels_norm, eps=1e-5):
    """Max relative error between BPTT gradients and central differences, per tensor.

    The model should be float64.  BN runs in train mode; running statistics
    are restored afterwards.
    """
    saved = _bn_snapshot(model)

    def loss():
        p, _ = model.forward(frames, "train")
        return mse_loss(p, labels_norm)[0]

    _, analytic = clip_loss_and_grads(model, frames, labels_norm)
    errors = {}
    for name, value in model.params.items():
        num = numeric_gradient(loss, value, eps)
        errors[name] = float(relative_error(analytic[name], num).max())
    _bn_restore(model, saved)
    return errors
