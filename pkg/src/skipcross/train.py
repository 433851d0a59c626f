"""Training loop: cross-entropy, Adam, MaxF plateau schedule, and data augmentation."""
from __future__ import annotations

import contextlib
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, metrics, ops
from .model import SkipcrossNet

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "loss", "val_maxf", "lr", "seconds")


class NumericalError(FloatingPointError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4
    max_epochs: int = 100
    plateau_patience: int = 10
    min_improvement: float = 1e-4
    lr_decay: float = 0.1
    min_lr: float = 1e-6
    multiscale: bool = True
    crop: bool = True
    brightness: bool = True
    road_removal: bool = True
    crop_size: tuple = (48, 48)
    seed: int = 0

    def __post_init__(self):
        self.crop_size = tuple(int(v) for v in self.crop_size)
        self.validate()

    def validate(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 < self.lr_decay < 1:
            raise ValueError(f"lr_decay must lie in (0, 1), got {self.lr_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0 or self.plateau_patience < 1:
            raise ValueError("max_epochs must be >= 0 and plateau_patience >= 1")
        if self.min_lr < 0:
            raise ValueError("min_lr must be nonnegative")
        if len(self.crop_size) != 2 or any(v <= 0 or v % 16 for v in self.crop_size):
            raise ValueError(f"crop_size {self.crop_size} must be two positive multiples of 16")

    def without_augmentation(self, crop_size=None) -> "TrainConfig":
        kw = dict(self.__dict__, multiscale=False, crop=False, brightness=False, road_removal=False)
        if crop_size is not None:
            kw["crop_size"] = crop_size
        return TrainConfig(**kw)


# -- optimizer ------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / c1
            vhat = v / c2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# -- augmentation -----------------------------------------------------------------


def _resize_sample(s: data.Sample, h: int, w: int) -> data.Sample:
    if s.size == (h, w):
        return s
    rgb = data.resize_bilinear(s.rgb.transpose(1, 2, 0), h, w).transpose(2, 0, 1)
    adi = data.resize_bilinear(s.adi[0], h, w)[None]
    mask = data.resize_nearest(s.mask, h, w)
    return data.Sample(np.ascontiguousarray(rgb), np.ascontiguousarray(adi), mask, s.source)


def _road_rectangle(mask: np.ndarray, rng):
    """A rectangle covering 5-15% of the image that contains at least one road pixel, or None."""
    road = np.flatnonzero(mask.ravel())
    if road.size == 0:
        return None
    hh, ww = mask.shape
    area = rng.uniform(0.05, 0.15) * hh * ww
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    rh = int(np.clip(round(np.sqrt(area * aspect)), 1, hh))
    rw = int(np.clip(round(area / rh), 1, ww))
    py, px = divmod(int(road[rng.integers(road.size)]), ww)
    top = rng.integers(max(0, py - rh + 1), min(py, hh - rh) + 1)
    left = rng.integers(max(0, px - rw + 1), min(px, ww - rw) + 1)
    return int(top), int(left), rh, rw


def augment(sample: data.Sample, rng, config: TrainConfig) -> data.Sample:
    """Scale, crop, brightness, road removal (each behind its flag), ending at ``config.crop_size``."""
    ch, cw = config.crop_size
    s = sample
    if config.multiscale:
        f = rng.uniform(0.75, 1.25)
        s = _resize_sample(s, int(round(s.size[0] * f)), int(round(s.size[1] * f)))
    if config.crop:
        h, w = s.size
        if ch > h or cw > w:
            raise data.DataError(f"crop {ch}x{cw} larger than scaled image {h}x{w}")
        y = int(rng.integers(0, h - ch + 1))
        x = int(rng.integers(0, w - cw + 1))
        s = data.Sample(
            np.ascontiguousarray(s.rgb[:, y : y + ch, x : x + cw]),
            np.ascontiguousarray(s.adi[:, y : y + ch, x : x + cw]),
            np.ascontiguousarray(s.mask[y : y + ch, x : x + cw]),
            s.source,
        )
    else:
        s = _resize_sample(s, ch, cw)
    rgb = s.rgb
    if config.brightness:
        rgb = np.clip(rgb * np.float32(rng.uniform(0.6, 1.4)), 0.0, 1.0).astype(np.float32)
    if config.road_removal and rng.uniform() < 0.5:
        rect = _road_rectangle(s.mask, rng)
        if rect is not None:
            top, left, rh, rw = rect
            rgb = rgb.copy()
            rgb[:, top : top + rh, left : left + rw] = rgb.mean(axis=(1, 2), keepdims=True)
    # never hand back views of the caller's arrays
    return data.Sample(rgb.copy(), s.adi.copy(), s.mask.copy(), s.source)


# -- steps ------------------------------------------------------------------------


def train_step(net: SkipcrossNet, batch, optimizer: Adam) -> float:
    """One forward/backward/update on a (rgb, adi, mask) batch; returns the loss."""
    rgb, adi, mask = batch
    out = net(rgb, adi)
    loss = ops.softmax_cross_entropy(out.logits, mask)
    value = float(loss.item())
    if not np.isfinite(value):
        worst = max((float(np.abs(p.data).max()) for p in net.parameters()), default=0.0)
        raise NumericalError(
            f"non-finite loss {value} at optimizer step {optimizer.step_count + 1} "
            f"(lr={optimizer.lr:g}, max |param|={worst:.3g}, logits finite={bool(np.isfinite(out.logits.data).all())})"
        )
    if loss.node is not None:
        loss.backward()
        optimizer.step()
    net.zero_grad()
    return value


def validate_maxf(net: SkipcrossNet, samples, batch_size: int = 8):
    """(MaxF, pixel accuracy at 0.5) over a list of samples, counts pooled across images."""
    rgb, adi, mask = data.stack(samples)
    conf = net.predict(rgb, adi, batch_size=batch_size)
    report, _ = metrics.evaluate_dataset(conf, mask)
    return report.maxf, metrics.pixel_accuracy(conf, mask)


# -- fit ------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_maxf: float
    lr: float
    seconds: float
    val_acc: float = float("nan")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    best_maxf: float = float("-inf")
    best_state: dict | None = None

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            w.writerows(_row(r) for r in self.records)


def _row(r: EpochRecord) -> list:
    return [r.epoch, repr(r.loss), repr(r.val_maxf), repr(r.lr), f"{r.seconds:.3f}"]


def _check_samples(samples, what: str, step: int):
    if not samples:
        raise data.DataError(f"{what} set is empty")
    size = samples[0].size
    for s in samples:
        if s.rgb.shape[0] != 3 or s.adi.shape[0] != 1:
            raise data.DataError(f"{what} sample {s.source!r}: expected 3 rgb and 1 adi channel")
        if s.size[0] % step or s.size[1] % step:
            raise data.DataError(f"{what} sample {s.source!r}: size {s.size} not divisible by {step}")
        if what == "validation" and s.size != size:
            raise data.DataError(f"validation samples differ in size: {size} vs {s.size}")


def fit(
    net: SkipcrossNet,
    train_set,
    val_set,
    config: TrainConfig,
    history_path=None,
    restore_best: bool = True,
    callback=None,
) -> TrainHistory:
    """Train in place and return the :class:`TrainHistory`.

    Each epoch shuffles with a generator seeded from ``config.seed``, augments
    every sample, and runs minibatch steps. Validation MaxF drives the plateau
    schedule: after ``plateau_patience`` epochs without a gain above
    ``min_improvement`` the rate is multiplied by ``lr_decay`` (never below
    ``min_lr``). The best-MaxF weights are kept and, by default, restored.
    ``callback(record)`` runs after every epoch; returning True ends training.
    """
    config.validate()
    step = net.topology.downsample
    if config.crop_size[0] % step or config.crop_size[1] % step:
        raise data.DataError(f"crop_size {config.crop_size} not divisible by {step}")
    _check_samples(train_set, "training", 1)
    _check_samples(val_set, "validation", step)

    history = TrainHistory()
    if config.max_epochs == 0:
        return history
    rng = np.random.default_rng(config.seed)
    opt = Adam(net.parameters(), lr=config.lr)
    since_best = 0
    fh = open(history_path, "w", newline="") if history_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(HISTORY_COLUMNS)
    try:
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_set))
            losses = []
            for start in range(0, len(order), config.batch_size):
                batch = [augment(train_set[i], rng, config) for i in order[start : start + config.batch_size]]
                losses.append(train_step(net, data.stack(batch), opt))
            val_maxf, val_acc = validate_maxf(net, val_set)
            rec = EpochRecord(epoch, float(np.mean(losses)), float(val_maxf), float(opt.lr),
                              time.perf_counter() - t0, float(val_acc))
            history.records.append(rec)
            if writer:
                writer.writerow(_row(rec))
                fh.flush()
            log.info("epoch %d loss %.4f val_maxf %.4f acc %.4f lr %.2g", epoch, rec.loss, val_maxf, val_acc, opt.lr)

            if val_maxf > history.best_maxf + config.min_improvement:
                history.best_maxf = float(val_maxf)
                history.best_epoch = epoch
                history.best_state = net.state_dict()
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.plateau_patience:
                    opt.lr = max(opt.lr * config.lr_decay, config.min_lr)
                    since_best = 0
                    log.info("plateau: lr -> %.2g", opt.lr)
            if callback is not None and callback(rec):
                break
    finally:
        if fh:
            fh.close()
    if restore_best and history.best_state is not None:
        net.load_state_dict(history.best_state)
    return history


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@contextlib.contextmanager
def single_threaded():
    """Limit BLAS/OpenMP pools to one thread so float reductions run in a fixed order."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def history_path_for(out_dir) -> Path:
    return Path(out_dir) / "history.csv"
