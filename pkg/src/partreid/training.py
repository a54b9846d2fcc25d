"""Mini-batch SGD with momentum, memory writes and checkpointing."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dataio import read_sections, write_sections
from .losses import (
    BatchFeatures,
    LossConfig,
    batch_triplet_loss,
    combined_loss,
    memory_softmax_loss,
    triplet_center_loss,
)
from .memory import MemoryBank
from .model import ModelConfig, PartAwareModel

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "iteration", "lr", "tcl", "softmax", "combined", "skipped_terms")
CHECKPOINT_NAME = "checkpoint.pamf"


def default_schedule(epochs, high=0.05, low=0.005):
    """Two-step schedule: ``high`` for the first two thirds, then ``low``.

    For 60 epochs this is 0.05 on epochs 1-40 and 0.005 on 41-60.
    """
    if epochs <= 0:
        return ()
    cut = max(1, round(epochs * 2 / 3))
    if cut >= epochs:
        return ((1, epochs, high),)
    return ((1, cut, high), (cut + 1, epochs, low))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr_schedule: tuple = None
    momentum: float = 0.9
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    delta: float = 0.5
    memory: bool = True
    loss_kind: str = "tc"  # "tc" (triplet-center) or "triplet" (in-batch)
    memory_source: str = "head"  # store head features f or pooled features h
    warm_start: bool = True  # fill the bank with a no-grad pass before epoch 1
    keep_checkpoints: bool = False

    def __post_init__(self):
        if self.lr_schedule is None:
            object.__setattr__(self, "lr_schedule", default_schedule(self.epochs))
        sched = tuple(tuple(s) for s in self.lr_schedule)
        object.__setattr__(self, "lr_schedule", sched)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        expect = 1
        for lo, hi, rate in sched:
            if lo != expect or hi < lo or rate <= 0:
                raise ValueError(f"learning-rate schedule {sched} does not tile [1, {self.epochs}]")
            expect = hi + 1
        if self.epochs and expect != self.epochs + 1:
            raise ValueError(f"learning-rate schedule {sched} does not tile [1, {self.epochs}]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if self.loss_kind not in ("tc", "triplet"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.loss_kind == "tc" and not self.memory:
            raise ValueError("the triplet-center loss takes its centers from memory; enable memory")
        if self.memory_source not in ("head", "pooled"):
            raise ValueError(f"unknown memory source {self.memory_source!r}")

    def lr_at(self, epoch):
        for lo, hi, rate in self.lr_schedule:
            if lo <= epoch <= hi:
                return rate
        raise ValueError(f"epoch {epoch} outside schedule {self.lr_schedule}")

    def to_dict(self):
        d = asdict(self)
        d["lr_schedule"] = [list(s) for s in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["loss"] = LossConfig(**d["loss"])
        d["lr_schedule"] = tuple(tuple(s) for s in d["lr_schedule"])
        return cls(**d)


@dataclass
class TrainState:
    params: dict
    velocity: dict
    bank: MemoryBank | None
    epoch: int = 0
    iteration: int = 0
    log: list = field(default_factory=list)


def sgd_step(params, grads, velocity, lr, momentum):
    """Classical momentum: ``v = mu*v + g``, ``p = p - lr*v``.

    Returns new ``(params, velocity)`` dicts, or ``None`` when any gradient
    is non-finite (nothing is changed in that case).
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, expected {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            return None
    new_p, new_v = dict(params), dict(velocity)
    for name, g in grads.items():
        v = momentum * velocity[name] + g
        new_v[name] = v
        new_p[name] = params[name] - lr * v
    return new_p, new_v


def init_state(model, config, train_labels, x=None):
    """Fresh parameters, zero velocity and an empty bank.

    When ``x`` is given and ``config.warm_start`` is set, every slot is
    written once with the initial network's features.
    """
    rng = np.random.default_rng(config.seed)
    params = model.init_params(rng)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    bank = None
    if config.memory:
        bank = MemoryBank(np.asarray(train_labels), model.config.num_parts, model.config.channels, config.delta)
        if x is not None and config.warm_start:
            warm_fill(bank, model, params, x, config)
    return TrainState(params, velocity, bank)


def warm_fill(bank, model, params, x, config, batch_size=256):
    for lo in range(0, len(x), batch_size):
        h, f = model.forward(params, x[lo : lo + batch_size])
        written = f if config.memory_source == "head" else h
        bank.update_many(np.arange(lo, lo + written.shape[0]), written.values)


def _loss_terms(model, config, state, xb, labels, idx):
    """Forward pass and loss for one batch; returns tensors and stats."""
    leaves = {k: ad.Tensor(v, requires_grad=True) for k, v in state.params.items()}
    h, f = model.forward(leaves, xb)
    batch = BatchFeatures(f, labels, idx)
    n, b = f.shape[0], f.shape[1]
    lc = config.loss
    skipped = 0
    zero = ad.Tensor(0.0)
    metric, sm = zero, zero
    centers = None

    if config.loss_kind == "triplet":
        metric = batch_triplet_loss(batch, lc.alpha).value
    else:
        centers = state.bank.class_centers()
        have = centers.index_of(labels) >= 0
        if len(np.unique(labels)) < 2 or len(centers) < 2 or not have.any():
            skipped += n * b
        else:
            rows = np.nonzero(have)[0]
            sub = BatchFeatures(ad.take(f, rows), labels[rows], idx[rows]) if len(rows) < n else batch
            metric = triplet_center_loss(sub, centers, lc.alpha).value
            skipped += (n - len(rows)) * b

    if config.memory:
        res = memory_softmax_loss(batch, state.bank, lc.beta, lc.softmax_target, centers)
        sm, skipped = res.value, skipped + res.skipped

    total = combined_loss(metric, sm, lc.lam)
    return leaves, h, f, metric, sm, total, skipped


def train_epoch(state, model, x, y, config):
    """One shuffled pass over the training set; mutates and returns ``state``."""
    epoch = state.epoch + 1
    lr = config.lr_at(epoch)
    y = np.asarray(y)
    order = np.random.default_rng([config.seed, epoch]).permutation(len(x))
    for lo in range(0, len(order), config.batch_size):
        idx = np.sort(order[lo : lo + config.batch_size])
        labels = y[idx]
        with ad.Tape() as tape:
            leaves, h, f, metric, sm, total, skipped = _loss_terms(model, config, state, x[idx], labels, idx)
        grads = tape.backward(total)
        gdict = {name: grads.get(t, np.zeros_like(state.params[name])) for name, t in leaves.items()}
        state.iteration += 1
        row = {
            "epoch": epoch,
            "iteration": state.iteration,
            "lr": lr,
            "tcl": float(metric.values),
            "softmax": float(sm.values),
            "combined": float(total.values),
            "skipped_terms": skipped,
        }
        stepped = sgd_step(state.params, gdict, state.velocity, lr, config.momentum)
        if stepped is None or not math.isfinite(row["combined"]):
            log.warning("non-finite gradient at iteration %d; step skipped", state.iteration)
            row["skipped_terms"] = skipped + len(idx) * f.shape[1]
            state.log.append(row)
            continue
        state.params, state.velocity = stepped
        if state.bank is not None:
            written = f if config.memory_source == "head" else h
            state.bank.update_many(idx, written.values)
        state.log.append(row)
    state.epoch = epoch
    return state


# ------------------------------------------------------------ checkpoints


def _log_to_csv(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def _log_from_csv(text):
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({
            "epoch": int(r["epoch"]),
            "iteration": int(r["iteration"]),
            "lr": float(r["lr"]),
            "tcl": float(r["tcl"]),
            "softmax": float(r["softmax"]),
            "combined": float(r["combined"]),
            "skipped_terms": int(r["skipped_terms"]),
        })
    return rows


def save_checkpoint(path, state, model_config, train_config):
    sections = {
        "config": json.dumps({"model": model_config.to_dict(), "train": train_config.to_dict()}, sort_keys=True),
        "epoch": np.array([state.epoch, state.iteration], dtype=np.float64),
    }
    for name in sorted(state.params):
        sections[f"params/{name}"] = state.params[name]
        sections[f"velocity/{name}"] = state.velocity[name]
    if state.bank is not None:
        bank = state.bank
        sections["bank/V"] = bank.V
        sections["bank/initialized"] = bank.initialized.astype(np.float64)
        sections["bank/ids"] = json.dumps(bank.ids.tolist())
        sections["bank/meta"] = np.array([bank.delta, float(bank.normalize)])
    sections["log"] = _log_to_csv(state.log)
    write_sections(path, sections)


def load_checkpoint(path):
    """Return ``(state, model_config, train_config)``."""
    s = read_sections(path)
    cfg = json.loads(s["config"])
    model_config = ModelConfig(**cfg["model"])
    train_config = TrainConfig.from_dict(cfg["train"])
    params = {k.split("/", 1)[1]: v for k, v in s.items() if k.startswith("params/")}
    velocity = {k.split("/", 1)[1]: v for k, v in s.items() if k.startswith("velocity/")}
    bank = None
    if "bank/V" in s:
        delta, normalize = s["bank/meta"]
        ids = np.asarray(json.loads(s["bank/ids"]))
        bank = MemoryBank(ids, s["bank/V"].shape[1], s["bank/V"].shape[2], float(delta), bool(normalize))
        bank.V = s["bank/V"].copy()
        bank.initialized = s["bank/initialized"] > 0.5
    epoch, iteration = (int(v) for v in s["epoch"])
    state = TrainState(params, velocity, bank, epoch, iteration, _log_from_csv(s["log"]))
    return state, model_config, train_config


def write_log(path, rows):
    Path(path).write_text(_log_to_csv(rows))


def train(model_config, train_config, x, y, out_dir=None, resume=False, callback=None):
    """Run the full schedule, checkpointing at every epoch boundary.

    With ``resume`` the latest checkpoint in ``out_dir`` is loaded and only
    the remaining epochs are run.
    """
    model = PartAwareModel(model_config)
    x = np.asarray(x, dtype=np.float64)
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / CHECKPOINT_NAME if out is not None else None

    if resume and ckpt is not None and ckpt.exists():
        state, saved_model, saved_train = load_checkpoint(ckpt)
        if saved_model != model_config:
            raise ValueError("checkpoint model configuration differs from the requested one")
        if replace(saved_train, epochs=train_config.epochs, lr_schedule=train_config.lr_schedule) != train_config:
            raise ValueError("checkpoint training configuration differs from the requested one")
        log.info("resuming from epoch %d", state.epoch)
    else:
        state = init_state(model, train_config, y, x)
        if ckpt is not None:
            save_checkpoint(ckpt, state, model_config, train_config)

    while state.epoch < train_config.epochs:
        train_epoch(state, model, x, y, train_config)
        if ckpt is not None:
            save_checkpoint(ckpt, state, model_config, train_config)
            if train_config.keep_checkpoints:
                save_checkpoint(out / f"checkpoint_epoch{state.epoch:03d}.pamf", state, model_config, train_config)
        if callback is not None:
            callback(state)
    if out is not None:
        write_log(out / "iterations.csv", state.log)
    return state
