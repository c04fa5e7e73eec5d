"""Run configuration and the SGD training loop."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .netgraph import BackendConfig, ConfigError, save_model
from .ops import cross_entropy_loss, sgd_momentum_step
from .tensor import NonFiniteError, Rng, derive_seed
from .toydata import (FRONTEND_WIDTHS, LOW_TAP, IoUStats, SampleBatch, SegModel,
                      gen_shapes_dataset, hflip, train_val_split)

log = logging.getLogger(__name__)

_BACKEND_FIELDS = tuple(f.name for f in dataclasses.fields(BackendConfig))


class TrainingError(RuntimeError):
    pass


@dataclass
class RunConfig:
    # back-end (same keys as BackendConfig), toy-scale defaults
    num_classes: int = 4
    high_channels: int = FRONTEND_WIDTHS[-1]
    low_channels: int = FRONTEND_WIDTHS[LOW_TAP]
    aspp_rates: list = field(default_factory=lambda: [1, 2, 4])
    faspp1_channels: int = 64
    faspp2_channels: int = 32
    lowlevel_proj_channels: int = 16
    shuffle1_t: int = 8
    shuffle2_t: int = 8
    final_bilinear_t: int = 1
    high_stride: int = 32
    low_stride: int = 4
    sr_factor: int = 2
    variant: str = "cf_aspp_sr"
    # optimisation
    seed: int = 0
    epochs: int = 40
    batch_size: int = 16
    lr: float = 0.1
    lr_decay: float = 0.9
    lr_decay_every: int = 50
    momentum: float = 0.9
    # data
    data_seed: int = 7
    dataset_count: int = 320
    train_fraction: float = 0.8
    label_height: int = 128
    label_width: int = 128
    output_dir: str = "runs/default"

    def backend(self) -> BackendConfig:
        return BackendConfig(**{k: getattr(self, k) for k in _BACKEND_FIELDS}).validate()

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        for name, f in known.items():
            v = getattr(cfg, name)
            want = f.type if isinstance(f.type, str) else f.type.__name__
            ok = {"int": isinstance(v, int) and not isinstance(v, bool),
                  "float": isinstance(v, (int, float)) and not isinstance(v, bool),
                  "str": isinstance(v, str),
                  "list": isinstance(v, list)}[want]
            if not ok:
                raise ConfigError(f"config key {name!r} expects {want}, got {v!r}")
        cfg.lr, cfg.lr_decay, cfg.momentum, cfg.train_fraction = (
            float(cfg.lr), float(cfg.lr_decay), float(cfg.momentum), float(cfg.train_fraction))
        cfg.backend()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_json(f.read())


def make_datasets(cfg: RunConfig):
    data = gen_shapes_dataset(cfg.data_seed, cfg.dataset_count, cfg.label_height, cfg.label_width,
                              cfg.num_classes, cfg.sr_factor)
    tr, va = train_val_split(len(data), cfg.data_seed, cfg.train_fraction)
    return data.take(tr), data.take(va)


def evaluate(model: SegModel, batch: SampleBatch, num_classes: int, chunk: int = 16) -> IoUStats:
    stats = IoUStats(num_classes)
    for i in range(0, len(batch), chunk):
        sub = batch.take(range(i, min(i + chunk, len(batch))))
        stats.update(model.predict(sub.images), sub.labels)
    return stats


def _batches(n, size):
    starts = list(range(0, n, size))
    # BN needs more than one sample; fold a lone trailing sample into the previous batch
    if len(starts) > 1 and n - starts[-1] < 2:
        starts.pop()
    return [(s, starts[i + 1] if i + 1 < len(starts) else n) for i, s in enumerate(starts)]


def train_epoch(model, train: SampleBatch, cfg: RunConfig, epoch: int) -> float:
    order = Rng(derive_seed(cfg.seed, 1_000_000 + epoch)).permutation(len(train))
    coins = Rng(derive_seed(cfg.seed, 2_000_000 + epoch)).uniform(len(train)) < 0.5
    lr = cfg.lr_at(epoch)
    losses = []
    for s, e in _batches(len(train), cfg.batch_size):
        idx = order[s:e]
        batch = hflip(train.take(idx), coins[s:e])
        model.zero_grad()
        try:
            logits = model.forward(batch.images, "train")
        except NonFiniteError as exc:
            raise TrainingError(f"epoch {epoch}: {exc}") from None
        loss, grad = cross_entropy_loss(logits, batch.labels)
        if not np.isfinite(loss):
            raise TrainingError(f"epoch {epoch}: loss is {loss}")
        try:
            model.backward(grad)
        except NonFiniteError as exc:
            raise TrainingError(f"epoch {epoch}: backward {exc}") from None
        sgd_momentum_step(model.params(), lr, cfg.momentum)
        losses.append(loss)
    return float(np.mean(losses))


def prepare_output_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write-probe")
        with open(probe, "w") as f:
            f.write("ok")
        os.unlink(probe)
    except OSError as exc:
        raise OSError(f"output directory {path!r} is not writable: {exc}") from exc


def train(cfg: RunConfig, out_dir=None, data=None, evaluate_every: int = 1):
    """Train one model; writes model.bin, metrics.csv and report.json.

    Returns ``(report, model, history)``. ``data`` may carry a
    pre-generated (train, val) pair to skip regeneration. BLAS is pinned to
    one thread so results do not depend on the machine's core count.
    """
    with threadpool_limits(limits=1):
        return _train(cfg, out_dir, data, evaluate_every)


def _train(cfg, out_dir, data, evaluate_every):
    out_dir = out_dir or cfg.output_dir
    prepare_output_dir(out_dir)
    backend = cfg.backend()
    train_set, val_set = data if data is not None else make_datasets(cfg)
    model = SegModel(backend, seed=cfg.seed)

    history = []
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "lr", "loss", "val_miou"])
        for epoch in range(cfg.epochs):
            loss = train_epoch(model, train_set, cfg, epoch)
            last = epoch == cfg.epochs - 1
            val = ""
            if last or (evaluate_every and epoch % evaluate_every == 0):
                val = evaluate(model, val_set, cfg.num_classes).mean()
            history.append({"epoch": epoch, "lr": cfg.lr_at(epoch), "loss": loss, "val_miou": val})
            writer.writerow([epoch, repr(cfg.lr_at(epoch)), repr(loss), "" if val == "" else repr(val)])
            f.flush()
            log.info("epoch %d lr %.4g loss %.4f val mIoU %s", epoch, cfg.lr_at(epoch), loss, val)
            if (epoch + 1) % cfg.lr_decay_every == 0 and not last:
                save_model(model, os.path.join(out_dir, f"checkpoint_epoch{epoch + 1:04d}.bin"))

    save_model(model, os.path.join(out_dir, "model.bin"))
    final = evaluate(model, val_set, cfg.num_classes)
    report = {
        "variant": cfg.variant,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "final_loss": history[-1]["loss"] if history else None,
        "val_miou": final.mean(),
        "val_per_class_iou": final.per_class(),
        "num_params": sum(p.data.size for p in model.params()),
    }
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        f.write(cfg.to_json())
    return report, model, history
