"""Training loop, evaluation and metric reporting."""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import metrics
from .data import NUM_LABELS, SplitMix64, list_cases, load_case, random_crop
from .network import (Checkpoint, Model, ModelConfig, build_model, cross_entropy_loss,
                      save_checkpoint)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-2
    weight_decay: float = 1e-5
    momentum: float = 0.0
    nesterov: bool = False
    clip_norm: float | None = None
    batch_size: int = 1
    steps: int = 200
    crop_size: tuple | None = None  # None trains on whole volumes
    seed: int = 0
    dataset_dir: str = "data/train"
    checkpoint_dir: str = "checkpoints"
    checkpoint_every: int = 0  # 0 writes only the final checkpoint

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("weight_decay must be >= 0 and momentum in [0, 1)")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if self.crop_size is not None and len(self.crop_size) != 3:
            raise ValueError(f"crop_size needs three extents, got {self.crop_size}")
        self.model.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        if d.get("crop_size") is not None:
            d["crop_size"] = tuple(int(n) for n in d["crop_size"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# optimizer

class Sgd:
    """SGD with weight decay folded into the gradient: θ ← θ − lr·(g + wd·θ).

    With ``momentum`` > 0 the step uses a velocity v ← μv + (g + wd·θ)
    (Nesterov look-ahead optional); momentum 0 is plain SGD.  ``clip_norm``
    rescales the raw gradients so their global L2 norm is at most that value.
    """

    def __init__(self, lr: float, weight_decay: float = 0.0, momentum: float = 0.0,
                 nesterov: bool = False, clip_norm: float | None = None):
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.nesterov = nesterov
        self.clip_norm = clip_norm
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> float:
        """Update ``params`` in place; returns the global gradient norm before clipping."""
        names = sorted(grads)
        norm = float(np.sqrt(sum(float(np.sum(grads[n] * grads[n])) for n in names)))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for name in names:
            g = grads[name] * scale + self.weight_decay * params[name]
            if self.momentum:
                v = self.momentum * self.velocity.get(name, 0.0) + g
                self.velocity[name] = v
                g = g + self.momentum * v if self.nesterov else v
            params[name] = params[name] - self.lr * g
        return norm


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    losses: list
    checkpoint_paths: list


def _first_nonfinite(params: dict, grads: dict) -> str:
    # a corrupted parameter poisons every gradient, so report parameters first
    for name in params:
        if not np.all(np.isfinite(params[name])):
            return name
    for name in params:
        if name in grads and not np.all(np.isfinite(grads[name])):
            return name
    return "<none: the loss itself overflowed>"


def log_line(step: int, loss: float, ms: float) -> str:
    return f"step={step} loss={loss:.10g} ms={ms:.1f}"


def _batch(cases, cfg: TrainConfig, step: int):
    """Deterministic (case, crop) choices for one step."""
    rng = SplitMix64(cfg.seed * 1_000_003 + step)
    items = []
    for _ in range(cfg.batch_size):
        case = cases[rng.below(len(cases))]
        if cfg.crop_size is not None:
            case = random_crop(case, cfg.crop_size, rng.next())
        items.append(case)
    return items


def load_dataset(directory) -> list:
    ids = list_cases(directory)
    if not ids:
        raise FileNotFoundError(f"no cases found in {directory}")
    return [load_case(directory, i) for i in ids]


def train(cfg: TrainConfig, cases: list | None = None, emit=None,
          write_checkpoints: bool = True) -> TrainResult:
    """Train a fresh model; ``cases`` overrides loading from ``cfg.dataset_dir``.

    ``emit`` receives every log line (default: discard).  Gradients of the
    items in a batch are summed in batch order and divided by the batch size.
    """
    cfg.validate()
    cases = load_dataset(cfg.dataset_dir) if cases is None else list(cases)
    model = build_model(cfg.model, cfg.seed)
    opt = Sgd(cfg.lr, cfg.weight_decay, cfg.momentum, cfg.nesterov, cfg.clip_norm)
    ckpt_dir = Path(cfg.checkpoint_dir)
    log, losses, paths = [], [], []

    def checkpoint(step, name):
        ckpt = Checkpoint.from_model(model, step=step, seed=cfg.seed)
        if write_checkpoints:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            path = ckpt_dir / name
            save_checkpoint(ckpt, path)
            paths.append(path)
        return ckpt

    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        total_loss = 0.0
        grads: dict[str, np.ndarray] = {}
        for item in _batch(cases, cfg, step):
            tape, logits = model.trace(item.image)
            loss = cross_entropy_loss(logits, item.labels)
            total_loss += float(loss.value)
            for name, g in dc.backward(tape, np.ones(()), output=loss).items():
                grads[name] = grads[name] + g if name in grads else g
        mean_loss = total_loss / cfg.batch_size
        if not np.isfinite(mean_loss):
            raise TrainingError(f"non-finite loss {mean_loss} at step {step}; first non-finite "
                                f"parameter: {_first_nonfinite(model.params, grads)}")
        for name in grads:
            grads[name] = grads[name] / cfg.batch_size
        opt.step(model.params, grads)
        ms = (time.perf_counter() - t0) * 1e3
        line = log_line(step, mean_loss, ms)
        log.append(line)
        losses.append(mean_loss)
        if emit:
            emit(line)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step != cfg.steps:
            checkpoint(step, f"step{step:06d}.ssfc")
    final = checkpoint(cfg.steps, "final.ssfc")
    return TrainResult(final, log, losses, paths)


def strip_timing(log_lines) -> list:
    """Log lines without the wall-clock field (which never repeats bitwise)."""
    return [line.rsplit(" ms=", 1)[0] for line in log_lines]


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class MetricsReport:
    cases: dict  # case id -> {region: (dice, hd95)}
    seconds: float
    config: dict

    @property
    def mean(self) -> dict:
        out = {}
        for region in metrics.REGIONS:
            vals = np.array([self.cases[c][region] for c in self.cases])
            out[region] = (float(vals[:, 0].mean()), float(vals[:, 1].mean()))
        return out

    def table(self) -> str:
        regions = list(metrics.REGIONS)
        head = ["case"] + [f"{r} {m}" for r in regions for m in ("Dice", "HD95")]
        rows = [[cid] + [f"{v:.4f}" for r in regions for v in self.cases[cid][r]]
                for cid in self.cases]
        rows.append(["mean"] + [f"{v:.4f}" for r in regions for v in self.mean[r]])
        widths = [max(len(row[i]) for row in [head] + rows) for i in range(len(head))]
        fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                    for i, (c, w) in enumerate(zip(row, widths)))
        return "\n".join([fmt(head)] + [fmt(r) for r in rows])

    def lines(self) -> list:
        out = []
        for cid, per in self.cases.items():
            for region, (d, h) in per.items():
                out.append(f"case={cid} region={region} dice={d!r} hd95={h!r}")
        for region, (d, h) in self.mean.items():
            out.append(f"mean region={region} dice={d!r} hd95={h!r}")
        out.append(f"seconds={self.seconds:.3f}")
        return out


def predict(model: Model, image) -> np.ndarray:
    if image.shape[0] != model.config.in_channels:
        raise ValueError(f"checkpoint expects {model.config.in_channels} channels, "
                         f"volume has {image.shape[0]}")
    return np.argmax(model.forward(image), axis=0)


def score_labels(pred_labels, gt_labels) -> dict:
    """{region: (dice, hd95)} for a predicted label map against ground truth."""
    pred = metrics.compose_regions(pred_labels)
    gt = metrics.compose_regions(gt_labels)
    return {r: (metrics.dice(pred[r], gt[r]), metrics.hd95(pred[r], gt[r])) for r in metrics.REGIONS}


def evaluate(ckpt: Checkpoint, data) -> MetricsReport:
    """Score ``ckpt`` on a dataset directory or a list of cases."""
    t0 = time.perf_counter()
    cases = load_dataset(data) if isinstance(data, (str, Path)) else list(data)
    model = ckpt.to_model()
    if ckpt.config.num_classes != NUM_LABELS:
        raise ValueError(f"checkpoint predicts {ckpt.config.num_classes} classes, "
                         f"region scoring needs {NUM_LABELS}")
    per_case = {}
    for case in cases:
        per_case[case.case_id] = score_labels(predict(model, case.image), case.labels)
    return MetricsReport(per_case, time.perf_counter() - t0, dataclasses.asdict(ckpt.config))
