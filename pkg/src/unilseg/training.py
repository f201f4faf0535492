"""Two-stage schedule, optimisation loop, evaluation, inference and
checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import Task, Triplet
from .decoder import THRESHOLD
from .losses import LossValue, hide_and_seek, segmentation_loss
from .metrics import MetricReport, f_measure, iou, j_and_f, miou, oiou
from .model import ModelConfig, UniLSeg

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: int = 2
    learning_rate: float = 1e-4
    epochs: int = 15
    decay_epoch: int | None = 10
    decay_factor: float = 0.1
    backbone_lr_factor: float = 0.1
    batch_size: int = 4
    seed: int = 0
    w_bce: float = 1.0
    w_dice: float = 1.0
    hide_prob: float = 0.2
    hide_patch: int = 16
    pseudo_ratio: float = 1.0
    max_steps: int | None = None
    data: str = "pseudo+supervised"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay factor must lie in (0, 1]")
        if not 0 < self.backbone_lr_factor <= 1:
            raise ValueError("backbone_lr_factor must lie in (0, 1]")
        if self.stage not in (1, 2):
            raise ValueError(f"unknown stage {self.stage}")

    @property
    def lr_decay(self) -> dict | None:
        if self.decay_epoch is None:
            return None
        return {"epoch": self.decay_epoch, "factor": self.decay_factor}

    def lr_at(self, epoch: int) -> float:
        """Head learning rate for a 0-based epoch."""
        if self.decay_epoch is not None and epoch >= self.decay_epoch:
            return self.learning_rate * self.decay_factor
        return self.learning_rate

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def make_schedule(stage: int) -> TrainConfig:
    """Stage 1: pseudo data only, lr 5e-5 for 5 epochs. Stage 2: supervised
    plus remaining pseudo data, lr 1e-4 for 15 epochs, x0.1 after epoch 10.
    The visual backbone runs at 0.1x the head rate in both."""
    if stage == 1:
        return TrainConfig(stage=1, learning_rate=5e-5, epochs=5, decay_epoch=None,
                           backbone_lr_factor=0.1, data="pseudo")
    if stage == 2:
        return TrainConfig(stage=2, learning_rate=1e-4, epochs=15, decay_epoch=10, decay_factor=0.1,
                           backbone_lr_factor=0.1, data="pseudo+supervised")
    raise ValueError(f"unknown training stage {stage!r}; expected 1 or 2")


def make_optimizer(model: UniLSeg, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        [
            {"params": model.head_parameters(), "lr": config.learning_rate, "lr_scale": 1.0, "name": "head"},
            {"params": model.backbone_parameters(), "lr": config.learning_rate * config.backbone_lr_factor,
             "lr_scale": config.backbone_lr_factor, "name": "backbone"},
        ]
    )


def set_epoch_lr(optimizer: torch.optim.Optimizer, config: TrainConfig, epoch: int) -> None:
    base = config.lr_at(epoch)
    for group in optimizer.param_groups:
        group["lr"] = base * group["lr_scale"]


def dataset_mean(triplets: Sequence[Triplet]) -> np.ndarray:
    if not triplets:
        return np.zeros(3)
    return np.mean([t.image.reshape(-1, 3).mean(0) for t in triplets], axis=0)


def collate(model: UniLSeg, batch: Sequence[Triplet], config: TrainConfig | None = None,
            rng: np.random.Generator | None = None, fill: np.ndarray | None = None):
    """Stack a batch into tensors, hiding patches of pseudo-labelled images."""
    dtype = next(model.parameters()).dtype
    images = []
    for t in batch:
        img = t.image
        if config is not None and rng is not None and t.source.is_pseudo and config.hide_prob > 0:
            grid = img.shape[0] // config.hide_patch
            img = hide_and_seek(img, grid, config.hide_prob, rng, fill)
        images.append(img)
    x = torch.as_tensor(np.stack(images), dtype=dtype)
    y = torch.as_tensor(np.stack([t.mask for t in batch]), dtype=dtype)
    return x, model.tokenize([t.caption for t in batch]), y


def train_step(model: UniLSeg, optimizer: torch.optim.Optimizer, batch: Sequence[Triplet],
               config: TrainConfig, rng: np.random.Generator | None = None,
               fill: np.ndarray | None = None) -> LossValue:
    """One forward/backward/update on ``batch``; returns the pre-update loss."""
    model.train()
    x, tokens, y = collate(model, batch, config, rng, fill)
    out = model(x, tokens)
    loss = segmentation_loss(out.response.prob, y, config.w_bce, config.w_dice)
    if not torch.isfinite(loss.total):
        raise NonFiniteLoss(
            f"non-finite loss (bce={loss.bce.item()}, dice={loss.dice.item()}) "
            f"on captions {[t.caption for t in batch]}"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    optimizer.step()
    return LossValue(loss.total.detach(), loss.bce.detach(), loss.dice.detach())


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def mix_data(supervised: Sequence[Triplet], pseudo: Sequence[Triplet], config: TrainConfig,
             rng: np.random.Generator) -> list[Triplet]:
    """Training pool for a stage: stage 1 uses pseudo data only, stage 2
    adds up to ``pseudo_ratio`` pseudo triplets per supervised one."""
    if config.stage == 1:
        return list(pseudo)
    n = min(len(pseudo), int(round(config.pseudo_ratio * len(supervised))))
    idx = rng.permutation(len(pseudo))[:n] if n else []
    return list(supervised) + [pseudo[i] for i in sorted(idx)]


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    epoch: int = 0


def fit(model: UniLSeg, triplets: Sequence[Triplet], config: TrainConfig,
        optimizer: torch.optim.Optimizer | None = None,
        callback: Callable[[int, LossValue], None] | None = None) -> TrainResult:
    """Epoch loop with per-epoch step decay; stops early at ``max_steps``."""
    if not triplets:
        raise ValueError("no training triplets")
    seed_everything(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = optimizer or make_optimizer(model, config)
    fill = dataset_mean(triplets)
    result = TrainResult()
    for epoch in range(config.epochs):
        set_epoch_lr(optimizer, config, epoch)
        order = rng.permutation(len(triplets))
        for start in range(0, len(order), config.batch_size):
            batch = [triplets[i] for i in order[start:start + config.batch_size]]
            loss = train_step(model, optimizer, batch, config, rng, fill)
            result.losses.append(loss.item())
            result.steps += 1
            if callback:
                callback(result.steps, loss)
            if config.max_steps is not None and result.steps >= config.max_steps:
                result.epoch = epoch + 1
                return result
        result.epoch = epoch + 1
    return result


# --- inference and evaluation ----------------------------------------------


def infer(model: UniLSeg, image: np.ndarray, caption: str) -> np.ndarray:
    """Binary (H, W) mask: one forward pass, bilinear upsample, prob > 0.5."""
    stride = model.config.patch_size * 8
    if image.shape[0] % stride or image.shape[1] % stride:
        raise ValueError(f"image size {image.shape[:2]} not divisible by {stride}")
    return (model.predict_prob(image, caption) > THRESHOLD).astype(np.uint8)


Predictor = Callable[[np.ndarray, str], np.ndarray]

POOLED_IOU_TASKS = (Task.RIS, Task.OVS)
CLASS_IOU_TASKS = (Task.SS, Task.PS)


def _prob_fn(model) -> Predictor:
    if isinstance(model, UniLSeg):
        return model.predict_prob
    return lambda image, caption: np.asarray(model(image, caption), dtype=np.float64)


def evaluate(model: UniLSeg | Predictor, triplets: Sequence[Triplet], task: Task | str) -> MetricReport:
    """Score predictions with the metric each task is reported in."""
    task = Task.parse(task)
    wrong = [t.task.value for t in triplets if t.task is not task]
    if wrong:
        raise ValueError(f"manifest holds {sorted(set(wrong))} triplets, not {task.value}")
    if not triplets:
        raise ValueError("nothing to evaluate")
    prob_fn = _prob_fn(model)
    probs = [prob_fn(t.image, t.caption) for t in triplets]
    preds = [(p > THRESHOLD).astype(np.uint8) for p in probs]
    targets = [t.mask for t in triplets]
    report = MetricReport(task=task.value, ious=[iou(p, g) for p, g in zip(preds, targets)])
    agg = report.aggregates
    if task in POOLED_IOU_TASKS:
        agg["oIoU"] = oiou(zip(preds, targets))
    elif task in CLASS_IOU_TASKS:
        agg["mIoU"] = miou((t.payload or t.caption, p, g) for t, p, g in zip(triplets, preds, targets))
    elif task is Task.SOD:
        agg["F_mean"] = float(np.mean([f_measure(p, g) for p, g in zip(probs, targets)]))
    else:
        videos = defaultdict(list)
        for t, p, g in zip(triplets, preds, targets):
            videos[(t.video_id, t.caption)].append((t.frame_index or 0, p, g))
        scores = []
        for frames in videos.values():
            frames.sort(key=lambda f: f[0])
            scores.append(j_and_f([f[1] for f in frames], [f[2] for f in frames]))
        agg["J"] = float(np.mean([s[0] for s in scores]))
        agg["F_boundary"] = float(np.mean([s[1] for s in scores]))
        agg["J&F"] = float(np.mean([s[2] for s in scores]))
    return report


# --- checkpoints ------------------------------------------------------------


def config_hash(model_config: ModelConfig, train_config: TrainConfig | None = None) -> str:
    blob = json.dumps(
        {"model": model_config.to_dict(), "train": train_config.to_dict() if train_config else None},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, model: UniLSeg, optimizer: torch.optim.Optimizer | None = None,
                    train_config: TrainConfig | None = None, epoch: int = 0) -> None:
    torch.save(
        {
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer else None,
            "model_config": model.config.to_dict(),
            "train_config": train_config.to_dict() if train_config else None,
            "vocab": model.vocab.itos,
            "config_hash": config_hash(model.config, train_config),
            "epoch": epoch,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[UniLSeg, dict]:
    from .encoders import SPECIALS, Vocab

    state = torch.load(path, map_location="cpu", weights_only=False)
    config = ModelConfig.from_dict(state["model_config"])
    model = UniLSeg(config, Vocab(state["vocab"][len(SPECIALS):]))
    dtype = next(iter(state["model"].values())).dtype
    model.to(dtype)
    model.load_state_dict(state["model"])
    model.eval()
    return model, state


# --- flat key/value config files -------------------------------------------


def parse_kv(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Values are read as
    JSON where possible (numbers, booleans, lists, null), else as strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def load_kv(path: str | Path) -> dict:
    return parse_kv(Path(path).read_text())


def desk_overfit_config(n_triplets: int = 64, steps: int = 2000, batch_size: int = 8,
                        learning_rate: float | None = None, seed: int = 0) -> TrainConfig:
    """The stage-2 schedule stretched to ``steps`` optimisation steps, with
    the decay kept at two thirds of the run."""
    base = make_schedule(2)
    per_epoch = math.ceil(n_triplets / batch_size)
    epochs = math.ceil(steps / per_epoch)
    decay = int(round(epochs * base.decay_epoch / base.epochs))
    return replace(base, epochs=epochs, decay_epoch=decay, batch_size=batch_size, max_steps=steps,
                   seed=seed, learning_rate=base.learning_rate if learning_rate is None else learning_rate)
