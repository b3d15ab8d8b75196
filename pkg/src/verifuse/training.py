"""Mini-batch Adam training of the fusion heads with per-epoch history."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .fusion import DenseStack, FusionModel, LateFusionModel, head_forward, predict_label
from .metrics import EPS, bce_loss, compute_metrics

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.980
    epochs: int = 30
    batch_size: int = 128
    dropout: float = 0.4
    seed: int = 0
    adam_eps: float = 1e-7
    loss: str = "binary_crossentropy"

    def __post_init__(self):
        if self.learning_rate < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("learning rate must be >= 0 and betas in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.loss != "binary_crossentropy":
            raise ValueError(f"unsupported loss {self.loss!r}")


@dataclass
class EpochHistory:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    @property
    def best_val_epoch(self) -> int | None:
        """1-based epoch with the highest validation accuracy (informational only)."""
        if not self.val_acc:
            return None
        return int(np.argmax(self.val_acc)) + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best_val_epoch"] = self.best_val_epoch
        return d


@dataclass
class FeatureSet:
    """Scaled features of one split, rows aligned with ``ids`` and ``y``."""

    text: np.ndarray
    image: np.ndarray
    y: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.y)


class TrainingDiverged(RuntimeError):
    pass


def _bce_torch(probs: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    p_true = torch.where(y == 1, probs[:, 0], probs[:, 1])
    return -torch.log(p_true.clamp(EPS, 1 - EPS)).mean()


def _score(stack: DenseStack, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    p = head_forward(stack, x, "infer")
    return bce_loss(p, y), compute_metrics(predict_label(p), y).accuracy


def train(model: FusionModel, train_set: FeatureSet, val_set: FeatureSet, cfg: TrainConfig = TrainConfig()):
    """Train every head of ``model`` in place and return ``(model, history)``.

    ``history`` maps a stream name to its :class:`EpochHistory`: ``"early"`` for
    early fusion; ``"text"``, ``"image"`` and the fused ``"late"`` stream for
    late fusion. The late-fusion heads are trained independently on the same
    batch schedule; averaging with the model's weights happens only at
    prediction time.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    heads = model.heads()
    train_inputs = model.head_inputs(train_set.text, train_set.image)
    val_inputs = model.head_inputs(val_set.text, val_set.image) if len(val_set) else None
    y_train = torch.as_tensor(np.asarray(train_set.y, dtype=np.int64))
    xs = {k: torch.as_tensor(np.asarray(v, dtype=np.float32)) for k, v in train_inputs.items()}
    for name, x in xs.items():
        if not torch.isfinite(x).all():
            raise ValueError(f"non-finite training features for stream {name!r}")

    optimizers = {
        name: torch.optim.Adam(
            head.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps
        )
        for name, head in heads.items()
    }
    history = {name: EpochHistory() for name in heads}
    if isinstance(model, LateFusionModel):
        history["late"] = EpochHistory()

    n = len(train_set)
    rng = np.random.default_rng(cfg.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            sums = {name: [0.0, 0] for name in heads}
            steps = 0
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = torch.as_tensor(order[start : start + cfg.batch_size])
                yb = y_train[idx]
                for name, head in heads.items():
                    head.train()
                    opt = optimizers[name]
                    opt.zero_grad()
                    probs = head.proba(xs[name][idx])
                    loss = _bce_torch(probs, yb)
                    if not torch.isfinite(loss):
                        raise TrainingDiverged(f"non-finite loss in stream {name!r} at epoch {epoch}, batch {b}")
                    loss.backward()
                    opt.step()
                    sums[name][0] += loss.item() * len(idx)
                    sums[name][1] += int(((probs[:, 0] > 0.5).long() == yb).sum())
                steps += 1
            for name, head in heads.items():
                h = history[name]
                h.train_loss.append(sums[name][0] / n)
                h.train_acc.append(sums[name][1] / n)
                h.steps.append(steps)
                if val_inputs is not None:
                    vl, va = _score(head, val_inputs[name], val_set.y)
                    h.val_loss.append(vl)
                    h.val_acc.append(va)
            if isinstance(model, LateFusionModel):
                _record_fused(model, train_set, val_set, history["late"], steps)
            summary = ", ".join(
                f"{k}: loss {h.train_loss[-1]:.4f} val_acc {h.val_acc[-1] if h.val_acc else float('nan'):.4f}"
                for k, h in history.items()
            )
            logger.info("epoch %d/%d  %s", epoch, cfg.epochs, summary)
    model.eval()
    return model, history


def _record_fused(model: LateFusionModel, train_set: FeatureSet, val_set: FeatureSet, h: EpochHistory, steps: int):
    p = model.predict_proba(train_set.text, train_set.image, "infer")
    h.train_loss.append(bce_loss(p, train_set.y))
    h.train_acc.append(compute_metrics(predict_label(p), train_set.y).accuracy)
    h.steps.append(steps)
    if len(val_set):
        p = model.predict_proba(val_set.text, val_set.image, "infer")
        h.val_loss.append(bce_loss(p, val_set.y))
        h.val_acc.append(compute_metrics(predict_label(p), val_set.y).accuracy)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
