"""Early and late fusion classifier heads over frozen text/image features.

Probability pairs are ordered ``(p_fake, p_real)``; index 0 is the positive
(fake) class.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

TEXT_DIM = 768
IMAGE_DIM = 1536
EARLY_WIDTHS = (1024, 512, 128, 64, 2)
TEXT_WIDTHS = (512, 128, 64, 2)
IMAGE_WIDTHS = (1024, 512, 128, 64, 2)
DROPOUT = 0.4
DEFAULT_SWEEP_WEIGHTS = ((0.4, 0.6), (0.5, 0.5), (0.6, 0.4), (0.7, 0.3))


class BatchNorm(nn.Module):
    """Batch normalisation over the feature axis.

    Unlike ``nn.BatchNorm1d`` this accepts a batch of one (the trailing partial
    batch of an epoch), for which the batch variance is simply zero. Running
    statistics track the biased batch variance.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-3):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.register_buffer("running_mean", torch.zeros(dim))
        self.register_buffer("running_var", torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training:
            mean = x.mean(dim=0)
            var = x.var(dim=0, unbiased=False)
            with torch.no_grad():
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * var)
        else:
            mean, var = self.running_mean, self.running_var
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias


class DenseStack(nn.Module):
    """dense -> batch norm -> ReLU -> dropout per hidden layer, then a 2-way dense output."""

    def __init__(self, in_dim: int, widths=EARLY_WIDTHS, dropout: float = DROPOUT, seed: int = 0):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if not widths or widths[-1] != 2:
            raise ValueError(f"layer widths must end in 2, got {widths}")
        self.in_dim = in_dim
        self.widths = widths
        self.dropout = dropout
        gen = torch.Generator().manual_seed(seed)
        layers: list[nn.Module] = []
        prev = in_dim
        for w in widths[:-1]:
            layers += [nn.Linear(prev, w), BatchNorm(w), nn.ReLU(), nn.Dropout(dropout)]
            prev = w
        layers.append(nn.Linear(prev, 2))
        self.net = nn.Sequential(*layers)
        for m in self.net:
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight, generator=gen)
                nn.init.zeros_(m.bias)

    def dense_layers(self) -> list[nn.Linear]:
        return [m for m in self.net if isinstance(m, nn.Linear)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits, shape ``(n, 2)``."""
        return self.net(x)

    def proba(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.net(x), dim=-1)


def _as_batch(x, dtype=torch.float32) -> tuple[torch.Tensor, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if not np.isfinite(arr).all():
        raise ValueError("input features contain non-finite values")
    return torch.from_numpy(arr).to(dtype), single


def head_forward(stack: DenseStack, x, mode: str = "infer") -> np.ndarray:
    """Probability pair(s) ``(p_fake, p_real)`` for one vector or a batch of rows."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    t, single = _as_batch(x, next(stack.parameters()).dtype)
    if t.shape[1] != stack.in_dim:
        raise ValueError(f"stack expects {stack.in_dim}-d input, got {t.shape[1]}")
    was_training = stack.training
    stack.train(mode == "train")
    try:
        with torch.no_grad():
            p = stack.proba(t).numpy().astype(np.float64)
    finally:
        stack.train(was_training)
    return p[0] if single else p


def concat_features(text, image, text_dim: int = TEXT_DIM, image_dim: int = IMAGE_DIM) -> np.ndarray:
    """Text features first, then image features, along the last axis."""
    t = np.asarray(getattr(text, "values", text))
    i = np.asarray(getattr(image, "values", image))
    if t.shape[-1] != text_dim or i.shape[-1] != image_dim:
        raise ValueError(
            f"expected text/image dims {text_dim}/{image_dim}, got {t.shape[-1]}/{i.shape[-1]}"
        )
    if not (np.isfinite(t).all() and np.isfinite(i).all()):
        raise ValueError("cannot fuse non-finite features")
    return np.concatenate([t, i], axis=-1)


def check_weights(w1: float, w2: float) -> None:
    if w1 < 0 or w2 < 0:
        raise ValueError(f"fusion weights must be non-negative, got ({w1}, {w2})")
    if w1 + w2 <= 0:
        raise ValueError("fusion weights must not both be zero")


def late_fuse(p1, p2, w1: float, w2: float) -> np.ndarray:
    """Weighted average ``(w1 p1 + w2 p2) / (w1 + w2)`` of probability pairs."""
    check_weights(w1, w2)
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    total = w1 + w2
    a, b = w1 / total, w2 / total
    fused = a * p1 + b * p2
    # the exact mean lies between its inputs; pin rounding error to that interval
    return np.clip(fused, np.minimum(p1, p2), np.maximum(p1, p2))


def predict_label(p, threshold: float = 0.5):
    """``1`` (fake) where ``p_fake > threshold`` else ``0`` (real); ties go to real."""
    p = np.asarray(p, dtype=np.float64)
    labels = (p[..., 0] > threshold).astype(np.int64)
    return int(labels) if labels.ndim == 0 else labels


class EarlyFusionModel(nn.Module):
    kind = "early"

    def __init__(self, text_dim: int = TEXT_DIM, image_dim: int = IMAGE_DIM, widths=EARLY_WIDTHS,
                 dropout: float = DROPOUT, seed: int = 0):
        super().__init__()
        self.text_dim = text_dim
        self.image_dim = image_dim
        self.stack = DenseStack(text_dim + image_dim, widths, dropout, seed)

    @property
    def input_dim(self) -> int:
        return self.stack.in_dim

    def heads(self) -> dict[str, DenseStack]:
        return {"early": self.stack}

    def head_inputs(self, text: np.ndarray, image: np.ndarray) -> dict[str, np.ndarray]:
        return {"early": concat_features(text, image, self.text_dim, self.image_dim)}

    def predict_proba(self, text, image, mode: str = "infer") -> np.ndarray:
        return head_forward(self.stack, concat_features(text, image, self.text_dim, self.image_dim), mode)

    def arch(self) -> dict:
        return {
            "fusion": self.kind,
            "text_dim": self.text_dim,
            "image_dim": self.image_dim,
            "widths": {"early": list(self.stack.widths)},
            "dropout": self.stack.dropout,
        }


class LateFusionModel(nn.Module):
    kind = "late"

    def __init__(self, text_dim: int = TEXT_DIM, image_dim: int = IMAGE_DIM, text_widths=TEXT_WIDTHS,
                 image_widths=IMAGE_WIDTHS, dropout: float = DROPOUT, weights=(0.5, 0.5), seed: int = 0):
        super().__init__()
        self.text_dim = text_dim
        self.image_dim = image_dim
        self.text_head = DenseStack(text_dim, text_widths, dropout, seed)
        self.image_head = DenseStack(image_dim, image_widths, dropout, seed + 1)
        self.set_weights(*weights)

    def set_weights(self, w1: float, w2: float) -> None:
        check_weights(w1, w2)
        self.weights = (float(w1), float(w2))

    def heads(self) -> dict[str, DenseStack]:
        return {"text": self.text_head, "image": self.image_head}

    def head_inputs(self, text: np.ndarray, image: np.ndarray) -> dict[str, np.ndarray]:
        return {"text": np.asarray(text), "image": np.asarray(image)}

    def stream_proba(self, text, image, mode: str = "infer") -> tuple[np.ndarray, np.ndarray]:
        return head_forward(self.text_head, text, mode), head_forward(self.image_head, image, mode)

    def predict_proba(self, text, image, mode: str = "infer", weights=None) -> np.ndarray:
        w1, w2 = weights if weights is not None else self.weights
        p1, p2 = self.stream_proba(text, image, mode)
        return late_fuse(p1, p2, w1, w2)

    def arch(self) -> dict:
        return {
            "fusion": self.kind,
            "text_dim": self.text_dim,
            "image_dim": self.image_dim,
            "widths": {"text": list(self.text_head.widths), "image": list(self.image_head.widths)},
            "dropout": self.text_head.dropout,
            "weights": list(self.weights),
        }


FusionModel = EarlyFusionModel | LateFusionModel


def build_model(fusion: str, text_dim: int = TEXT_DIM, image_dim: int = IMAGE_DIM, dropout: float = DROPOUT,
                weights=(0.5, 0.5), seed: int = 0) -> FusionModel:
    if fusion == "early":
        return EarlyFusionModel(text_dim, image_dim, dropout=dropout, seed=seed)
    if fusion == "late":
        return LateFusionModel(text_dim, image_dim, dropout=dropout, weights=weights, seed=seed)
    raise ValueError(f"unknown fusion kind {fusion!r}")


def save_model(model: FusionModel, directory: str | Path, extra: dict | None = None) -> None:
    """Write ``arch.json`` plus one little-endian float32 blob per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arch = model.arch()
    params = []
    for name, tensor in model.state_dict().items():
        fname = f"{name}.f32"
        arr = tensor.detach().cpu().numpy().astype("<f4")
        (directory / fname).write_bytes(arr.tobytes())
        params.append({"name": name, "file": fname, "shape": list(arr.shape)})
    arch["params"] = params
    if extra:
        arch.update(extra)
    (directory / "arch.json").write_text(json.dumps(arch, indent=1, sort_keys=True), encoding="utf-8")


def load_arch(directory: str | Path) -> dict:
    return json.loads((Path(directory) / "arch.json").read_text(encoding="utf-8"))


def load_model(directory: str | Path) -> FusionModel:
    directory = Path(directory)
    arch = load_arch(directory)
    if arch["fusion"] == "early":
        model: FusionModel = EarlyFusionModel(
            arch["text_dim"], arch["image_dim"], arch["widths"]["early"], arch["dropout"]
        )
    elif arch["fusion"] == "late":
        model = LateFusionModel(
            arch["text_dim"], arch["image_dim"], arch["widths"]["text"], arch["widths"]["image"],
            arch["dropout"], tuple(arch["weights"]),
        )
    else:
        raise ValueError(f"unknown fusion kind in {directory}/arch.json: {arch['fusion']!r}")
    state = {}
    for p in arch["params"]:
        raw = (directory / p["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").reshape(p["shape"])
        state[p["name"]] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    return model
