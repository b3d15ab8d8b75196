"""Image preparation and standard scaling of extracted feature vectors."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SIZE = (299, 299)
STD_FLOOR = 1e-12


def prepare_image(
    data: bytes,
    size: tuple[int, int] = IMAGE_SIZE,
    value_range: tuple[float, float] = (-1.0, 1.0),
) -> np.ndarray:
    """Decode image bytes into a ``size + (3,)`` float32 array.

    Pixels are resized bilinearly (aspect ratio is not preserved) and mapped
    linearly from [0, 255] onto ``value_range``.
    """
    with Image.open(io.BytesIO(data)) as im:
        im.load()
        if im.mode in ("RGBA", "LA", "PA") or (im.mode == "P" and "transparency" in im.info):
            im = im.convert("RGBA").convert("RGB")
        else:
            im = im.convert("RGB")
        im = im.resize(size, Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    lo, hi = value_range
    return (arr * np.float32((hi - lo) / 255.0) + np.float32(lo)).astype(np.float32)


@dataclass(frozen=True)
class ScalerState:
    mean: np.ndarray
    std: np.ndarray
    fitted_on: str = "train"

    @property
    def dim(self) -> int:
        return len(self.mean)

    def to_json(self) -> str:
        return json.dumps(
            {
                "dim": self.dim,
                "mean": self.mean.tolist(),
                "std": self.std.tolist(),
                "fitted_on": self.fitted_on,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> ScalerState:
        d = json.loads(text)
        mean = np.asarray(d["mean"], dtype=np.float64)
        std = np.asarray(d["std"], dtype=np.float64)
        if len(mean) != d["dim"] or len(std) != d["dim"]:
            raise ValueError("scaler file dimension does not match its vectors")
        return cls(mean, std, d["fitted_on"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> ScalerState:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def fit_scaler(features, fitted_on: str = "train") -> ScalerState:
    """Per-dimension mean and population std; near-zero stds are set to 1."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("fit_scaler needs at least 2 vectors of equal dimension")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < STD_FLOOR, 1.0, std)
    return ScalerState(mean, std, fitted_on)


def apply_scaler(state: ScalerState, v) -> np.ndarray:
    """Standardise one vector or a batch of row vectors with a train-fitted state."""
    if state.fitted_on != "train":
        raise ValueError(f"refusing scaler fitted on {state.fitted_on!r}; only train-fitted scalers are valid")
    x = np.asarray(v, dtype=np.float64)
    if x.shape[-1] != state.dim:
        raise ValueError(f"vector dimension {x.shape[-1]} does not match scaler dimension {state.dim}")
    return (x - state.mean) / state.std
