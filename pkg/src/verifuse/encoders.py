"""Frozen feature extractors behind one interface, plus the binary feature cache.

Backends:

* ``bert_base`` / ``albert_base`` -- pooled output of a pretrained transformer
  (via ``transformers``), 768-d.
* ``inception_resnet_v2`` -- global-average-pooled penultimate activations of
  the Keras ImageNet model, 1536-d.
* ``stub_text`` / ``stub_image`` -- seeded offline stand-ins with the same
  output contract, used for tests and desk-scale runs.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import StubEncoderConfig, StubTextEncoder
from .tokenization import TokenizedText

TEXT_BACKENDS = ("bert_base", "albert_base", "stub_text")
IMAGE_BACKENDS = ("inception_resnet_v2", "stub_image")
PRETRAINED_DIMS = {"bert_base": 768, "albert_base": 768, "inception_resnet_v2": 1536}
DEFAULT_CHECKPOINTS = {
    "bert_base": "bert-base-uncased",
    "albert_base": "albert-base-v2",
    "inception_resnet_v2": "imagenet",
}
STUB_VERSION = "v1"
HIST_BINS = 16


class EncoderUnavailable(RuntimeError):
    """A pretrained backend could not be loaded."""


class FeatureCacheError(ValueError):
    """A feature cache file is stale, truncated or otherwise unusable."""


@dataclass(frozen=True)
class EncoderSpec:
    modality: str
    backend: str
    out_dim: int = 0
    input_norm: tuple[float, float] = (-1.0, 1.0)
    seed: int = 0
    # stub_text only
    vocab_size: int = 0
    d_model: int = 64
    heads: int = 4
    layers: int = 1
    # pretrained only: hub name, local directory or weights file
    checkpoint: str | None = None
    frozen: bool = True

    def __post_init__(self):
        valid = TEXT_BACKENDS if self.modality == "text" else IMAGE_BACKENDS if self.modality == "image" else ()
        if self.backend not in valid:
            raise ValueError(f"backend {self.backend!r} is not a {self.modality!r} encoder")
        if not self.frozen:
            raise ValueError("encoders are always frozen")
        if self.backend in PRETRAINED_DIMS:
            expected = PRETRAINED_DIMS[self.backend]
            if self.out_dim not in (0, expected):
                raise ValueError(f"{self.backend} produces {expected}-d features, not {self.out_dim}")
            object.__setattr__(self, "out_dim", expected)
        elif self.out_dim == 0:
            object.__setattr__(self, "out_dim", 768 if self.modality == "text" else 1536)
        object.__setattr__(self, "input_norm", tuple(self.input_norm))

    @property
    def is_stub(self) -> bool:
        return self.backend.startswith("stub_")

    @property
    def fingerprint(self) -> str:
        if self.is_stub:
            relevant = {k: v for k, v in asdict(self).items() if k not in ("checkpoint", "frozen")}
            digest = hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()[:16]
            return f"{self.backend}:{STUB_VERSION}:{digest}"
        return f"{self.backend}:{self.checkpoint or DEFAULT_CHECKPOINTS[self.backend]}"

    def stub_text_config(self) -> StubEncoderConfig:
        return StubEncoderConfig(
            seed=self.seed,
            vocab_size=self.vocab_size,
            d_model=self.d_model,
            h=self.heads,
            layers=self.layers,
            out_dim=self.out_dim,
        )


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    record_id: str
    modality: str
    fingerprint: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 1:
            raise ValueError("feature vector must be 1-d")
        if not np.isfinite(v).all():
            raise ValueError(f"non-finite feature values for record {self.record_id!r}")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return len(self.values)


def stack(features: Sequence[FeatureVector]) -> np.ndarray:
    if not features:
        return np.zeros((0, 0), dtype=np.float32)
    return np.stack([f.values for f in features])


# ---------------------------------------------------------------------------
# Stub image encoder
# ---------------------------------------------------------------------------


class StubImageEncoder:
    """Channel mean/std/histogram statistics through a seeded random projection."""

    n_stats = 3 + 3 + 3 * HIST_BINS

    def __init__(self, out_dim: int = 1536, seed: int = 0, input_norm=(-1.0, 1.0)):
        self.out_dim = out_dim
        self.input_norm = tuple(input_norm)
        rng = np.random.default_rng(seed)
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(self.n_stats), (self.n_stats, out_dim))
        self.projection.setflags(write=False)

    def statistics(self, image: np.ndarray) -> np.ndarray:
        lo, hi = self.input_norm
        unit = (np.asarray(image, dtype=np.float64) - lo) / (hi - lo)
        px = unit.reshape(-1, 3)
        hists = [np.histogram(px[:, c], bins=HIST_BINS, range=(0.0, 1.0))[0] / len(px) for c in range(3)]
        return np.concatenate([px.mean(axis=0), px.std(axis=0), *hists])

    def encode(self, image: np.ndarray) -> np.ndarray:
        return self.statistics(image) @ self.projection


# ---------------------------------------------------------------------------
# Pretrained adapters (optional dependencies, imported lazily)
# ---------------------------------------------------------------------------


def _unavailable(spec: EncoderSpec, exc: BaseException) -> EncoderUnavailable:
    fallback = "stub_text" if spec.modality == "text" else "stub_image"
    flag = "--text-encoder" if spec.modality == "text" else "--image-encoder"
    return EncoderUnavailable(
        f"cannot load {spec.backend} ({spec.checkpoint or DEFAULT_CHECKPOINTS[spec.backend]}): {exc}. "
        f"Install the 'pretrained' extra and make the checkpoint available, "
        f"or run offline with `{flag} {fallback}`."
    )


class HFVocab:
    """Adapts a ``transformers`` tokenizer to :func:`tokenize_text`."""

    def __init__(self, tokenizer):
        self._tok = tokenizer
        self.pad_id = tokenizer.pad_token_id
        self.unk_id = tokenizer.unk_token_id
        self.cls_id = tokenizer.cls_token_id
        self.sep_id = tokenizer.sep_token_id

    def __len__(self) -> int:
        return len(self._tok)

    def pieces(self, text: str, mode: str) -> list[str]:
        if mode == "char_level":
            return [ch for ch in text if not ch.isspace()]
        return self._tok.tokenize(text)

    def convert(self, pieces: list[str]) -> list[int]:
        return list(self._tok.convert_tokens_to_ids(pieces))


class PretrainedTextEncoder:
    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        name = spec.checkpoint or DEFAULT_CHECKPOINTS[spec.backend]
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer

            self.model = AutoModel.from_pretrained(name)
            self.vocab = HFVocab(AutoTokenizer.from_pretrained(name))
        except Exception as exc:
            raise _unavailable(spec, exc) from exc
        self._torch = torch
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        if self.model.config.hidden_size != spec.out_dim:
            raise EncoderUnavailable(
                f"{name} has hidden size {self.model.config.hidden_size}, expected {spec.out_dim}"
            )

    def encode_batch(self, batch: Sequence[TokenizedText]) -> np.ndarray:
        torch = self._torch
        ids = torch.as_tensor(np.stack([t.input_ids for t in batch]))
        mask = torch.as_tensor(np.stack([t.input_mask for t in batch]))
        seg = torch.as_tensor(np.stack([t.segment_ids for t in batch]))
        with torch.no_grad():
            out = self.model(input_ids=ids, attention_mask=mask, token_type_ids=seg)
        return out.pooler_output.numpy()


class PretrainedImageEncoder:
    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        weights = spec.checkpoint or DEFAULT_CHECKPOINTS[spec.backend]
        if weights != "imagenet" and not Path(weights).is_file():
            raise _unavailable(spec, FileNotFoundError(weights))
        try:
            import tensorflow as tf

            self.model = tf.keras.applications.InceptionResNetV2(
                include_top=False, weights=weights, input_shape=(299, 299, 3), pooling="avg"
            )
        except Exception as exc:
            raise _unavailable(spec, exc) from exc
        self.model.trainable = False
        if self.model.output_shape[-1] != spec.out_dim:
            raise EncoderUnavailable(f"image model yields {self.model.output_shape[-1]}-d features")

    def encode_batch(self, batch: Sequence[np.ndarray]) -> np.ndarray:
        return np.asarray(self.model(np.stack(batch), training=False))


# ---------------------------------------------------------------------------
# Uniform entry points
# ---------------------------------------------------------------------------


class TextEncoder:
    def __init__(self, spec: EncoderSpec):
        if spec.modality != "text":
            raise ValueError("not a text encoder spec")
        self.spec = spec
        if spec.is_stub:
            if spec.vocab_size <= 0:
                raise ValueError("stub_text needs vocab_size > 0")
            self._stub = StubTextEncoder(spec.stub_text_config())
            self._impl = None
        else:
            self._stub = None
            self._impl = PretrainedTextEncoder(spec)

    @property
    def vocab(self):
        """The pretrained tokenizer vocabulary, or None for the stub."""
        return None if self._impl is None else self._impl.vocab

    def encode(self, batch: Sequence[TokenizedText]) -> np.ndarray:
        if not batch:
            return np.zeros((0, self.spec.out_dim), dtype=np.float32)
        lengths = {t.max_len for t in batch}
        if len(lengths) != 1:
            raise ValueError(f"all inputs in a batch must share max_len; got {sorted(lengths)}")
        if self._stub is not None:
            out = np.stack([self._stub.encode(t) for t in batch])
        else:
            out = self._impl.encode_batch(batch)
        return out.astype(np.float32)


class ImageEncoder:
    def __init__(self, spec: EncoderSpec):
        if spec.modality != "image":
            raise ValueError("not an image encoder spec")
        self.spec = spec
        if spec.is_stub:
            self._impl = StubImageEncoder(spec.out_dim, spec.seed, spec.input_norm)
        else:
            self._impl = PretrainedImageEncoder(spec)

    def encode(self, batch: Sequence[np.ndarray]) -> np.ndarray:
        if not batch:
            return np.zeros((0, self.spec.out_dim), dtype=np.float32)
        for img in batch:
            if np.shape(img) != (299, 299, 3):
                raise ValueError(f"image arrays must be 299x299x3, got {np.shape(img)}")
        if isinstance(self._impl, StubImageEncoder):
            out = np.stack([self._impl.encode(img) for img in batch])
        else:
            out = self._impl.encode_batch(batch)
        return out.astype(np.float32)


def _wrap(values: np.ndarray, ids: Sequence[str], spec: EncoderSpec) -> list[FeatureVector]:
    return [FeatureVector(v, rid, spec.modality, spec.fingerprint) for v, rid in zip(values, ids)]


def encode_text_batch(
    encoder: TextEncoder, batch: Sequence[TokenizedText], ids: Sequence[str] | None = None
) -> list[FeatureVector]:
    ids = ids if ids is not None else [str(i) for i in range(len(batch))]
    return _wrap(encoder.encode(batch), ids, encoder.spec)


def encode_image_batch(
    encoder: ImageEncoder, batch: Sequence[np.ndarray], ids: Sequence[str] | None = None
) -> list[FeatureVector]:
    ids = ids if ids is not None else [str(i) for i in range(len(batch))]
    return _wrap(encoder.encode(batch), ids, encoder.spec)


# ---------------------------------------------------------------------------
# Feature cache
# ---------------------------------------------------------------------------

_write_locks: dict[str, threading.Lock] = {}
_locks_guard = threading.Lock()


def _lock_for(path: Path) -> threading.Lock:
    with _locks_guard:
        return _write_locks.setdefault(str(path.resolve()), threading.Lock())


def cache_features(features: Sequence[FeatureVector], path: str | Path) -> None:
    """Write vectors as a JSON header line followed by id-prefixed float32 records."""
    path = Path(path)
    if not features:
        raise FeatureCacheError("refusing to cache an empty feature list")
    dim = features[0].dim
    modality = features[0].modality
    fingerprint = features[0].fingerprint
    for f in features:
        if (f.dim, f.modality, f.fingerprint) != (dim, modality, fingerprint):
            raise FeatureCacheError(f"mixed features in one cache (record {f.record_id!r})")
    header = {"dim": dim, "count": len(features), "modality": modality, "fingerprint": fingerprint}
    chunks = [json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"]
    for f in features:
        rid = f.record_id.encode("utf-8")
        chunks.append(struct.pack("<I", len(rid)) + rid + f.values.astype("<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with _lock_for(path):
        tmp.write_bytes(b"".join(chunks))
        os.replace(tmp, path)


def load_features(
    path: str | Path, fingerprint: str | None = None, dim: int | None = None
) -> list[FeatureVector]:
    """Read a cache file, checking it against the requesting encoder."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FeatureCacheError(f"{path}: no header line (file is {len(data)} bytes)")
    try:
        header = json.loads(data[:nl])
    except json.JSONDecodeError as exc:
        raise FeatureCacheError(f"{path}: corrupt header: {exc}") from exc
    if fingerprint is not None and header["fingerprint"] != fingerprint:
        raise FeatureCacheError(
            f"{path}: stale cache, written by {header['fingerprint']!r} but {fingerprint!r} was requested"
        )
    if dim is not None and header["dim"] != dim:
        raise FeatureCacheError(f"{path}: cache holds {header['dim']}-d vectors, expected {dim}")
    d = header["dim"]
    out = []
    offset = nl + 1
    for _ in range(header["count"]):
        if offset + 4 > len(data):
            raise FeatureCacheError(f"{path}: truncated at byte offset {offset} (record length prefix)")
        (n,) = struct.unpack_from("<I", data, offset)
        end = offset + 4 + n + 4 * d
        if end > len(data):
            raise FeatureCacheError(f"{path}: truncated at byte offset {len(data)}, record starting at {offset} needs {end}")
        rid = data[offset + 4 : offset + 4 + n].decode("utf-8")
        values = np.frombuffer(data, dtype="<f4", count=d, offset=offset + 4 + n).astype(np.float32)
        out.append(FeatureVector(values, rid, header["modality"], header["fingerprint"]))
        offset = end
    if offset != len(data):
        raise FeatureCacheError(f"{path}: {len(data) - offset} trailing bytes after byte offset {offset}")
    return out
