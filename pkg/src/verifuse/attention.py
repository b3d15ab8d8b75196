"""Scaled dot-product and multi-head attention in plain numpy.

Also hosts the small seeded transformer used as an offline stand-in for a
pretrained text encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tokenization import TokenizedText


def _check_mask(mask, n_k: int) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask)
    if m.shape != (n_k,):
        raise ValueError(f"mask must have shape ({n_k},), got {m.shape}")
    if not m.any():
        raise ValueError("every key position is masked; attention weights are undefined")
    return m.astype(bool)


def attention_weights(Q, K, mask=None) -> np.ndarray:
    """Row-stochastic matrix softmax(Q K^T / sqrt(d_k)) with masked keys at zero."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.ndim != 2 or K.ndim != 2:
        raise ValueError("Q and K must be 2-d")
    if Q.shape[1] != K.shape[1]:
        raise ValueError(f"Q has d_k={Q.shape[1]} but K has d_k={K.shape[1]}")
    d_k = Q.shape[1]
    if d_k < 1:
        raise ValueError("d_k must be >= 1")
    keep = _check_mask(mask, K.shape[0])
    scores = Q @ K.T / np.sqrt(d_k)
    if keep is not None:
        scores = np.where(keep[None, :], scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    return w / w.sum(axis=1, keepdims=True)


def scaled_dot_product_attention(Q, K, V, mask=None) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] != np.shape(K)[0]:
        raise ValueError(f"K and V must share their row count; got {np.shape(K)} and {V.shape}")
    return attention_weights(Q, K, mask) @ V


@dataclass(frozen=True)
class MultiHeadParams:
    """Per-head projections stacked on a leading head axis.

    ``w_q``/``w_k`` are ``(h, d_model, d_k)``, ``w_v`` is ``(h, d_model, d_v)``
    and ``w_o`` is ``(h * d_v, d_model)``.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self):
        h, d_model, d_k = self.w_q.shape
        if h < 1:
            raise ValueError("need at least one head")
        if self.w_k.shape != (h, d_model, d_k):
            raise ValueError(f"w_k shape {self.w_k.shape} != {(h, d_model, d_k)}")
        if self.w_v.ndim != 3 or self.w_v.shape[:2] != (h, d_model):
            raise ValueError(f"w_v shape {self.w_v.shape} inconsistent with h={h}, d_model={d_model}")
        if self.w_o.shape != (h * self.d_v, d_model):
            raise ValueError(f"w_o shape {self.w_o.shape} != {(h * self.d_v, d_model)}")

    @property
    def h(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_model(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[2]

    @property
    def d_v(self) -> int:
        return self.w_v.shape[2]

    @classmethod
    def random(cls, rng: np.random.Generator, h: int, d_model: int, d_k: int, d_v: int) -> MultiHeadParams:
        s = 1.0 / np.sqrt(d_model)
        return cls(
            w_q=rng.normal(0.0, s, (h, d_model, d_k)),
            w_k=rng.normal(0.0, s, (h, d_model, d_k)),
            w_v=rng.normal(0.0, s, (h, d_model, d_v)),
            w_o=rng.normal(0.0, 1.0 / np.sqrt(h * d_v), (h * d_v, d_model)),
        )


def multi_head_attention(Q, K, V, params: MultiHeadParams, mask=None) -> np.ndarray:
    """Concat(head_1..head_h) W_o with head_i = Attention(Q W_q[i], K W_k[i], V W_v[i])."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    for name, a in (("Q", Q), ("K", K), ("V", V)):
        if a.ndim != 2 or a.shape[1] != params.d_model:
            raise ValueError(f"{name} must have {params.d_model} columns, got shape {a.shape}")
    heads = [
        scaled_dot_product_attention(Q @ params.w_q[i], K @ params.w_k[i], V @ params.w_v[i], mask)
        for i in range(params.h)
    ]
    return np.concatenate(heads, axis=1) @ params.w_o


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass(frozen=True)
class StubEncoderConfig:
    seed: int = 0
    vocab_size: int = 1000
    d_model: int = 64
    h: int = 4
    layers: int = 1
    out_dim: int = 768

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> StubEncoderConfig:
        return cls(**json.loads(text))


class StubTextEncoder:
    """Frozen, seeded self-attention encoder with mean pooling.

    Everything is drawn from ``np.random.default_rng(config.seed)`` so two
    instances with the same config produce identical outputs on any machine
    with IEEE doubles.
    """

    def __init__(self, config: StubEncoderConfig = StubEncoderConfig()):
        if not 1 <= config.layers <= 2:
            raise ValueError("stub encoder supports 1 or 2 attention layers")
        if config.d_model % config.h:
            raise ValueError("d_model must be divisible by h")
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        self.embedding = rng.normal(0.0, 1.0, (config.vocab_size, d))
        self.layers = [
            MultiHeadParams.random(rng, config.h, d, d // config.h, d // config.h) for _ in range(config.layers)
        ]
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(d), (d, config.out_dim))
        self._positions: np.ndarray | None = None
        for arr in [self.embedding, self.projection]:
            arr.setflags(write=False)

    @property
    def out_dim(self) -> int:
        return self.config.out_dim

    def _pos(self, n: int) -> np.ndarray:
        if self._positions is None or len(self._positions) < n:
            self._positions = sinusoidal_positions(max(n, 512), self.config.d_model)
        return self._positions[:n]

    def encode(self, tokens: TokenizedText) -> np.ndarray:
        ids = np.asarray(tokens.input_ids)
        keep = np.asarray(tokens.input_mask).astype(bool)
        if ids.ndim != 1 or keep.shape != ids.shape:
            raise ValueError("input_ids and input_mask must be 1-d and equal length")
        if ids.min(initial=0) < 0 or ids.max(initial=0) >= self.config.vocab_size:
            raise ValueError(f"token id outside stub vocabulary of size {self.config.vocab_size}")
        # only unmasked positions can influence the result, so drop the rest up front
        x = self.embedding[ids[keep]] + self._pos(len(ids))[keep]
        for params in self.layers:
            x = x + multi_head_attention(x, x, x, params)
        return x.mean(axis=0) @ self.projection


def stub_encode_text(tokens: TokenizedText, encoder: StubTextEncoder) -> np.ndarray:
    return encoder.encode(tokens)
