"""Minimal deterministic self-attention stack.

Tokens are rows: a sequence of ``n`` tokens at depth ``d`` is an ``(n, d)``
array, so the projections read ``Q = H @ W_Q.T`` and the attention scores
are ``Q @ K.T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyInputError, NumericError, ShapeError, ValidationError

SEGMENTS = ("instruction", "example", "query", "answer")


@dataclass
class TokenSequence:
    tokens: list[int]
    segments: list[str]
    embeddings: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.tokens) != len(self.segments):
            raise ShapeError(
                f"tokens ({len(self.tokens)}) and segments ({len(self.segments)}) differ in length"
            )
        bad = sorted({s for s in self.segments if s not in SEGMENTS})
        if bad:
            raise ValidationError(f"unknown segment tags: {bad}")
        if self.embeddings is not None:
            self.embeddings = np.asarray(self.embeddings, dtype=float)
            if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.tokens):
                raise ShapeError(
                    f"embeddings must have {len(self.tokens)} rows, got shape {self.embeddings.shape}"
                )

    def __len__(self) -> int:
        return len(self.tokens)

    def mask(self, *segments: str) -> np.ndarray:
        return np.array([s in segments for s in self.segments], dtype=bool)


@dataclass
class AttentionWeights:
    w: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        self.w, self.w_q, self.w_k, self.w_v = (
            np.asarray(m, dtype=float) for m in (self.w, self.w_q, self.w_k, self.w_v)
        )
        d = self.w.shape[0] if self.w.ndim == 2 else -1
        for name in ("w", "w_q", "w_k", "w_v"):
            m = getattr(self, name)
            if m.shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise NumericError(f"{name} has non-finite entries")

    @property
    def depth(self) -> int:
        return self.w.shape[0]

    @classmethod
    def random(cls, depth: int, rng: np.random.Generator, zero_w: bool = True) -> "AttentionWeights":
        """Gaussian projections with std 1/sqrt(depth); ``w`` is zero unless ``zero_w`` is off."""
        std = 1.0 / np.sqrt(depth)
        w = np.zeros((depth, depth)) if zero_w else rng.normal(0.0, std, (depth, depth))
        return cls(
            w=w,
            w_q=rng.normal(0.0, std, (depth, depth)),
            w_k=rng.normal(0.0, std, (depth, depth)),
            w_v=rng.normal(0.0, std, (depth, depth)),
        )


@dataclass
class ModelConfig:
    n_layers: int = 1
    depth: int = 8
    kernel: str = "identity"
    scale: Optional[float] = None
    seed: int = 1987

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValidationError("n_layers must be >= 1")
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")
        if self.scale is None:
            self.scale = 1.0 / np.sqrt(self.depth)
        if not self.scale > 0:
            raise ValidationError("scale must be > 0")


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite input")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def attention_weights(q: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    """Row-stochastic attention matrix ``softmax(q @ k.T * scale)``."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    k = np.atleast_2d(np.asarray(k, dtype=float))
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q and k column counts differ: {q.shape[1]} vs {k.shape[1]}")
    if not scale > 0:
        raise ValidationError("scale must be > 0")
    _check_finite(q, k)
    return softmax(q @ k.T * scale, axis=1)


def self_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    v = np.atleast_2d(np.asarray(v, dtype=float))
    k2 = np.atleast_2d(np.asarray(k, dtype=float))
    if k2.shape[0] != v.shape[0]:
        raise ShapeError(f"k and v row counts differ: {k2.shape[0]} vs {v.shape[0]}")
    _check_finite(v)
    return attention_weights(q, k2, scale) @ v


def embedding_table(vocab_size: int, depth: int, seed: int) -> np.ndarray:
    # Drawn row-major so a larger table extends a smaller one with the same seed.
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / np.sqrt(depth), size=(vocab_size, depth))


def embed(seq: TokenSequence, config: ModelConfig) -> np.ndarray:
    if len(seq) == 0:
        raise EmptyInputError("empty token sequence")
    if seq.embeddings is not None:
        if seq.embeddings.shape[1] != config.depth:
            raise ShapeError(f"embedding width {seq.embeddings.shape[1]} != depth {config.depth}")
        return seq.embeddings
    if min(seq.tokens) < 0:
        raise ValidationError("token ids must be non-negative")
    table = embedding_table(max(seq.tokens) + 1, config.depth, config.seed)
    return table[np.asarray(seq.tokens)]


def forward(
    seq: TokenSequence, weights: Sequence[AttentionWeights], config: ModelConfig
) -> list[np.ndarray]:
    """Run ``config.n_layers`` attention layers and return every layer's output.

    Layer ``l`` reads layer ``l-1``'s output (the embedded input for the first
    layer). When fewer weight sets than layers are given, the last one is reused.
    """
    if len(seq) == 0:
        raise EmptyInputError("empty token sequence")
    if not weights:
        raise EmptyInputError("no attention weights supplied")
    h = embed(seq, config)
    outputs = []
    for layer in range(config.n_layers):
        wt = weights[min(layer, len(weights) - 1)]
        if wt.depth != h.shape[1]:
            raise ShapeError(f"layer {layer}: weight depth {wt.depth} != input width {h.shape[1]}")
        h = self_attention(h @ wt.w_q.T, h @ wt.w_k.T, h @ wt.w_v.T, config.scale)
        outputs.append(h)
    return outputs


def decode_argmax(logits) -> int:
    logits = np.asarray(logits, dtype=float).ravel()
    if logits.size == 0:
        raise EmptyInputError("empty logits")
    _check_finite(logits)
    # np.argmax returns the first maximal index, i.e. lowest-index tie-break.
    return int(np.argmax(logits))
