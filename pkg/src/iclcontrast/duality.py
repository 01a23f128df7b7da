"""Contrastive loss, the key/value augmentation view of attention, and the
attention-as-weight-update duality.

A single attention head with a feature map ``phi`` and an output weight ``W``
reads ``sum_i v_i * (phi(k_i) . phi(q))``. The same vector comes out of one
gradient step on ``sum_i 1/2 ||W phi(k_i) - v_i||^2`` started from ``W = 0``
with unit learning rate, followed by ``W_hat @ phi(q)``. ``duality_check``
computes both routes and reports their gap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .attention import AttentionWeights, ModelConfig, TokenSequence, embed, softmax
from .errors import (
    ConfigurationError,
    DomainError,
    InputError,
    ShapeError,
    UnsupportedGradientError,
    ValidationError,
)

KERNELS = ("identity", "exp_feature", "softmax_normalized")
DISTANCES = ("squared_euclidean", "cosine")


@dataclass(frozen=True)
class KernelFn:
    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValidationError(f"unknown kernel {self.kind!r}; expected one of {KERNELS}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return x
        if self.kind == "exp_feature":
            return np.exp(x)
        return softmax(x, axis=-1)


def as_kernel(kernel) -> KernelFn:
    return kernel if isinstance(kernel, KernelFn) else KernelFn(kernel)


@dataclass
class ContrastiveConfig:
    margin: float = 1.0
    distance: str = "squared_euclidean"
    eta: float = 1.0

    def __post_init__(self):
        if self.margin < 0:
            raise ValidationError("margin must be >= 0")
        if not self.eta > 0:
            raise ValidationError("eta must be > 0")
        if self.distance not in DISTANCES:
            raise ValidationError(f"unknown distance {self.distance!r}")


@dataclass
class AugmentedPair:
    x_k: np.ndarray
    x_v: np.ndarray
    source: np.ndarray

    def __post_init__(self):
        if self.x_k.shape != self.x_v.shape:
            raise ShapeError("x_k and x_v must have equal length")


@dataclass
class WeightChain:
    w_base: np.ndarray
    w_zsl: np.ndarray
    w_icl: np.ndarray
    w_pred: np.ndarray
    w_pred_icl: np.ndarray
    deltas: dict = field(default_factory=dict)

    @property
    def shift(self) -> np.ndarray:
        """Prediction-weight change caused by the ICL example."""
        return self.w_pred_icl - self.w_pred


@dataclass
class DualityReport:
    max_abs_diff: float
    attention_output: np.ndarray
    update_output: np.ndarray
    kernel: KernelFn
    tolerance: float
    passed: bool
    exact: bool = True

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel.kind,
            "max_abs_diff": float(self.max_abs_diff),
            "tolerance": float(self.tolerance),
            "passed": bool(self.passed),
            "exact": bool(self.exact),
            "attention_output": [float(x) for x in self.attention_output],
            "update_output": [float(x) for x in self.update_output],
        }


def distance(a, b, kind: str = "squared_euclidean") -> float:
    """Pair distance: ``1/2 ||a-b||^2`` or cosine distance ``1 - cos(a, b)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if kind == "squared_euclidean":
        return float(0.5 * np.sum((a - b) ** 2))
    if kind == "cosine":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise DomainError("cosine distance undefined for zero vectors")
        return float(1.0 - a @ b / (na * nb))
    raise ValidationError(f"unknown distance {kind!r}")


def contrastive_loss(d12: float, y_c: int, config: ContrastiveConfig) -> float:
    if d12 < 0:
        raise DomainError(f"distance must be non-negative, got {d12}")
    if y_c not in (0, 1):
        raise DomainError(f"y_c must be 0 or 1, got {y_c}")
    return y_c * d12 + (1 - y_c) * max(config.margin - d12, 0.0)


def compute_augmentations(h, weights: AttentionWeights, kernel) -> AugmentedPair:
    h = np.asarray(h, dtype=float)
    if h.shape != (weights.depth,):
        raise ShapeError(f"h must have length {weights.depth}, got shape {h.shape}")
    phi = as_kernel(kernel)
    return AugmentedPair(x_k=weights.w @ phi(weights.w_k @ h), x_v=weights.w_v @ h, source=h)


def _check_pair(k: np.ndarray, v: np.ndarray, w: np.ndarray) -> None:
    if k.ndim != 1 or v.ndim != 1 or w.shape != (v.size, k.size):
        raise ShapeError(f"pair shapes k{k.shape}, v{v.shape} inconsistent with W{w.shape}")


def update_objective(w, pairs, kernel) -> float:
    """``sum 1/2 ||W phi(k) - v||^2`` over key/value pairs."""
    phi = as_kernel(kernel)
    w = np.asarray(w, dtype=float)
    total = 0.0
    for k, v in pairs:
        r = w @ phi(k) - np.asarray(v, dtype=float)
        total += 0.5 * float(r @ r)
    return total


def update_gradient(w, pairs, kernel) -> np.ndarray:
    phi = as_kernel(kernel)
    w = np.asarray(w, dtype=float)
    grad = np.zeros_like(w)
    for k, v in pairs:
        k = np.asarray(k, dtype=float)
        v = np.asarray(v, dtype=float)
        _check_pair(k, v, w)
        fk = phi(k)
        grad += np.outer(w @ fk - v, fk)
    return grad


def _require_gradient_distance(config: ContrastiveConfig) -> None:
    if config.distance != "squared_euclidean":
        raise UnsupportedGradientError(
            f"weight updates need the squared_euclidean distance, got {config.distance!r}"
        )


def cl_weight_update(pairs, w, config: ContrastiveConfig, kernel) -> np.ndarray:
    pairs = list(pairs)
    if not pairs:
        raise InputError("cl_weight_update needs at least one key/value pair")
    _require_gradient_distance(config)
    w = np.asarray(w, dtype=float)
    return w - config.eta * update_gradient(w, pairs, kernel)


def icl_predict_via_update(
    context_pairs, query_h, weights: AttentionWeights, config: ContrastiveConfig, kernel
) -> np.ndarray:
    """Prediction ``W_hat @ phi(W_Q h')`` after one update on the context pairs.

    An empty context leaves ``W`` untouched (the zero-shot path).
    """
    phi = as_kernel(kernel)
    _require_gradient_distance(config)
    query_h = np.asarray(query_h, dtype=float)
    if query_h.shape != (weights.depth,):
        raise ShapeError(f"query_h must have length {weights.depth}")
    pairs = list(context_pairs)
    w_hat = cl_weight_update(pairs, weights.w, config, phi) if pairs else weights.w
    return w_hat @ phi(weights.w_q @ query_h)


def attention_readout(keys, values, query, kernel, scale: float = 1.0) -> np.ndarray:
    """Attention output of one query over projected keys/values.

    Feature-map kernels give the unnormalized readout
    ``sum_i v_i (phi(k_i) . phi(q))``; ``softmax_normalized`` gives ordinary
    softmax attention ``sum_i softmax(K q * scale)_i v_i``.
    """
    phi = as_kernel(kernel)
    keys = np.atleast_2d(np.asarray(keys, dtype=float))
    values = np.atleast_2d(np.asarray(values, dtype=float))
    query = np.asarray(query, dtype=float)
    if keys.shape[0] == 0:
        return np.zeros(values.shape[1])
    if phi.kind == "softmax_normalized":
        return softmax(keys @ query * scale) @ values
    return values.T @ (phi(keys) @ phi(query))


def duality_check(
    seq: TokenSequence,
    weights: AttentionWeights,
    kernel,
    tolerance: float = 1e-6,
    exact: bool = True,
    model_config: Optional[ModelConfig] = None,
) -> DualityReport:
    """Compare the attention readout with the one-step update prediction.

    Context rows are every token tagged ``instruction`` or ``example``; the
    query is the last ``query`` token. With ``exact`` set, ``weights.w`` must be
    zero since the two routes coincide only there.
    """
    phi = as_kernel(kernel)
    if exact and np.any(weights.w != 0):
        raise ConfigurationError("exact duality requires the initial W to be zero")
    cfg = model_config or ModelConfig(depth=weights.depth)
    h = embed(seq, cfg)
    query_rows = np.flatnonzero(seq.mask("query"))
    if query_rows.size == 0:
        raise InputError("sequence has no query token")
    ctx = h[seq.mask("instruction", "example")]
    h_query = h[query_rows[-1]]

    keys = ctx @ weights.w_k.T
    values = ctx @ weights.w_v.T
    q = weights.w_q @ h_query
    path_a = attention_readout(keys, values, q, phi)
    if weights.w.any() and phi.kind != "softmax_normalized":
        # Nonzero W contributes its zero-shot readout on the attention side.
        path_a = path_a + weights.w @ phi(q)
    path_b = icl_predict_via_update(list(zip(keys, values)), h_query, weights, ContrastiveConfig(eta=1.0), phi)
    diff = float(np.max(np.abs(path_a - path_b))) if path_a.size else 0.0
    return DualityReport(
        max_abs_diff=diff,
        attention_output=path_a,
        update_output=path_b,
        kernel=phi,
        tolerance=tolerance,
        passed=diff <= tolerance,
        exact=exact and phi.kind != "softmax_normalized",
    )


def random_instance(
    rng: np.random.Generator, max_dim: int = 16, max_context: int = 8, context_len: Optional[int] = None
) -> tuple[TokenSequence, AttentionWeights]:
    """Random sequence (context + one query token) and zero-``W`` weights."""
    d = int(rng.integers(1, max_dim + 1))
    n_ctx = int(rng.integers(0, max_context + 1)) if context_len is None else context_len
    weights = AttentionWeights.random(d, rng)
    emb = rng.normal(0.0, 1.0, size=(n_ctx + 1, d))
    segs = ["example"] * n_ctx + ["query"]
    return TokenSequence(tokens=list(range(n_ctx + 1)), segments=segs, embeddings=emb), weights


def duality_sweep(
    trials: int = 100,
    kernel="identity",
    tolerance: float = 1e-6,
    seed: int = 1987,
    max_dim: int = 16,
    max_context: int = 8,
) -> dict:
    """Run ``duality_check`` on ``trials`` random instances and summarize."""
    rng = np.random.default_rng(seed)
    phi = as_kernel(kernel)
    diffs = []
    for _ in range(trials):
        seq, weights = random_instance(rng, max_dim, max_context)
        diffs.append(duality_check(seq, weights, phi, tolerance).max_abs_diff)
    worst = max(diffs) if diffs else 0.0
    return {
        "kernel": phi.kind,
        "trials": trials,
        "seed": seed,
        "tolerance": tolerance,
        "max_abs_diff": worst,
        "mean_abs_diff": float(np.mean(diffs)) if diffs else 0.0,
        "n_failed": int(sum(d > tolerance for d in diffs)),
        "passed": worst <= tolerance,
        "exact": phi.kind != "softmax_normalized",
    }


def representational_shift(k_icl, v_zsl, w, config: ContrastiveConfig, kernel) -> np.ndarray:
    """``eta * (W phi(k_icl) - v_zsl) phi(k_icl)^T``."""
    _require_gradient_distance(config)
    return config.eta * update_gradient(w, [(k_icl, v_zsl)], kernel)


def weight_chain(
    segments: Mapping[str, np.ndarray],
    weights: AttentionWeights,
    config: ContrastiveConfig,
    kernel,
    atol: float = 1e-10,
) -> WeightChain:
    """Build the zero-shot and ICL weight chains from segment representations.

    ``segments`` maps ``instruction``, ``zsl`` and ``prediction`` (required) and
    ``icl`` (optional) to representation vectors. Keys are ``W_K h`` and values
    ``W_V h``. Every delta is taken at the base weight, and the instruction
    delta is shared by both chains, so the prediction shift equals the
    descent step ``-delta(icl, zsl)``.
    """
    missing = [s for s in ("instruction", "zsl", "prediction") if s not in segments]
    if missing:
        raise InputError(f"missing segments: {missing}")
    w = weights.w

    def kv(name):
        h = np.asarray(segments[name], dtype=float)
        if h.shape != (weights.depth,):
            raise ShapeError(f"segment {name!r} must have length {weights.depth}")
        return weights.w_k @ h, weights.w_v @ h

    k_inst, _ = kv("instruction")
    k_zsl, v_zsl = kv("zsl")
    _, v_pred = kv("prediction")

    deltas = {
        ("instruction", "zsl"): representational_shift(k_inst, v_zsl, w, config, kernel),
        ("zsl", "prediction"): representational_shift(k_zsl, v_pred, w, config, kernel),
    }
    w_zsl = w - deltas[("instruction", "zsl")]
    w_pred = w_zsl - deltas[("zsl", "prediction")]
    if "icl" not in segments or segments["icl"] is None:
        return WeightChain(w, w_zsl, w_zsl.copy(), w_pred, w_pred.copy(), deltas)

    k_icl, _ = kv("icl")
    deltas[("icl", "zsl")] = representational_shift(k_icl, v_zsl, w, config, kernel)
    # equal-instruction assumption: the (instruction, icl) delta is the (instruction, zsl) one
    deltas[("instruction", "icl")] = deltas[("instruction", "zsl")]
    w_icl = w - deltas[("instruction", "icl")] - deltas[("icl", "zsl")]
    w_pred_icl = w_icl - deltas[("zsl", "prediction")]
    chain = WeightChain(w, w_zsl, w_icl, w_pred, w_pred_icl, deltas)
    if not np.allclose(chain.shift, -deltas[("icl", "zsl")], rtol=0.0, atol=atol):
        raise ValidationError("prediction shift does not match the example-task delta")
    return chain
