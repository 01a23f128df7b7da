"""Linear mixed-effect models, Nakagawa R^2, linear probes and the
high-dimensional mixed representation map.

The LMM is ``y = X beta + Z_g u_g + eps`` with independent random effects
``u_g ~ N(0, diag(tau2))`` per group and ``eps ~ N(0, sigma2)``. It is fitted by
maximum likelihood, profiling out ``beta`` and ``sigma2`` so only the variance
ratios ``theta = tau2 / sigma2`` are searched numerically.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import (
    DegenerateLabelError,
    DegenerateVarianceError,
    DomainError,
    InputError,
    RankError,
    ShapeError,
)
from .stats import roc_auc

RIDGE = 1e-6
LOG_THETA_BOUNDS = (-25.0, 25.0)


@dataclass
class DesignMatrix:
    fixed: np.ndarray
    group_ids: np.ndarray
    random: np.ndarray
    fixed_names: Optional[list] = None
    random_names: Optional[list] = None
    group_levels: Optional[list] = None

    def __post_init__(self):
        self.fixed = np.asarray(self.fixed, dtype=float)
        if self.fixed.ndim == 1:
            self.fixed = self.fixed[:, None]
        n = self.fixed.shape[0]
        self.group_ids = np.asarray(self.group_ids, dtype=int)
        if self.random is None:
            self.random = np.zeros((n, 0))
        self.random = np.asarray(self.random, dtype=float)
        if self.random.ndim == 1:
            self.random = self.random[:, None]
        if self.group_ids.shape != (n,) or self.random.shape[0] != n:
            raise ShapeError("fixed, group_ids and random must share the row count")
        if n and (self.group_ids.min() < 0 or set(np.unique(self.group_ids)) != set(range(self.n_groups))):
            raise ShapeError("group ids must be dense in [0, G)")
        if self.fixed_names is None:
            self.fixed_names = [f"x{j}" for j in range(self.fixed.shape[1])]
        if self.random_names is None:
            self.random_names = [f"z{j}" for j in range(self.random.shape[1])]

    @property
    def n_groups(self) -> int:
        return int(self.group_ids.max()) + 1 if self.group_ids.size else 0


def encode_groups(labels: Sequence) -> tuple[np.ndarray, list]:
    """Map arbitrary group labels to dense integer ids (levels sorted)."""
    levels = sorted(set(labels), key=lambda v: (str(type(v)), v))
    lookup = {v: i for i, v in enumerate(levels)}
    return np.array([lookup[v] for v in labels], dtype=int), levels


@dataclass
class LmmFit:
    beta: np.ndarray
    u: np.ndarray
    tau2: np.ndarray
    sigma2: float
    loglik: float
    converged: bool
    fixed_names: list = field(default_factory=list)
    random_names: list = field(default_factory=list)
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta],
            "fixed_names": list(self.fixed_names),
            "u": [[float(x) for x in row] for row in self.u],
            "random_names": list(self.random_names),
            "tau2": [float(t) for t in self.tau2],
            "sigma2": float(self.sigma2),
            "loglik": float(self.loglik),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
        }


@dataclass(frozen=True)
class R2Report:
    marginal: float
    conditional: float


class _GroupStats:
    """Per-group cross products so each likelihood evaluation is O(G q^3)."""

    def __init__(self, y: np.ndarray, design: DesignMatrix):
        X, Z, g = design.fixed, design.random, design.group_ids
        self.n = y.size
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        self.groups = []
        for j in range(design.n_groups):
            m = g == j
            Xg, Zg, yg = X[m], Z[m], y[m]
            self.groups.append((Zg.T @ Zg, Zg.T @ Xg, Zg.T @ yg))

    def profile(self, theta: np.ndarray):
        """Return ``(loglik, beta, sigma2)`` at variance ratios ``theta``."""
        L = np.sqrt(theta)
        XVX = self.XtX.copy()
        XVy = self.Xty.copy()
        yVy = self.yty
        logdet = 0.0
        q = theta.size
        for ZtZ, ZtX, Zty in self.groups:
            M = np.eye(q) + (L[:, None] * ZtZ) * L[None, :]
            cf = np.linalg.cholesky(M)
            logdet += 2.0 * np.sum(np.log(np.diag(cf)))
            A = np.linalg.solve(cf, L[:, None] * ZtX)
            b = np.linalg.solve(cf, L * Zty)
            XVX -= A.T @ A
            XVy -= A.T @ b
            yVy -= float(b @ b)
        try:
            beta = np.linalg.solve(XVX, XVy)
        except np.linalg.LinAlgError as exc:
            raise RankError("singular fixed-effect system") from exc
        rVr = yVy - 2.0 * float(beta @ XVy) + float(beta @ XVX @ beta)
        sigma2 = max(rVr / self.n, 1e-300)
        loglik = -0.5 * self.n * (np.log(2 * np.pi * sigma2) + 1.0) - 0.5 * logdet
        return float(loglik), beta, sigma2


def _ols(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.linalg.lstsq(X, y, rcond=None)[0]


def fit_lmm(y, design: DesignMatrix, max_iter: int = 200, tol: float = 1e-8) -> LmmFit:
    """Maximum-likelihood LMM fit by coordinate-wise profiled search.

    Each variance ratio is optimized in log space with bounded Brent search
    and compared against the boundary ``theta_j = 0``. Sweeps stop once the
    log-likelihood changes by less than ``tol``.
    """
    y = np.asarray(y, dtype=float).ravel()
    X, Z = design.fixed, design.random
    n, p = X.shape
    q = Z.shape[1]
    if y.size != n:
        raise ShapeError(f"y has {y.size} rows, design has {n}")
    if n <= p + q:
        raise InputError(f"need n > p + q, got n={n}, p={p}, q={q}")
    if np.linalg.matrix_rank(X) < p:
        raise RankError("fixed-effect design is rank deficient")
    G = design.n_groups

    if q == 0:
        beta = _ols(X, y)
        r = y - X @ beta
        sigma2 = max(float(r @ r) / n, 1e-300)
        loglik = -0.5 * n * (np.log(2 * np.pi * sigma2) + 1.0)
        return LmmFit(beta, np.zeros((G, 0)), np.zeros(0), sigma2, loglik, True,
                      list(design.fixed_names), list(design.random_names), 0)
    if G < 2:
        raise InputError("need at least two groups")

    st = _GroupStats(y, design)
    theta = np.ones(q)
    ll, _, _ = st.profile(theta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prev = ll
        for j in range(q):
            def neg(s, j=j):
                t = theta.copy()
                t[j] = np.exp(s)
                return -st.profile(t)[0]

            res = minimize_scalar(neg, bounds=LOG_THETA_BOUNDS, method="bounded",
                                  options={"xatol": 1e-10, "maxiter": 500})
            cand = theta.copy()
            cand[j] = np.exp(res.x)
            zero = theta.copy()
            zero[j] = 0.0
            ll_cand, ll_zero = -res.fun, st.profile(zero)[0]
            # the boundary wins ties so absent effects report tau2 = 0
            if ll_zero >= ll_cand - 1e-12:
                theta, ll = zero, ll_zero
            else:
                theta, ll = cand, ll_cand
        if abs(ll - prev) < tol:
            converged = True
            break

    ll, beta, sigma2 = st.profile(theta)
    L = np.sqrt(theta)
    u = np.zeros((G, q))
    for j, (ZtZ, ZtX, Zty) in enumerate(st.groups):
        Ztr = Zty - ZtX @ beta
        M = np.eye(q) + (L[:, None] * ZtZ) * L[None, :]
        u[j] = L * np.linalg.solve(M, L * Ztr)
    return LmmFit(
        beta=beta, u=u, tau2=theta * sigma2, sigma2=sigma2, loglik=ll, converged=converged,
        fixed_names=list(design.fixed_names), random_names=list(design.random_names), iterations=it,
    )


def r2_from_components(var_fixed: float, var_random: float, sigma2: float) -> R2Report:
    total = var_fixed + var_random + sigma2
    if total <= 0:
        raise DegenerateVarianceError("variance components sum to zero")
    return R2Report(marginal=var_fixed / total, conditional=(var_fixed + var_random) / total)


def nakagawa_r2(fit: LmmFit, design: DesignMatrix) -> R2Report:
    """Marginal and conditional R^2 with the random variance taken as ``sum(tau2)``."""
    if not fit.converged:
        warnings.warn("computing R^2 from a fit that did not converge", RuntimeWarning)
    var_fixed = float(np.var(design.fixed @ fit.beta))
    return r2_from_components(var_fixed, float(np.sum(fit.tau2)), float(fit.sigma2))


def fit_accuracy_model(acc, b, e, model_id, interact: bool = False) -> LmmFit:
    """Accuracy model: intercept and format bias ``b`` fixed, example presence
    ``e`` as a random slope per model; ``interact`` adds the ``b*e`` column."""
    acc = np.asarray(acc, dtype=float)
    b = np.asarray(b, dtype=float)
    e = np.asarray(e, dtype=float)
    if not (acc.size == b.size == e.size == len(model_id)):
        raise ShapeError("acc, b, e and model_id must have equal length")
    if np.any((acc < 0) | (acc > 1)):
        raise DomainError("accuracies must lie in [0, 1]")
    cols = [np.ones_like(b), b]
    names = ["intercept", "b"]
    if interact:
        cols.append(b * e)
        names.append("b:e")
    groups, levels = encode_groups(list(model_id))
    design = DesignMatrix(np.column_stack(cols), groups, e[:, None],
                          fixed_names=names, random_names=["e"], group_levels=levels)
    return fit_lmm(acc, design)


def ridge_fit(X: np.ndarray, Y: np.ndarray, ridge: float):
    """Ridge fit with an unpenalized intercept; returns ``(W, w0)`` with ``Y ~ X W + w0``."""
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - xm, Y - ym
    A = Xc.T @ Xc
    if ridge == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
        raise RankError("design is rank deficient and no ridge penalty is set")
    W = np.linalg.solve(A + ridge * np.eye(A.shape[0]), Xc.T @ Yc)
    return W, ym - xm @ W


def r2_score(y_true, y_pred) -> float:
    """Pooled coefficient of determination over all output columns."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    ss_tot = float(np.sum((y_true - y_true.mean(axis=0)) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return 1.0 - ss_res / ss_tot


class ProbeFit(NamedTuple):
    weights: np.ndarray
    intercept: float
    score: float


def fit_linear_probe(x, y, task: str = "regression", ridge: float = RIDGE) -> ProbeFit:
    """Least-squares linear probe; scored by R^2 (regression) or AUC (binary)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != y.size:
        raise ShapeError("x and y row counts differ")
    if task == "binary":
        if not np.all(np.isin(y, (0.0, 1.0))):
            raise DomainError("binary probe needs 0/1 labels")
        if y.min() == y.max():
            raise DegenerateLabelError("binary probe needs both classes")
    elif task != "regression":
        raise DomainError(f"unknown probe task {task!r}")
    w, w0 = ridge_fit(x, y, ridge)
    scores = x @ w + w0
    score = roc_auc(scores, y.astype(int)) if task == "binary" else r2_score(y, scores)
    return ProbeFit(w, float(w0), float(score))


def holdout_split(n: int, fraction: float = 0.2, seed: int = 1987) -> tuple[np.ndarray, np.ndarray]:
    """Seeded ``(train_idx, test_idx)`` split holding out ``fraction`` of rows."""
    if not 0 < fraction < 1:
        raise DomainError("holdout fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(n * fraction)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


class DistanceRegression(NamedTuple):
    W: np.ndarray
    W0: np.ndarray
    r2: float


def fit_distance_regression(
    d_zsl, d_icl, ridge: float = RIDGE, holdout: float = 0.2, seed: int = 1987
) -> DistanceRegression:
    """Fit ``d_icl = W d_zsl + W0`` on the training split; score on the holdout.

    ``W`` maps zero-shot distance vectors to ICL ones (shape ``out x in``).
    """
    X = np.asarray(d_zsl, dtype=float)
    Y = np.asarray(d_icl, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    Y = Y[:, None] if Y.ndim == 1 else Y
    if X.shape[0] != Y.shape[0]:
        raise ShapeError("d_zsl and d_icl need equal row counts")
    train, test = holdout_split(X.shape[0], holdout, seed)
    if ridge == 0 and train.size <= X.shape[1]:
        raise RankError("fewer training rows than columns and no ridge penalty")
    B, b0 = ridge_fit(X[train], Y[train], ridge)
    pred = X[test] @ B + b0
    return DistanceRegression(W=B.T, W0=b0, r2=r2_score(Y[test], pred))


@dataclass
class MapConfig:
    seed: int = 1987
    holdout: float = 0.2
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    weight_decay: float = 0.01
    baseline: bool = False


@dataclass
class HighDimMapFit:
    w_random: np.ndarray
    w_fixed: Optional[np.ndarray]
    index_levels: list
    train_cosine: float
    holdout_cosine: float
    baseline: bool = False

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "index_levels": [str(v) for v in self.index_levels],
            "train_cosine": float(self.train_cosine),
            "holdout_cosine": float(self.holdout_cosine),
            "w_random": self.w_random.tolist(),
            "w_fixed": None if self.w_fixed is None else self.w_fixed.tolist(),
        }


def _maps(w_random, w_fixed, idx):
    return w_random[None] if w_fixed is None else w_random[None] + w_fixed[idx]


def cosine_objective(w_random, w_fixed, h_zsl, h_icl, idx, eps: float = 1e-12):
    """Mean cosine between ``(W_random + W_fixed[idx_i]) h_zsl_i`` and ``h_icl_i``,
    with gradients ``(value, d_w_random, d_w_fixed)``."""
    M = _maps(w_random, w_fixed, idx)
    pred = np.einsum("nij,nj->ni", M, h_zsl)
    pn = np.linalg.norm(pred, axis=1) + eps
    tn = np.linalg.norm(h_icl, axis=1) + eps
    cos = np.sum(pred * h_icl, axis=1) / (pn * tn)
    n = h_zsl.shape[0]
    g_pred = (h_icl / tn[:, None] - cos[:, None] * pred / pn[:, None]) / pn[:, None] / n
    g_M = g_pred[:, :, None] * h_zsl[:, None, :]
    d_random = g_M.sum(axis=0)
    d_fixed = None
    if w_fixed is not None:
        d_fixed = np.zeros_like(w_fixed)
        np.add.at(d_fixed, idx, g_M)
    return float(cos.mean()), d_random, d_fixed


class _AdamW:
    def __init__(self, shapes, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, betas[0], betas[1], eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            p *= 1 - self.lr * self.wd
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def fit_highdim_mixed_map(h_zsl, h_icl, index: Sequence, config: Optional[MapConfig] = None) -> HighDimMapFit:
    """Fit ``h_icl ~ (W_random + W_fixed . onehot(index)) h_zsl`` by maximizing
    mean cosine similarity with AdamW on the training split.

    ``W_random`` starts at identity and ``W_fixed`` at zero. ``config.baseline``
    drops the fixed term.
    """
    config = config or MapConfig()
    h_zsl = np.asarray(h_zsl, dtype=float)
    h_icl = np.asarray(h_icl, dtype=float)
    if h_zsl.ndim != 2 or h_zsl.shape != h_icl.shape:
        raise ShapeError(f"h_zsl {h_zsl.shape} and h_icl {h_icl.shape} must be equal 2-D shapes")
    if len(index) != h_zsl.shape[0]:
        raise ShapeError("index needs one label per sample")
    idx, levels = encode_groups([str(v) for v in index])
    if len(levels) < 2 and not config.baseline:
        warnings.warn("a single index value makes the fixed term redundant with W_random", RuntimeWarning)
    n, d = h_zsl.shape
    train, test = holdout_split(n, config.holdout, config.seed)

    w_random = np.eye(d)
    w_fixed = None if config.baseline else np.zeros((len(levels), d, d))
    params = [w_random] if w_fixed is None else [w_random, w_fixed]
    opt = _AdamW([p.shape for p in params], config.lr, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        order = train[rng.permutation(train.size)]
        for start in range(0, order.size, config.batch_size):
            b = order[start:start + config.batch_size]
            _, g_r, g_f = cosine_objective(w_random, w_fixed, h_zsl[b], h_icl[b], idx[b])
            grads = [-g_r] if w_fixed is None else [-g_r, -g_f]
            opt.step(params, grads)

    train_cos = cosine_objective(w_random, w_fixed, h_zsl[train], h_icl[train], idx[train])[0]
    test_cos = cosine_objective(w_random, w_fixed, h_zsl[test], h_icl[test], idx[test])[0]
    return HighDimMapFit(w_random, w_fixed, levels, train_cos, test_cos, config.baseline)
