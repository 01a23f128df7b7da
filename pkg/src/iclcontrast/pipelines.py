"""Multi-step analyses behind the ``fit-lmm`` and ``shift-map`` commands."""

from __future__ import annotations

import csv
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import ActivationStore, load_dumps, pool, vector_distance
from .errors import InputError, ValidationError
from .mixed_effects import (
    DesignMatrix,
    RIDGE,
    MapConfig,
    ridge_fit,
    encode_groups,
    fit_distance_regression,
    fit_highdim_mixed_map,
    fit_lmm,
    nakagawa_r2,
)
from .stats import ate_micro, bootstrap_ci


def read_table(path) -> dict[str, list[str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames:
            raise InputError(f"{path}: empty table")
        cols: dict[str, list[str]] = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name in reader.fieldnames:
                cols[name].append(row[name])
    return cols


def _numeric(cols: dict, name: str) -> np.ndarray:
    if name not in cols:
        raise InputError(f"column {name!r} not in table (have {sorted(cols)})")
    try:
        return np.array([float(v) for v in cols[name]])
    except ValueError as exc:
        raise InputError(f"column {name!r} is not numeric: {exc}") from exc


def term_column(cols: dict, term: str) -> np.ndarray:
    """Column for a model term: ``1`` (intercept), a name, or a product ``a:b``."""
    n = len(next(iter(cols.values())))
    if term == "1":
        return np.ones(n)
    out = np.ones(n)
    for part in term.split(":"):
        out = out * _numeric(cols, part)
    return out


def lmm_design(cols: dict, fixed: Sequence[str], group: str, random: Sequence[str],
               intercept: bool = True) -> DesignMatrix:
    fixed_terms = (["1"] if intercept else []) + [t for t in fixed if t != "1"]
    if group not in cols:
        raise InputError(f"group column {group!r} not in table")
    gids, levels = encode_groups(cols[group])
    return DesignMatrix(
        np.column_stack([term_column(cols, t) for t in fixed_terms]),
        gids,
        np.column_stack([term_column(cols, t) for t in random]) if random else None,
        fixed_names=["intercept" if t == "1" else t for t in fixed_terms],
        random_names=["intercept" if t == "1" else t for t in random],
        group_levels=levels,
    )


def run_fit_lmm(cols: dict, y: str, fixed: Sequence[str], group: str, random: Sequence[str],
                intercept: bool = True, bootstrap_n: int = 0, seed: int = 1987,
                fixed_label: Optional[str] = None, random_label: Optional[str] = None) -> dict:
    yv = _numeric(cols, y)
    design = lmm_design(cols, fixed, group, random, intercept)
    fit = fit_lmm(yv, design)
    r2 = nakagawa_r2(fit, design)
    result = {
        "kind": "lmm_fit",
        "fixed_label": fixed_label or "+".join(fixed) or "1",
        "random_label": random_label or "+".join(random) or "-",
        "group": group,
        "group_levels": [str(v) for v in design.group_levels],
        "n": int(yv.size),
        "fit": fit.to_dict(),
        "marginal_r2": r2.marginal,
        "conditional_r2": r2.conditional,
    }
    if bootstrap_n:
        rows = np.arange(yv.size)

        def stat(which):
            def f(idx):
                idx = idx.astype(int)
                sub = {k: [v[i] for i in idx] for k, v in cols.items()}
                try:
                    d = lmm_design(sub, fixed, group, random, intercept)
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore")
                        r = nakagawa_r2(fit_lmm(_numeric(sub, y), d), d)
                except (ValidationError, np.linalg.LinAlgError):
                    return float("nan")
                return getattr(r, which)
            return f

        result["r2_bootstrap"] = {
            f"{which}_r2": bootstrap_ci(rows, stat(which), n=bootstrap_n, seed=seed).to_dict()
            for which in ("marginal", "conditional")
        }
    return result


def _paired_samples(zsl: ActivationStore, icl: ActivationStore, segs: Sequence[str], layer: int) -> list[str]:
    ids = None
    for store in (zsl, icl):
        lyr = store.resolve_layer(layer)
        for seg in segs:
            have = set(store.samples(seg, lyr))
            ids = have if ids is None else ids & have
    return sorted(ids or ())


def collect_shift_inputs(zsl_manifests: Sequence, icl_manifests: Sequence, query_segment: str = "query",
                         answer_segment: str = "answer", layer: int = -1, pooling: str = "mean"):
    """Pooled representations from paired zero-shot / ICL dumps.

    Returns ``(ids, index, h_zsl_q, h_icl_q, h_zsl_a, h_icl_a, models, datasets)``.
    """
    if len(zsl_manifests) != len(icl_manifests) or not zsl_manifests:
        raise InputError("pass the same, non-zero number of zero-shot and ICL manifests")
    out = {k: [] for k in ("ids", "index", "zq", "iq", "za", "ia", "model", "dataset")}
    for zpath, ipath in zip(zsl_manifests, icl_manifests):
        zs, ic = load_dumps(zpath), load_dumps(ipath)
        if (zs.model, zs.dataset) != (ic.model, ic.dataset):
            raise InputError(f"{zpath} and {ipath} describe different (model, dataset) pairs")
        ids = _paired_samples(zs, ic, (query_segment, answer_segment), layer)
        if not ids:
            raise InputError(f"{zpath} and {ipath} share no complete samples")
        lz, li = zs.resolve_layer(layer), ic.resolve_layer(layer)
        for s in ids:
            out["ids"].append(f"{zs.model}|{zs.dataset}|{s}")
            out["index"].append(f"{zs.model}|{zs.dataset}")
            out["model"].append(zs.model)
            out["dataset"].append(zs.dataset)
            out["zq"].append(pool(zs.get(s, query_segment, lz), pooling))
            out["iq"].append(pool(ic.get(s, query_segment, li), pooling))
            out["za"].append(pool(zs.get(s, answer_segment, lz), pooling))
            out["ia"].append(pool(ic.get(s, answer_segment, li), pooling))
    for k in ("zq", "iq", "za", "ia"):
        out[k] = np.stack(out[k])
    return out


def _dummies(labels: Sequence[str], prefix: str) -> tuple[list[np.ndarray], list[str]]:
    levels = sorted(set(labels))
    cols, names = [], []
    for lvl in levels[1:]:
        cols.append(np.array([1.0 if v == lvl else 0.0 for v in labels]))
        names.append(f"{prefix}={lvl}")
    return cols, names


def _independent_columns(cols: list[np.ndarray], names: list[str]) -> tuple[list[np.ndarray], list[str]]:
    """Keep columns in order, skipping any that adds no rank (e.g. a model
    dummy that duplicates a dataset dummy)."""
    keep, kept_names = [], []
    for c, name in zip(cols, names):
        trial = keep + [c]
        if np.linalg.matrix_rank(np.column_stack(trial)) == len(trial):
            keep, kept_names = trial, kept_names + [name]
    return keep, kept_names


def bias_regression(d_icl: np.ndarray, d_zsl: np.ndarray, models: Sequence[str], datasets: Sequence[str],
                    bootstrap_n: int = 1000, seed: int = 1987, ridge: float = RIDGE) -> dict:
    """Least squares of the ICL distance on dataset/model indicators plus the
    zero-shot distance. Redundant indicators are dropped and listed."""
    dcols, dnames = _dummies(datasets, "dataset")
    mcols, mnames = _dummies(models, "model")
    n = d_icl.size
    cols, names = _independent_columns([np.ones(n)] + dcols + mcols + [d_zsl],
                                       ["(intercept)"] + dnames + mnames + ["original score"])
    dropped = [v for v in dnames + mnames + ["original score"] if v not in names]
    X = np.column_stack(cols[1:]) if len(cols) > 1 else np.zeros((n, 0))

    def coefs(idx):
        w, w0 = ridge_fit(X[idx], d_icl[idx], ridge)
        return np.concatenate([[w0], w])

    point = coefs(np.arange(n))
    out = []
    for j, name in enumerate(names):
        entry = {"variable": name, "value": float(point[j])}
        if bootstrap_n:
            ci = bootstrap_ci(np.arange(n), lambda idx, j=j: float(coefs(idx.astype(int))[j]),
                              n=bootstrap_n, seed=seed)
            entry.update(ci_lo=ci.lo, ci_hi=ci.hi)
        out.append(entry)
    return {"coefficients": out, "dropped": dropped}


def run_shift_map(zsl_manifests: Sequence, icl_manifests: Sequence, query_segment: str = "query",
                  answer_segment: str = "answer", layer: int = -1, metric: str = "cosine",
                  pooling: str = "mean", map_config: Optional[MapConfig] = None,
                  bootstrap_n: int = 1000, label: Optional[str] = None) -> dict:
    cfg = map_config or MapConfig()
    data = collect_shift_inputs(zsl_manifests, icl_manifests, query_segment, answer_segment, layer, pooling)
    fit = fit_highdim_mixed_map(data["zq"], data["iq"], data["index"], cfg)
    base_cfg = MapConfig(**{**cfg.__dict__, "baseline": True})
    base = fit_highdim_mixed_map(data["zq"], data["iq"], data["index"], base_cfg)

    d_zsl_vec = np.abs(data["zq"] - data["za"])
    d_icl_vec = np.abs(data["iq"] - data["ia"])
    reg = fit_distance_regression(d_zsl_vec, d_icl_vec, holdout=cfg.holdout, seed=cfg.seed)

    d_zsl = np.array([vector_distance(a, b, metric)[0] for a, b in zip(data["zq"], data["za"])])
    d_icl = np.array([vector_distance(a, b, metric)[0] for a, b in zip(data["iq"], data["ia"])])
    bias = bias_regression(d_icl, d_zsl, data["model"], data["dataset"], bootstrap_n, cfg.seed)
    return {
        "kind": "shift_map",
        "label": label or "",
        "n": len(data["ids"]),
        "seed": cfg.seed,
        "metric": metric,
        "summary": {
            "train_cosine": fit.train_cosine,
            "holdout_cosine": fit.holdout_cosine,
            "baseline_train_cosine": base.train_cosine,
            "baseline_holdout_cosine": base.holdout_cosine,
            "distance_regression_r2": reg.r2,
        },
        "map": fit.to_dict(),
        "baseline_map": base.to_dict(),
        "distance_regression": {"W": reg.W.tolist(), "W0": reg.W0.tolist(), "r2": reg.r2},
        "bias_regression": bias,
        "ate_micro_mean": ate_micro(d_icl, d_zsl).mean,
    }
