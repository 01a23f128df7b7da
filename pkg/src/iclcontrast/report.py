"""Render stored JSON results as the four summary CSV tables.

Every JSON file under the results directory whose ``kind`` is recognized is
used; files are read in sorted path order so output is stable.

* ``accuracy_by_subset`` -> ``table1_accuracy.csv`` (plus ATE rows)
* ``lmm_fit``            -> ``table2_mixed_effects.csv``
* ``shift_map``          -> ``table3_shift_mapping.csv``
* ``abt_summary``        -> ``table4_hateful_memes.csv``
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Optional

from .errors import InputError
from .stats import ate_macro

METRIC_COLUMNS = ["metric", "value", "ci_lo", "ci_hi", "n"]

TABLES = {
    "table1_accuracy.csv": ["subset", "setting"],
    "table2_mixed_effects.csv": ["fixed", "random"],
    "table3_shift_mapping.csv": ["source", "variable"],
    "table4_hateful_memes.csv": ["setting"],
}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def load_results(root: Path) -> list[dict]:
    out = []
    for path in sorted(Path(root).rglob("*.json")):
        try:
            data = json.loads(path.read_text())
        except ValueError:
            continue
        if isinstance(data, dict) and "kind" in data:
            data.setdefault("_source", path.relative_to(root).as_posix())
            out.append(data)
    return out


def _row(keys: list, metric: str, value, ci_lo=None, ci_hi=None, n=None) -> list:
    return keys + [metric, value, ci_lo, ci_hi, n]


def table1_rows(results: Iterable[dict]) -> list[list]:
    rows = []
    for res in results:
        if res["kind"] != "accuracy_by_subset":
            continue
        for sub in res["rows"]:
            n = sub.get("n_samples")
            for setting in ("zsl", "icl"):
                cell = sub.get(setting)
                if cell is not None:
                    rows.append(_row([sub["subset"], setting], "accuracy", cell["value"],
                                     cell.get("ci_lo"), cell.get("ci_hi"), n))
            if sub.get("zsl") and sub.get("icl"):
                scale = res.get("scale", 100.0)
                ate = ate_macro(sub["icl"]["value"], sub["zsl"]["value"], scale=scale)
                rows.append(_row([sub["subset"], "icl-zsl"], "ate_macro", ate.value, None, None, n))
    return rows


def table2_rows(results: Iterable[dict]) -> list[list]:
    rows = []
    for res in results:
        if res["kind"] != "lmm_fit":
            continue
        keys = [res.get("fixed_label", ""), res.get("random_label", "")]
        boot = res.get("r2_bootstrap", {})
        for metric in ("marginal_r2", "conditional_r2"):
            ci = boot.get(metric, {})
            rows.append(_row(list(keys), metric, res[metric], ci.get("lo"), ci.get("hi"), res.get("n")))
    return rows


def table3_rows(results: Iterable[dict]) -> list[list]:
    rows = []
    for res in results:
        if res["kind"] != "shift_map":
            continue
        src = res.get("label") or res.get("_source", "")
        for coef in res.get("bias_regression", {}).get("coefficients", []):
            rows.append(_row([src, coef["variable"]], "coef", coef["value"], coef.get("ci_lo"),
                             coef.get("ci_hi"), res.get("n")))
        for metric in ("holdout_cosine", "baseline_holdout_cosine", "distance_regression_r2"):
            if metric in res.get("summary", {}):
                rows.append(_row([src, "(fit)"], metric, res["summary"][metric], None, None, res.get("n")))
    return rows


def table4_rows(results: Iterable[dict]) -> list[list]:
    rows = []
    for res in results:
        if res["kind"] != "abt_summary":
            continue
        rows.append(_row([res["learning_type"]], "f1", res["f1"], res.get("ci_lo"), res.get("ci_hi"),
                         res.get("n_parsed")))
        rows.append(_row([res["learning_type"]], "n_errors", res.get("n_errors"), None, None, res.get("n")))
    return rows


_BUILDERS = {
    "table1_accuracy.csv": table1_rows,
    "table2_mixed_effects.csv": table2_rows,
    "table3_shift_mapping.csv": table3_rows,
    "table4_hateful_memes.csv": table4_rows,
}


def render_csv(header: list, rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def build_reports(results_dir, out_dir: Optional[Path] = None) -> dict[str, str]:
    """Render all four tables; writes them to ``out_dir`` when given."""
    if not Path(results_dir).is_dir():
        raise InputError(f"results directory {results_dir} does not exist")
    results = load_results(Path(results_dir))
    rendered = {
        name: render_csv(TABLES[name] + METRIC_COLUMNS, builder(results))
        for name, builder in _BUILDERS.items()
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in rendered.items():
            (out / name).write_text(text)
    return rendered
