"""Zero-shot, one-shot ICL and anchored-by-text (AbT) hateful-meme runs.

AbT asks the model for a caption that fits the query image, keeps that reply
as a benign anchor in the conversation, then asks whether the dataset caption
is hateful or benign in comparison.
"""

from __future__ import annotations

import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .client import ChatClient, ImageSlot
from .errors import ClientError, ExperimentError, GenerationError, InputError, ValidationError
from .mixed_effects import fit_linear_probe
from .selection import Bm25Index, CorpusEntry, select_one_shot
from .stats import BootstrapResult, bootstrap_ci, f1_score

LEARNING_TYPES = ("zsl", "icl", "abt")

SYSTEM_PROMPT = (
    "You are a helpful language and vision assistant. You are able to understand the visual "
    "content that the user provides, and assist the user with a variety of tasks using natural language."
)
CAPTION_REQUEST = "Give me one caption that fits with this image."
QUESTION = "Is the following caption hateful or benign? Answer with a single word."
ABT_QUESTION = "In comparison with that caption, is the following caption hateful or benign? Answer with a single word."
LABEL_WORDS = {0: "benign", 1: "hateful"}
ANSWERS = {"benign": 0, "hateful": 1}


@dataclass
class Meme:
    id: str
    image_ref: str
    text: str
    label: Optional[int] = None

    def __post_init__(self):
        if not self.image_ref:
            raise ValidationError(f"meme {self.id}: image_ref must be non-empty")
        if self.label is not None and self.label not in (0, 1):
            raise ValidationError(f"meme {self.id}: label must be 0 or 1")

    def as_entry(self) -> CorpusEntry:
        return CorpusEntry(id=self.id, text=self.text, label=self.label, meta={"img": self.image_ref})


@dataclass
class PromptScript:
    turns: list
    learning_type: str

    @property
    def image_slots(self) -> list[ImageSlot]:
        return [p for _, parts in self.turns for p in parts if isinstance(p, ImageSlot)]


@dataclass
class RunRecord:
    meme_id: str
    learning_type: str
    raw_reply: str = ""
    parsed_label: Optional[int] = None
    anchor_text: Optional[str] = None
    examples_used: list = field(default_factory=list)
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "meme_id": self.meme_id,
            "learning_type": self.learning_type,
            "anchor_text": self.anchor_text,
            "raw_reply": self.raw_reply,
            "parsed_label": self.parsed_label,
            "examples_used": list(self.examples_used),
            "error": self.error,
        }


def _question_turn(meme: Meme, question: str = QUESTION, with_image: bool = True) -> tuple:
    parts = [ImageSlot(meme.image_ref)] if with_image else []
    return ("user", parts + [f"{question}\n{meme.text}"])


def caption_script(meme: Meme) -> PromptScript:
    """First AbT round: the caption request for the query image."""
    return PromptScript(
        turns=[("system", [SYSTEM_PROMPT]), ("user", [ImageSlot(meme.image_ref), CAPTION_REQUEST])],
        learning_type="abt",
    )


def build_prompt(
    lt: str,
    meme: Meme,
    examples: Optional[tuple[Meme, Meme]] = None,
    anchor: Optional[str] = None,
    benign_first: bool = True,
) -> PromptScript:
    """Prompt script for one learning type.

    ``examples`` is a ``(benign, hateful)`` pair rendered as prior turns with
    their gold answers; ``anchor`` is the generated caption for AbT.
    """
    if lt not in LEARNING_TYPES:
        raise InputError(f"unknown learning type {lt!r}")
    system = ("system", [SYSTEM_PROMPT])
    if lt == "zsl":
        return PromptScript([system, _question_turn(meme)], "zsl")
    if lt == "icl":
        if not examples or len(examples) != 2:
            raise InputError("icl prompts need a (benign, hateful) example pair")
        ordered = list(examples) if benign_first else list(examples)[::-1]
        turns = [system]
        for ex in ordered:
            if ex.label not in (0, 1):
                raise InputError(f"example {ex.id} has no gold label")
            turns.append(_question_turn(ex))
            turns.append(("assistant", [LABEL_WORDS[ex.label]]))
        turns.append(_question_turn(meme))
        return PromptScript(turns, "icl")
    if not anchor:
        raise InputError("abt prompts need a generated anchor caption")
    turns = caption_script(meme).turns + [
        ("assistant", [anchor]),
        _question_turn(meme, ABT_QUESTION, with_image=False),
    ]
    return PromptScript(turns, "abt")


_STRIP = string.whitespace + "\"'`“”‘’"


def generate_anchor(meme: Meme, client: ChatClient, max_tokens: int = 64) -> str:
    """Greedy (temperature 0) caption for the query image, quotes stripped."""
    text, _ = client.chat(caption_script(meme), temperature=0.0, max_tokens=max_tokens)
    anchor = text.strip(_STRIP)
    if not anchor:
        raise GenerationError(f"empty anchor caption for meme {meme.id}")
    return anchor


def parse_answer(reply: str) -> Optional[int]:
    """0/1 when the reply's first word is exactly benign/hateful, else None."""
    words = reply.strip().lower().split()
    if not words:
        return None
    return ANSWERS.get(words[0].strip(string.punctuation + "\"'`*"))


def classify(
    meme: Meme,
    lt: str,
    client: ChatClient,
    examples: Optional[tuple[Meme, Meme]] = None,
    anchor: Optional[str] = None,
    benign_first: bool = True,
    max_tokens: int = 16,
) -> RunRecord:
    record = RunRecord(meme_id=meme.id, learning_type=lt)
    if examples:
        record.examples_used = [e.id for e in examples]
    try:
        if lt == "abt" and anchor is None:
            anchor = generate_anchor(meme, client)
        if lt == "abt":
            record.anchor_text = anchor
        script = build_prompt(lt, meme, examples, anchor, benign_first)
        reply, _ = client.chat(script, temperature=0.0, max_tokens=max_tokens)
    except (GenerationError, ClientError) as exc:
        record.error = f"{type(exc).__name__}: {exc}"
        return record
    record.raw_reply = reply
    record.parsed_label = parse_answer(reply)
    if record.parsed_label is None:
        record.error = "ParseError: reply is neither 'benign' nor 'hateful'"
    return record


@dataclass
class ExperimentSettings:
    train: Sequence[Meme] = ()
    max_concurrency: int = 1
    bootstrap_n: int = 1000
    seed: int = 1987
    benign_first: bool = True
    max_tokens: int = 16


def _f1_or_nan(rows: np.ndarray) -> float:
    if not rows[:, 1].any():
        return float("nan")
    return f1_score(rows[:, 0].astype(int), rows[:, 1].astype(int))


def run_experiment(
    dataset: Sequence[Meme], lt: str, client: ChatClient, config: Optional[ExperimentSettings] = None
) -> tuple[list[RunRecord], BootstrapResult]:
    """Classify every meme, then bootstrap the F1 of the parsed records.

    Records keep dataset order. Unparsed replies stay in the records as
    errors and are excluded from F1.
    """
    config = config or ExperimentSettings()
    if lt not in LEARNING_TYPES:
        raise InputError(f"unknown learning type {lt!r}")
    if any(m.label is None for m in dataset):
        raise InputError("every meme needs a gold label")
    examples: dict[str, tuple[Meme, Meme]] = {}
    if lt == "icl":
        train = list(config.train)
        by_id = {m.id: m for m in train}
        index = Bm25Index.build([m.as_entry() for m in train])
        entries = [m.as_entry() for m in train]
        for meme in dataset:
            benign, hateful = select_one_shot(meme.text, entries, index)
            examples[meme.id] = (by_id[benign.id], by_id[hateful.id])

    def run_one(meme: Meme) -> RunRecord:
        return classify(meme, lt, client, examples.get(meme.id), benign_first=config.benign_first,
                        max_tokens=config.max_tokens)

    with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
        records = list(pool.map(run_one, dataset))

    gold = {m.id: m.label for m in dataset}
    parsed = [(r.parsed_label, gold[r.meme_id]) for r in records if r.parsed_label is not None]
    if not parsed:
        raise ExperimentError("no reply could be parsed into a label")
    rows = np.array(parsed, dtype=float)
    ci = bootstrap_ci(rows, _f1_or_nan, n=config.bootstrap_n, seed=config.seed)
    return records, ci


def summarize(records: Sequence[RunRecord], f1_ci: BootstrapResult, lt: str) -> dict:
    n_err = sum(r.error is not None for r in records)
    return {
        "kind": "abt_summary",
        "learning_type": lt,
        "n": len(records),
        "n_parsed": len(records) - n_err,
        "n_errors": n_err,
        "f1": f1_ci.point,
        "ci_lo": f1_ci.lo,
        "ci_hi": f1_ci.hi,
        "bootstrap": f1_ci.to_dict(),
    }


@dataclass
class DimensionWeights:
    weights: np.ndarray
    intercept: float
    intercepts: np.ndarray
    std_errors: np.ndarray
    constant_dims: list
    auc: float


@dataclass
class WeightDiffReport:
    per_dim_weights: dict = field(default_factory=dict)

    @property
    def auc_by_lt(self) -> dict:
        return {lt: w.auc for lt, w in self.per_dim_weights.items()}

    @property
    def diffs(self) -> dict:
        return {(a, b): weight_difference(self, a, b)
                for a in self.per_dim_weights for b in self.per_dim_weights if a != b}

    def to_dict(self) -> dict:
        return {
            "per_dim_weights": {
                lt: {"weights": w.weights.tolist(), "intercept": w.intercept,
                     "constant_dims": list(w.constant_dims), "auc": w.auc}
                for lt, w in sorted(self.per_dim_weights.items())
            },
            "diffs": {
                f"{a}-{b}": {"weights": dw.tolist(), "intercept": d0}
                for (a, b), (dw, d0) in sorted(self.diffs.items())
            },
        }


def per_dimension_weights(distances, labels, lt: str, report: Optional[WeightDiffReport] = None) -> DimensionWeights:
    """Univariate least-squares fit ``y = w_j d_j + b_j`` for every dimension.

    The scalar intercept and the AUC come from the joint linear probe over all
    dimensions. Constant dimensions get weight 0 and are listed in
    ``constant_dims``.
    """
    d = np.asarray(distances, dtype=float)
    y = np.asarray(labels, dtype=float).ravel()
    if d.ndim != 2 or d.shape[0] != y.size:
        raise InputError("distances must be n x d with one label per row")
    if lt not in LEARNING_TYPES:
        raise InputError(f"unknown learning type {lt!r}")
    n = y.size
    dc = d - d.mean(axis=0)
    yc = y - y.mean()
    ss = np.sum(dc * dc, axis=0)
    const = ss <= 1e-12 * np.maximum(1.0, np.sum(d * d, axis=0))
    w = np.where(const, 0.0, (dc.T @ yc) / np.where(const, 1.0, ss))
    b = y.mean() - w * d.mean(axis=0)
    resid = yc[:, None] - dc * w
    dof = max(n - 2, 1)
    se = np.where(const, np.inf, np.sqrt(np.sum(resid**2, axis=0) / dof / np.where(const, 1.0, ss)))
    if np.all(np.isin(y, (0.0, 1.0))) and 0 < y.sum() < n:
        probe = fit_linear_probe(d, y, task="binary")
        intercept, auc = probe.intercept, probe.score
    else:
        probe = fit_linear_probe(d, y, task="regression")
        intercept, auc = probe.intercept, float("nan")
    entry = DimensionWeights(w, float(intercept), b, se, [int(j) for j in np.flatnonzero(const)], float(auc))
    if report is not None:
        report.per_dim_weights[lt] = entry
    return entry


def weight_difference(report: WeightDiffReport, lt_a: str, lt_b: str) -> tuple[np.ndarray, float]:
    try:
        a, b = report.per_dim_weights[lt_a], report.per_dim_weights[lt_b]
    except KeyError as exc:
        raise KeyError(f"learning type {exc.args[0]!r} not in report") from None
    return a.weights - b.weights, a.intercept - b.intercept
