"""CoQA-style scoring: normalisation, EM, F1, and the O/G/E report splits.

Normalisation follows the official CoQA/SQuAD scorer: lowercase, strip
punctuation, drop the articles a/an/the as whole tokens, collapse
whitespace.  Scores are kept at full precision internally and rounded
to one decimal only for display.
"""

from __future__ import annotations

import csv
import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


class EvalError(ValueError):
    """A prediction set that cannot be scored against the given examples."""


def normalize(text: str) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def em(pred: str, gold: str) -> int:
    """Exact match after normalisation."""
    return int(normalize(pred) == normalize(gold))


def f1(pred: str, gold: str) -> float:
    """Token-level F1 over normalised tokens (multiset overlap)."""
    pred_tokens = normalize(pred).split()
    gold_tokens = normalize(gold).split()
    if not pred_tokens or not gold_tokens:
        # Both empty counts as agreement; one empty as total miss.
        return float(pred_tokens == gold_tokens)
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2.0 * precision * recall / (precision + recall)


def score_multi(pred: str, references: list[str], multi: bool = False) -> tuple[int, float]:
    """(EM, F1) against the primary reference, or the max over all of them."""
    if not references:
        raise EvalError("a prediction needs at least one reference")
    if not multi:
        return em(pred, references[0]), f1(pred, references[0])
    return (max(em(pred, ref) for ref in references),
            max(f1(pred, ref) for ref in references))


@dataclass
class Prediction:
    """One predicted answer with its gold reference texts (primary first)."""
    story_id: str
    turn_id: int
    text: str
    references: list[str]

    def __post_init__(self):
        if not self.references:
            raise EvalError(f"prediction {self.story_id}/{self.turn_id} has no references")


@dataclass
class EvalReport:
    """EM/F1 percentages overall and per answer class, plus category F1s.

    Split scores are None when the corresponding split is empty.
    ``per_category`` rows are (category, mean F1 percent, count), sorted
    by count descending.
    """
    o_em: float
    o_f1: float
    g_em: float | None
    g_f1: float | None
    e_em: float | None
    e_f1: float | None
    n_overall: int
    n_generative: int
    n_extractive: int
    per_category: list[tuple[str, float, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "o_em": self.o_em, "o_f1": self.o_f1,
            "g_em": self.g_em, "g_f1": self.g_f1,
            "e_em": self.e_em, "e_f1": self.e_f1,
            "n_overall": self.n_overall,
            "n_generative": self.n_generative,
            "n_extractive": self.n_extractive,
            "per_category": [
                {"category": c, "f1": f, "count": n} for c, f, n in self.per_category
            ],
        }

    def summary_lines(self) -> list[str]:
        def fmt(x):
            return "-" if x is None else f"{x:.1f}"

        return [
            f"O-EM {fmt(self.o_em)}  O-F1 {fmt(self.o_f1)}  (n={self.n_overall})",
            f"G-EM {fmt(self.g_em)}  G-F1 {fmt(self.g_f1)}  (n={self.n_generative})",
            f"E-EM {fmt(self.e_em)}  E-F1 {fmt(self.e_f1)}  (n={self.n_extractive})",
        ]


def _mean_pct(values: list[float]) -> float | None:
    if not values:
        return None
    return 100.0 * sum(values) / len(values)


def evaluate(predictions: list[Prediction], examples, vocab=None,
             multi: bool = False, top_k: int = 10) -> EvalReport:
    """Score predictions against their examples, split by answer class.

    Every prediction must match an example by (story_id, turn_id);
    examples without predictions are ignored.  ``vocab`` is a category
    vocabulary used for the per-category F1 breakdown (skipped if None).
    """
    from . import prompt as prompt_mod  # deferred: breaks the corpus->eval->prompt cycle

    by_key = {(ex.story_id, ex.turn.turn_id): ex for ex in examples}
    ems = {"Extractive": [], "Generative": []}
    f1s = {"Extractive": [], "Generative": []}
    cat_f1: dict[str, list[float]] = {}
    for pred in predictions:
        key = (pred.story_id, pred.turn_id)
        if key not in by_key:
            raise EvalError(f"prediction for unknown example {key[0]}/{key[1]}")
        ex = by_key[key]
        em_i, f1_i = score_multi(pred.text, pred.references, multi=multi)
        cls = ex.answer_class.value
        ems[cls].append(float(em_i))
        f1s[cls].append(f1_i)
        if vocab is not None:
            cat = prompt_mod.categorize(ex.turn.question, vocab)
            cat_f1.setdefault(cat, []).append(f1_i)

    all_em = ems["Extractive"] + ems["Generative"]
    all_f1 = f1s["Extractive"] + f1s["Generative"]
    per_category = sorted(
        ((cat, _mean_pct(vals), len(vals)) for cat, vals in cat_f1.items()),
        key=lambda row: (-row[2], row[0]),
    )[:top_k]
    return EvalReport(
        o_em=_mean_pct(all_em) if all_em else 0.0,
        o_f1=_mean_pct(all_f1) if all_f1 else 0.0,
        g_em=_mean_pct(ems["Generative"]),
        g_f1=_mean_pct(f1s["Generative"]),
        e_em=_mean_pct(ems["Extractive"]),
        e_f1=_mean_pct(f1s["Extractive"]),
        n_overall=len(all_em),
        n_generative=len(ems["Generative"]),
        n_extractive=len(ems["Extractive"]),
        per_category=per_category,
    )


def raw_baseline(examples, tighten: bool = False, multi: bool = False,
                 extra_references=None, vocab=None, top_k: int = 10) -> EvalReport:
    """Score the annotated rationale itself as the predicted answer.

    With ``tighten``, extractive rationales are first cut down to the
    answer-matching sub-span, which forces EM/F1 of 1 on that split.
    ``extra_references`` maps (story_id, turn_id) to additional gold
    texts used when ``multi`` scoring is on.
    """
    from . import corpus as corpus_mod

    extra_references = extra_references or {}
    predictions = []
    for ex in examples:
        source = corpus_mod.tighten_rationale(ex) if tighten else ex
        refs = [ex.turn.answer] + list(extra_references.get((ex.story_id, ex.turn.turn_id), []))
        predictions.append(Prediction(
            story_id=ex.story_id, turn_id=ex.turn.turn_id,
            text=source.turn.rationale, references=refs,
        ))
    return evaluate(predictions, examples, vocab=vocab, multi=multi, top_k=top_k)


def write_report(report: EvalReport, path: Path, config: dict | None = None) -> None:
    payload = report.to_dict()
    if config is not None:
        payload["config"] = config
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def write_category_csv(report: EvalReport, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "f1", "count"])
        for category, f1_value, count in report.per_category:
            writer.writerow([category, f"{f1_value:.6f}", count])
