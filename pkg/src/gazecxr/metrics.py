"""ROUGE-L, accuracy and set-based DDx precision/recall, plus the results table."""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Literal, Optional, Sequence

from .extract import YnAnswer, vqa_normalize

TASKS = ("GEN", "SUM", "ERR", "DDX", "VQA")
CONDITIONS = ("no_gaze", "gaze")
METRIC_NAMES = {"GEN": "R-L", "SUM": "R-L", "ERR": "Acc", "DDX": "F1", "VQA": "Acc"}

_SPLIT = re.compile(r"[^0-9a-z]+")


class EmptySample(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return [t for t in _SPLIT.split(text.lower()) if t]


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


def rouge_l(candidate: str, reference: str) -> RougeScore:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return RougeScore(0.0, 0.0, 0.0)
    lcs = lcs_length(cand, ref)
    p, r = lcs / len(cand), lcs / len(ref)
    return RougeScore(p, r, _f1(p, r))


@dataclass(frozen=True)
class DdxScore:
    n_correct: int
    n_predicted: int
    n_gold: int
    precision: float
    recall: float
    f1: float


def _ddx_from_counts(n_correct: int, n_predicted: int, n_gold: int) -> DdxScore:
    p = n_correct / n_predicted if n_predicted else 0.0
    r = n_correct / n_gold if n_gold else 0.0
    return DdxScore(n_correct, n_predicted, n_gold, p, r, _f1(p, r))


def ddx_score(
    per_study: Iterable[tuple[set, set]], average: Literal["micro", "macro"] = "micro"
) -> DdxScore:
    """Corpus-level (micro) precision/recall over predicted vs gold code sets.

    ``average="macro"`` averages per-study P/R instead and derives F1 from
    those means; counts are still corpus totals.
    """
    pairs = [(set(p), set(g)) for p, g in per_study]
    correct = sum(len(p & g) for p, g in pairs)
    predicted = sum(len(p) for p, _ in pairs)
    gold = sum(len(g) for _, g in pairs)
    if average == "micro":
        return _ddx_from_counts(correct, predicted, gold)
    if average != "macro":
        raise ValueError(f"unknown average {average!r}")
    if not pairs:
        return _ddx_from_counts(0, 0, 0)
    per = [_ddx_from_counts(len(p & g), len(p), len(g)) for p, g in pairs]
    mp = sum(s.precision for s in per) / len(per)
    mr = sum(s.recall for s in per) / len(per)
    return DdxScore(correct, predicted, gold, mp, mr, _f1(mp, mr))


def _equal(extracted, gold) -> bool:
    if isinstance(extracted, YnAnswer):
        return extracted.matches(gold)
    return vqa_normalize(str(extracted)) == vqa_normalize(str(gold))


def accuracy(pairs: Sequence[tuple[object, str]]) -> float:
    """Fraction of (extracted, gold) pairs that agree.

    ``YnAnswer`` values are compared to ``"Y"``/``"N"`` labels; anything else
    is compared after VQA normalization.
    """
    if not pairs:
        raise EmptySample("accuracy of an empty sample is undefined")
    return sum(_equal(e, g) for e, g in pairs) / len(pairs)


# --- report -----------------------------------------------------------------------


@dataclass
class Cell:
    score: Optional[float] = None  # x100, two decimals
    n: int = 0
    n_unparseable: int = 0
    n_errors: int = 0
    skipped: bool = False
    detail: dict = field(default_factory=dict)


@dataclass
class MetricsReport:
    model_name: str
    cells: dict[str, dict[str, Cell]]
    improved: dict[str, bool]

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "tasks": {
                task: {
                    "metric": METRIC_NAMES[task],
                    **{cond: asdict(cell) for cond, cell in conds.items()},
                    "gaze_improved": self.improved[task],
                }
                for task, conds in self.cells.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_markdown(self) -> str:
        tasks = list(self.cells)
        head = "| Model | " + " | ".join(f"{t} ({METRIC_NAMES[t]}) No G | {t} G" for t in tasks) + " |"
        sep = "|---|" + "---|---|" * len(tasks)
        row = [self.model_name]
        for t in tasks:
            for cond in CONDITIONS:
                cell = self.cells[t][cond]
                text = "skipped" if cell.skipped else f"{cell.score:.2f}"
                if cond == "gaze" and self.improved[t]:
                    text = f"**{text}**"
                row.append(text)
        lines = [head, sep, "| " + " | ".join(row) + " |", ""]
        lines.append("| Task | Condition | n | unparseable | errors |")
        lines.append("|---|---|---|---|---|")
        for t in tasks:
            for cond in CONDITIONS:
                c = self.cells[t][cond]
                lines.append(f"| {t} | {cond} | {c.n} | {c.n_unparseable} | {c.n_errors} |")
        return "\n".join(lines) + "\n"


def as_percent(value: float) -> float:
    return round(100.0 * value, 2)


def assemble_report(
    scores: dict[str, dict[str, Optional[Cell]]],
    model_name: str = "",
    tasks: Sequence[str] = TASKS,
) -> MetricsReport:
    """Fill the task x condition matrix; absent or ``None`` cells become skipped.

    A task is flagged improved when its gaze score is strictly higher than
    the no-gaze score at two-decimal precision.
    """
    cells: dict[str, dict[str, Cell]] = {}
    improved: dict[str, bool] = {}
    for task in tasks:
        row = scores.get(task, {})
        cells[task] = {}
        for cond in CONDITIONS:
            cell = row.get(cond)
            if cell is None or cell.score is None:
                cell = Cell(skipped=True, n=cell.n if cell else 0, n_errors=cell.n_errors if cell else 0)
            else:
                cell.score = round(cell.score, 2)
            cells[task][cond] = cell
        g, ng = cells[task]["gaze"], cells[task]["no_gaze"]
        improved[task] = not g.skipped and not ng.skipped and g.score > ng.score
    return MetricsReport(model_name, cells, improved)
