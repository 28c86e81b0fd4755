"""Task instance construction for GEN, SUM, ERR, DDX and VQA."""
from __future__ import annotations

import enum
import hashlib
import json
import random
import re
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .extract import scan_mentions
from .lexicon import DiagnosisLexicon, load_lexicon

DEFAULT_CORRUPT_PROBABILITY = 0.7317


class TaskKind(str, enum.Enum):
    GEN = "GEN"
    SUM = "SUM"
    ERR = "ERR"
    DDX = "DDX"
    VQA = "VQA"


class TaskError(ValueError):
    pass


class MissingField(TaskError):
    pass


class EmptyGold(TaskError):
    pass


class NoSentences(TaskError):
    pass


class OverlapError(TaskError):
    def __init__(self, ids: Iterable[str]):
        self.ids = frozenset(ids)
        super().__init__(f"train/eval overlap: {sorted(self.ids)}")


@dataclass(frozen=True)
class Report:
    study_id: str
    findings: str
    impression: str = ""


@dataclass(frozen=True)
class VqaRecord:
    study_id: str
    question: str
    answer: str


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: frozenset
    eval_ids: frozenset

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        doc = json.loads(text)
        return cls(frozenset(doc.get("train_ids", [])), frozenset(doc.get("eval_ids", [])))


@dataclass(frozen=True)
class ImageRefs:
    raw: str
    overlay: str


@dataclass(frozen=True)
class TaskInstance:
    instance_id: str
    kind: TaskKind
    study_id: str
    image_ref: str
    overlay_ref: str
    prompt: str
    reference: str
    meta: dict = field(default_factory=dict, compare=False)

    def to_json(self) -> str:
        d = asdict(self)
        d["kind"] = self.kind.value
        return json.dumps(d, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "TaskInstance":
        d = json.loads(line)
        d["kind"] = TaskKind(d["kind"])
        return cls(**d)


@dataclass(frozen=True)
class PromptTemplates:
    version: str
    templates: dict

    def render(self, kind: TaskKind, **fields) -> str:
        return self.templates[kind.value].format(**fields)


@lru_cache(maxsize=None)
def _load_templates(path: Optional[str]) -> PromptTemplates:
    if path is None:
        raw = resources.files("gazecxr").joinpath("data/prompts.toml").read_text("utf-8")
    else:
        raw = Path(path).read_text("utf-8")
    doc = tomllib.loads(raw)
    missing = [k.value for k in TaskKind if "template" not in doc.get(k.value, {})]
    if missing:
        raise TaskError(f"prompt file lacks templates for {missing}")
    return PromptTemplates(str(doc.get("version", "0")), {k.value: doc[k.value]["template"] for k in TaskKind})


def load_templates(path: str | Path | None = None) -> PromptTemplates:
    return _load_templates(None if path is None else str(path))


def _require(value: str, name: str, study_id: str) -> None:
    if not value or not value.strip():
        raise MissingField(f"{study_id}: {name} is empty")


def _instance(kind, study_id, refs, prompt, reference, templates, suffix="", **meta):
    meta = {"prompt_version": templates.version, **meta}
    return TaskInstance(
        instance_id=f"{study_id}:{kind.value}{suffix}",
        kind=kind,
        study_id=study_id,
        image_ref=refs.raw,
        overlay_ref=refs.overlay,
        prompt=prompt,
        reference=reference,
        meta=meta,
    )


def build_gen(report: Report, refs: ImageRefs, templates: PromptTemplates | None = None) -> TaskInstance:
    templates = templates or load_templates()
    _require(report.findings, "findings", report.study_id)
    prompt = templates.render(TaskKind.GEN)
    return _instance(TaskKind.GEN, report.study_id, refs, prompt, report.findings, templates)


def build_sum(report: Report, refs: ImageRefs, templates: PromptTemplates | None = None) -> TaskInstance:
    templates = templates or load_templates()
    _require(report.findings, "findings", report.study_id)
    _require(report.impression, "impression", report.study_id)
    prompt = templates.render(TaskKind.SUM, findings=report.findings)
    return _instance(TaskKind.SUM, report.study_id, refs, prompt, report.impression, templates)


def build_ddx(
    study_id: str, gold_codes: Iterable[str], refs: ImageRefs, templates: PromptTemplates | None = None
) -> TaskInstance:
    templates = templates or load_templates()
    codes = sorted({c.strip() for c in gold_codes if c and c.strip()})
    if not codes:
        raise EmptyGold(f"{study_id}: no gold diagnosis codes")
    prompt = templates.render(TaskKind.DDX)
    return _instance(TaskKind.DDX, study_id, refs, prompt, ";".join(codes), templates)


def parse_ddx_reference(reference: str) -> set[str]:
    return {c for c in reference.split(";") if c}


def build_vqa(
    record: VqaRecord, refs: ImageRefs, templates: PromptTemplates | None = None, index: int = 0
) -> TaskInstance:
    templates = templates or load_templates()
    _require(record.question, "question", record.study_id)
    _require(record.answer, "answer", record.study_id)
    prompt = templates.render(TaskKind.VQA, question=record.question.strip())
    return _instance(
        TaskKind.VQA, record.study_id, refs, prompt, record.answer, templates, suffix=f":{index}"
    )


def check_split(split: DatasetSplit) -> None:
    overlap = set(split.train_ids) & set(split.eval_ids)
    if overlap:
        raise OverlapError(overlap)


# --- sentence segmentation ------------------------------------------------------

ABBREVIATIONS = frozenset(
    {"dr.", "mr.", "mrs.", "ms.", "vs.", "e.g.", "i.e.", "a.m.", "p.m.", "approx.", "fig.", "st.", "cm.", "mm."}
)
_BOUNDARY = re.compile(r"[.!?](?=\s)")


def split_sentences(text: str) -> list[tuple[int, int]]:
    """Sentence spans ``(start, end)``; ``end`` includes the terminal mark."""
    spans = []
    start = 0
    for m in _BOUNDARY.finditer(text):
        word = text[: m.end()].rsplit(None, 1)[-1].lower()
        if word in ABBREVIATIONS:
            continue
        spans.append((start, m.end()))
        start = m.end()
    spans.append((start, len(text)))
    out = []
    for s, e in spans:
        seg = text[s:e]
        lead = len(seg) - len(seg.lstrip())
        trail = len(seg) - len(seg.rstrip())
        if seg.strip():
            out.append((s + lead, e - trail))
    return out


# --- error injection --------------------------------------------------------------

ERROR_KINDS = ("negation_flip", "laterality_swap", "severity_swap", "entity_substitution")
SEVERITY_PAIRS = (
    ("mild", "severe"),
    ("small", "large"),
    ("minimal", "extensive"),
    ("slight", "marked"),
    ("subtle", "prominent"),
)
_SEVERITY_MAP = {**dict(SEVERITY_PAIRS), **{b: a for a, b in SEVERITY_PAIRS}}
_SEVERITY_RE = re.compile(r"\b(" + "|".join(_SEVERITY_MAP) + r")\b", re.IGNORECASE)
_LATERAL_RE = re.compile(r"\b(left|right)\b", re.IGNORECASE)


@dataclass(frozen=True)
class ErrorInjection:
    study_id: str
    label: str
    original: str
    corrupted: str
    sentence_index: Optional[int] = None
    error_kind: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _match_case(template: str, word: str) -> str:
    if template.isupper() and len(template) > 1:
        return word.upper()
    if template[:1].isupper():
        return word[:1].upper() + word[1:]
    return word


def _capitalize_first(s: str) -> str:
    return s[:1].upper() + s[1:]


def _negation_flip(sentence: str, rng: random.Random, lexicon: DiagnosisLexicon) -> Optional[str]:
    m = re.match(r"No\s+", sentence, re.IGNORECASE)
    if m:
        return _capitalize_first(sentence[m.end():])
    for pattern, repl in (
        (r"\b(there (?:is|are)) no\b\s*", r"\1 "),
        (r"\bwithout (?:evidence of )?", "with "),
        (r"\bno\s+", ""),
        (r"\b(is|are) not\b\s*", r"\1 "),
    ):
        flipped, n = re.subn(pattern, repl, sentence, count=1, flags=re.IGNORECASE)
        if n:
            return flipped
    m = re.match(r"(there (?:is|are))\s+(?:an?\s+)?", sentence, re.IGNORECASE)
    if m:
        return m.group(1) + " no " + sentence[m.end():]
    first = sentence[:1]
    rest = sentence[1:]
    # keep acronyms (e.g. "ET tube") intact
    if not (rest[:1].isupper()):
        first = first.lower()
    return "No " + first + rest


def _laterality_swap(sentence, rng, lexicon):
    if not _LATERAL_RE.search(sentence):
        return None
    return _LATERAL_RE.sub(
        lambda m: _match_case(m.group(0), "right" if m.group(0).lower() == "left" else "left"), sentence
    )


def _severity_swap(sentence, rng, lexicon):
    if not _SEVERITY_RE.search(sentence):
        return None
    return _SEVERITY_RE.sub(lambda m: _match_case(m.group(0), _SEVERITY_MAP[m.group(0).lower()]), sentence)


def _entity_substitution(sentence, rng, lexicon):
    mentions = scan_mentions(sentence, lexicon)
    if not mentions:
        return None
    target = mentions[rng.randrange(len(mentions))]
    code = lexicon.term_index[" ".join(target.surface.lower().split())]
    choices = sorted(e.canonical_name for e in lexicon if e.icd_code != code)
    replacement = _match_case(target.surface, choices[rng.randrange(len(choices))])
    return sentence[: target.start] + replacement + sentence[target.end:]


_APPLY = {
    "negation_flip": _negation_flip,
    "laterality_swap": _laterality_swap,
    "severity_swap": _severity_swap,
    "entity_substitution": _entity_substitution,
}


def study_rng(seed: int, study_id: str) -> random.Random:
    """Generator derived from (seed, study_id) so results ignore processing order."""
    digest = hashlib.sha256(f"{seed}\x00{study_id}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def inject_error(
    report: Report,
    seed: int,
    corrupt_probability: float = DEFAULT_CORRUPT_PROBABILITY,
    lexicon: DiagnosisLexicon | None = None,
    kinds: Sequence[str] = ERROR_KINDS,
) -> tuple[Report, ErrorInjection]:
    """Corrupt one sentence of the findings with probability ``corrupt_probability``.

    The target is drawn from sentences mentioning a lexicon term (any
    sentence if none do) and the error kind uniformly from those applicable
    to it. Clean outcomes come back with label ``"N"`` and the report as is.
    """
    if not 0.0 <= corrupt_probability <= 1.0:
        raise ValueError("corrupt_probability must be in [0, 1]")
    unknown = set(kinds) - set(ERROR_KINDS)
    if unknown or not kinds:
        raise ValueError(f"bad error kinds {sorted(unknown) or kinds}")
    lexicon = lexicon or load_lexicon()
    text = report.findings
    spans = split_sentences(text)
    if not spans:
        raise NoSentences(f"{report.study_id}: findings contain no sentences")

    rng = study_rng(seed, report.study_id)
    clean = ErrorInjection(report.study_id, "N", text, text)
    if not rng.random() < corrupt_probability:
        return report, clean

    eligible = [i for i, (s, e) in enumerate(spans) if scan_mentions(text[s:e], lexicon)]
    order = eligible or list(range(len(spans)))
    index = order[rng.randrange(len(order))]
    s, e = spans[index]
    sentence = text[s:e]

    candidates = []
    for kind in kinds:
        out = _APPLY[kind](sentence, random.Random(rng.random()), lexicon)
        if out is not None and out != sentence:
            candidates.append((kind, out))
    if not candidates:
        return report, clean
    kind, new_sentence = candidates[rng.randrange(len(candidates))]
    corrupted = text[:s] + new_sentence + text[e:]
    injection = ErrorInjection(report.study_id, "Y", text, corrupted, index, kind)
    return Report(report.study_id, corrupted, report.impression), injection


def build_err(
    corrupted: Report, refs: ImageRefs, injection: ErrorInjection, templates: PromptTemplates | None = None
) -> TaskInstance:
    templates = templates or load_templates()
    _require(corrupted.findings, "findings", corrupted.study_id)
    prompt = templates.render(TaskKind.ERR, report=corrupted.findings)
    meta = {"error_kind": injection.error_kind, "sentence_index": injection.sentence_index}
    return _instance(TaskKind.ERR, corrupted.study_id, refs, prompt, injection.label, templates, **meta)
