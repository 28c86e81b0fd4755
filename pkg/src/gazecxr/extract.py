"""Turn raw model text into scoreable answers (Y/N labels, ICD codes, VQA tokens)."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import httpx
import numpy as np
from rapidfuzz import fuzz

from .lexicon import DiagnosisLexicon, normalize_term

YN_FUZZY_THRESHOLD = 0.8
LINK_THRESHOLD = 0.85


class YnAnswer(str, enum.Enum):
    YES = "Yes"
    NO = "No"
    UNPARSEABLE = "Unparseable"

    def matches(self, gold: str) -> bool:
        """Compare against a gold ``"Y"``/``"N"`` label. Unparseable never matches."""
        label = {"Y": YnAnswer.YES, "N": YnAnswer.NO}.get(gold.strip().upper())
        return self is not YnAnswer.UNPARSEABLE and self is label


AFFIRMATIVE = ("y", "yes", "error", "errors present", "incorrect")
NEGATIVE = ("n", "no", "no error", "correct", "accurate")
_YN_KEYS = {**{k: YnAnswer.YES for k in AFFIRMATIVE}, **{k: YnAnswer.NO for k in NEGATIVE}}
_YN_PATTERN = re.compile(
    r"\b(?:" + "|".join(re.escape(k) for k in sorted(_YN_KEYS, key=len, reverse=True)) + r")\b"
)
_NON_WORD = re.compile(r"[^\w\s]|_")


def _normalize_answer(text: str) -> str:
    return " ".join(_NON_WORD.sub(" ", text.lower()).split())


def similarity(a: str, b: str) -> float:
    """Indel-normalized string similarity in [0, 1]."""
    return fuzz.ratio(a, b) / 100.0


def extract_yn(text: str, threshold: float = YN_FUZZY_THRESHOLD) -> YnAnswer:
    """Classify a free-text error-detection response.

    Exact key phrases are tried first (earliest match wins); failing that,
    every token window is compared against the key phrases with an edit
    ratio and the best window scoring at least ``threshold`` decides, ties
    going to the earliest window.
    """
    norm = _normalize_answer(text)
    if not norm:
        return YnAnswer.UNPARSEABLE
    m = _YN_PATTERN.search(norm)
    if m:
        return _YN_KEYS[m.group(0)]

    tokens = norm.split(" ")
    best = None  # (score, -start, answer)
    for start in range(len(tokens)):
        for key, answer in _YN_KEYS.items():
            width = key.count(" ") + 1
            if start + width > len(tokens):
                continue
            score = similarity(" ".join(tokens[start : start + width]), key)
            if score >= threshold and (best is None or (score, -start) > best[:2]):
                best = (score, -start, answer)
    if best:
        return best[2]
    return YnAnswer.UNPARSEABLE


# --- diagnosis mentions ------------------------------------------------------


class NerServiceError(RuntimeError):
    pass


class EmbedServiceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Mention:
    start: int
    end: int
    surface: str


@dataclass(frozen=True)
class LinkedDiagnosis:
    mention: Mention
    icd_code: str
    score: float
    method: str  # exact | fuzzy | embedding


class Recognizer(Protocol):
    def __call__(self, text: str) -> list[Mention]: ...


class Embedder(Protocol):
    def __call__(self, texts: Sequence[str]) -> np.ndarray: ...


class HttpRecognizer:
    """Client for a disease-NER service: ``POST {text} -> {spans: [{start, end, surface}]}``."""

    def __init__(self, url: str, timeout: float = 30.0, client: Optional[httpx.Client] = None):
        self.url = url
        self.timeout = timeout
        self._client = client or httpx.Client(timeout=timeout)

    def __call__(self, text: str) -> list[Mention]:
        try:
            resp = self._client.post(self.url, json={"text": text})
            resp.raise_for_status()
            spans = resp.json()["spans"]
            mentions = [Mention(int(s["start"]), int(s["end"]), str(s["surface"])) for s in spans]
        except (httpx.HTTPError, KeyError, TypeError, ValueError) as exc:
            raise NerServiceError(f"NER service failed: {exc}") from exc
        for m in mentions:
            if not 0 <= m.start <= m.end <= len(text):
                raise NerServiceError(f"span {m} outside text of length {len(text)}")
        return mentions


class HttpEmbedder:
    """Client for an embedding service: ``POST {texts} -> {vectors}``."""

    def __init__(self, url: str, timeout: float = 30.0, client: Optional[httpx.Client] = None):
        self.url = url
        self._client = client or httpx.Client(timeout=timeout)

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        try:
            resp = self._client.post(self.url, json={"texts": list(texts)})
            resp.raise_for_status()
            vectors = np.asarray(resp.json()["vectors"], dtype=np.float64)
        except (httpx.HTTPError, KeyError, TypeError, ValueError) as exc:
            raise EmbedServiceError(f"embedding service failed: {exc}") from exc
        if vectors.ndim != 2 or vectors.shape[0] != len(texts):
            raise EmbedServiceError(f"expected {len(texts)} vectors, got shape {vectors.shape}")
        return vectors


def scan_mentions(text: str, lexicon: DiagnosisLexicon) -> list[Mention]:
    # alternation is ordered longest-first, so each match is the longest term at its position
    return [Mention(m.start(), m.end(), m.group(0)) for m in lexicon.pattern.finditer(text)]


def extract_diagnosis_mentions(
    text: str, lexicon: DiagnosisLexicon, ner: Optional[Recognizer] = None
) -> list[Mention]:
    if not len(lexicon):
        raise ValueError("lexicon is empty")
    if not text:
        return []
    if ner is not None:
        return list(ner(text))
    return scan_mentions(text, lexicon)


def _best(candidates: list[tuple[float, str]]) -> Optional[tuple[float, str]]:
    # highest score, then lexicographically smallest code
    return min(candidates, key=lambda c: (-c[0], c[1]), default=None)


class _EntryMatrix:
    def __init__(self, lexicon: DiagnosisLexicon, embedder: Embedder):
        self.codes = [e.icd_code for e in lexicon]
        if lexicon.has_embeddings():
            mat = np.asarray([e.embedding for e in lexicon], dtype=np.float64)
        else:
            mat = np.asarray(embedder([e.canonical_name for e in lexicon]), dtype=np.float64)
        self.matrix = mat / np.linalg.norm(mat, axis=1, keepdims=True)


def link_mention(
    mention: Mention,
    lexicon: DiagnosisLexicon,
    embedder: Optional[Embedder] = None,
    tau: float = LINK_THRESHOLD,
    _entries: Optional[_EntryMatrix] = None,
) -> Optional[LinkedDiagnosis]:
    """Link one mention: exact term hit, else embedding (if an embedder is
    configured) or fuzzy token-set similarity. Returns None below ``tau``."""
    if not 0 < tau <= 1:
        raise ValueError("tau must be in (0, 1]")
    term = normalize_term(mention.surface)
    if not term:
        return None
    code = lexicon.term_index.get(term)
    if code is not None:
        return LinkedDiagnosis(mention, code, 1.0, "exact")

    if embedder is not None:
        entries = _entries or _EntryMatrix(lexicon, embedder)
        vec = np.asarray(embedder([term]), dtype=np.float64)[0]
        norm = np.linalg.norm(vec)
        if norm == 0:
            return None
        cos = entries.matrix @ (vec / norm)
        scores = [(float(np.clip(c, 0.0, 1.0)), code) for c, code in zip(cos, entries.codes)]
        method = "embedding"
    else:
        scores = [
            (max(fuzz.token_set_ratio(term, name) for name in e.names) / 100.0, e.icd_code)
            for e in lexicon
        ]
        method = "fuzzy"
    best = _best(scores)
    if best is None or best[0] < tau:
        return None
    return LinkedDiagnosis(mention, best[1], best[0], method)


def link_mentions(
    mentions: Sequence[Mention],
    lexicon: DiagnosisLexicon,
    embedder: Optional[Embedder] = None,
    tau: float = LINK_THRESHOLD,
) -> set[str]:
    entries = None
    if embedder is not None and mentions:
        entries = _EntryMatrix(lexicon, embedder)
    codes = set()
    for m in mentions:
        link = link_mention(m, lexicon, embedder, tau, _entries=entries)
        if link is not None:
            codes.add(link.icd_code)
    return codes


def extract_ddx_codes(
    text: str,
    lexicon: DiagnosisLexicon,
    ner: Optional[Recognizer] = None,
    embedder: Optional[Embedder] = None,
    tau: float = LINK_THRESHOLD,
) -> set[str]:
    return link_mentions(extract_diagnosis_mentions(text, lexicon, ner), lexicon, embedder, tau)


# --- VQA ------------------------------------------------------------------------

_ARTICLES = {"a", "an", "the"}
_VQA_SYNONYMS = {"yes": "yes", "yeah": "yes", "correct": "yes", "no": "no", "nope": "no"}


def vqa_normalize(text: str) -> str:
    tokens = [t for t in _normalize_answer(text).split() if t not in _ARTICLES]
    joined = " ".join(tokens)
    return _VQA_SYNONYMS.get(joined, joined)
