"""ICD diagnosis lexicon: loading, validation and phrase lookup."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

import numpy as np


class LexiconError(ValueError):
    pass


_WS = re.compile(r"\s+")
_EDGE_PUNCT = re.compile(r"^[^\w]+|[^\w]+$")


def normalize_term(text: str) -> str:
    """Lowercase, trim edge punctuation and collapse internal whitespace."""
    return _EDGE_PUNCT.sub("", _WS.sub(" ", text.strip().lower()))


@dataclass(frozen=True)
class LexiconEntry:
    icd_code: str
    canonical_name: str
    synonyms: tuple[str, ...] = ()
    embedding: Optional[tuple[float, ...]] = None

    @property
    def names(self) -> tuple[str, ...]:
        return (self.canonical_name, *self.synonyms)


@dataclass(frozen=True)
class DiagnosisLexicon:
    entries: tuple[LexiconEntry, ...]
    _by_code: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.entries:
            raise LexiconError("lexicon is empty")
        by_code = {}
        dims = set()
        for e in self.entries:
            if e.icd_code in by_code:
                raise LexiconError(f"duplicate icd_code {e.icd_code}")
            for name in e.names:
                if name != normalize_term(name) or not name:
                    raise LexiconError(f"{e.icd_code}: term {name!r} is not normalized")
            if e.embedding is not None:
                vec = np.asarray(e.embedding, dtype=np.float64)
                if abs(np.linalg.norm(vec) - 1.0) > 1e-6:
                    raise LexiconError(f"{e.icd_code}: embedding is not unit norm")
                dims.add(vec.size)
            by_code[e.icd_code] = e
        if len(dims) > 1:
            raise LexiconError(f"embeddings have mixed dimensions {sorted(dims)}")
        object.__setattr__(self, "_by_code", by_code)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def get(self, code: str) -> Optional[LexiconEntry]:
        return self._by_code.get(code)

    @cached_property
    def term_index(self) -> dict[str, str]:
        """Normalized term -> icd_code. Collisions resolve to the smallest code."""
        index: dict[str, str] = {}
        for e in sorted(self.entries, key=lambda e: e.icd_code, reverse=True):
            for name in e.names:
                index[name] = e.icd_code
        return index

    @cached_property
    def terms(self) -> tuple[str, ...]:
        """All terms, longest first, ties alphabetical."""
        return tuple(sorted(self.term_index, key=lambda t: (-len(t), t)))

    @cached_property
    def pattern(self) -> re.Pattern:
        alts = "|".join(r"\s+".join(map(re.escape, t.split(" "))) for t in self.terms)
        return re.compile(rf"(?<!\w)(?:{alts})(?!\w)", re.IGNORECASE)

    def has_embeddings(self) -> bool:
        return all(e.embedding is not None for e in self.entries)


def _entry_from_dict(obj: dict, where: str) -> LexiconEntry:
    try:
        code = obj["icd_code"]
        name = obj["canonical_name"]
    except (KeyError, TypeError):
        raise LexiconError(f"{where}: missing icd_code or canonical_name") from None
    if not isinstance(code, str) or not code.strip():
        raise LexiconError(f"{where}: icd_code must be a non-empty string")
    synonyms = obj.get("synonyms") or []
    if not isinstance(synonyms, list) or not all(isinstance(s, str) for s in synonyms):
        raise LexiconError(f"{where}: synonyms must be a list of strings")
    emb = obj.get("embedding")
    if emb is not None:
        if not isinstance(emb, list) or not emb:
            raise LexiconError(f"{where}: embedding must be a non-empty list")
        emb = tuple(float(v) for v in emb)
    return LexiconEntry(code.strip(), name, tuple(synonyms), emb)


def parse_lexicon(lines: Iterable[str], normalize: bool = False) -> DiagnosisLexicon:
    """Parse json-lines lexicon entries.

    With ``normalize=True`` terms are lowercased and whitespace-collapsed on
    load instead of being rejected.
    """
    entries = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LexiconError(f"line {lineno}: {exc.msg}") from None
        entry = _entry_from_dict(obj, f"line {lineno}")
        if normalize:
            entry = LexiconEntry(
                entry.icd_code,
                normalize_term(entry.canonical_name),
                tuple(dict.fromkeys(normalize_term(s) for s in entry.synonyms)),
                entry.embedding,
            )
        entries.append(entry)
    return DiagnosisLexicon(tuple(entries))


def load_lexicon(path: str | Path | None = None, normalize: bool = False) -> DiagnosisLexicon:
    if path is None:
        text = resources.files("gazecxr").joinpath("data/lexicon.jsonl").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return parse_lexicon(text.splitlines(), normalize=normalize)


def dump_lexicon(lexicon: DiagnosisLexicon) -> str:
    out = []
    for e in lexicon.entries:
        obj = {"icd_code": e.icd_code, "canonical_name": e.canonical_name, "synonyms": list(e.synonyms)}
        if e.embedding is not None:
            obj["embedding"] = list(e.embedding)
        out.append(json.dumps(obj))
    return "\n".join(out) + "\n"
