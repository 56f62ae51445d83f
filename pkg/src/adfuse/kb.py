"""Brand knowledge base: ingestion filters and the multi-pattern name matcher.

Matching rule: a name matches a scene-text iff it occurs as a phrase, i.e. the
occurrence is delimited on both sides by the string boundary or a
non-alphanumeric character ("abc" matches in "abc def" but not in "abcdef").
Names longer than 6 characters match case-insensitively, names of up to 6
characters match case-sensitively. Lengths count Unicode scalar values.

The matcher runs two Aho-Corasick automatons (one over case-folded text for
the long names, one exact for the short names) with a phrase-boundary check
on each hit; scanning is linear in the text length regardless of KB size.
"""
from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CASE_LENGTH_THRESHOLD = 6  # names longer than this match case-insensitively
_SENTENCE_END = re.compile(r"\.(?=\s|$)")
_FALLBACK_INDUSTRY = "general commerce"


class KbError(Exception):
    pass


@dataclass(frozen=True)
class BrandEntry:
    name: str
    description: str
    source: str  # curated_list | knowledge_graph | synthesized


def fold_char(c: str) -> str:
    """Length-preserving lower-case fold (multi-char expansions left as-is)."""
    low = c.lower()
    return low if len(low) == 1 else c


def fold_text(text: str) -> str:
    if text.isascii():
        return text.lower()
    return "".join(fold_char(c) for c in text)


class _Automaton:
    """Integer-node Aho-Corasick over unicode characters."""

    def __init__(self, patterns: dict[str, int]):
        # patterns map pattern string -> payload index
        self.goto: list[dict[str, int]] = [{}]
        self.out: list[tuple[int, ...]] = [()]
        for pattern, payload in patterns.items():
            node = 0
            for ch in pattern:
                nxt = self.goto[node].get(ch)
                if nxt is None:
                    self.goto.append({})
                    self.out.append(())
                    nxt = len(self.goto) - 1
                    self.goto[node][ch] = nxt
                node = nxt
            self.out[node] = self.out[node] + (payload,)
        self.fail = [0] * len(self.goto)
        queue = deque(self.goto[0].values())
        while queue:
            node = queue.popleft()
            for ch, child in self.goto[node].items():
                queue.append(child)
                f = self.fail[node]
                while f and ch not in self.goto[f]:
                    f = self.fail[f]
                candidate = self.goto[f].get(ch, 0)
                self.fail[child] = candidate if candidate != child else 0
                if self.out[self.fail[child]]:
                    self.out[child] = self.out[child] + self.out[self.fail[child]]

    def scan(self, text: str):
        """Yields (end_index_exclusive, payload) for every pattern occurrence."""
        node = 0
        goto = self.goto
        fail = self.fail
        out = self.out
        for i, ch in enumerate(text):
            while node and ch not in goto[node]:
                node = fail[node]
            node = goto[node].get(ch, 0)
            if out[node]:
                for payload in out[node]:
                    yield i + 1, payload


def _is_boundary(text: str, start: int, end: int) -> bool:
    if start > 0 and text[start - 1].isalnum():
        return False
    if end < len(text) and text[end].isalnum():
        return False
    return True


class KnowledgeBase:
    """Filtered brand entries plus the compiled two-automaton matcher."""

    def __init__(self, entries: Sequence[BrandEntry]):
        if not entries:
            raise KbError("empty knowledge base")
        names = set()
        for e in entries:
            if e.name in names:
                raise KbError(f"duplicate entry name {e.name!r}")
            names.add(e.name)
        self.entries = tuple(entries)
        self._by_name = {e.name: e for e in self.entries}
        short: dict[str, int] = {}
        # folding can merge distinct long names; keep every payload per key
        self._long_payloads: dict[str, list[int]] = {}
        for idx, e in enumerate(self.entries):
            if len(e.name) > CASE_LENGTH_THRESHOLD:
                self._long_payloads.setdefault(fold_text(e.name), []).append(idx)
            else:
                short.setdefault(e.name, idx)
        self._short_auto = _Automaton(short)
        self._long_auto = _Automaton({p: i for i, p in enumerate(sorted(self._long_payloads))})
        self._long_keys = sorted(self._long_payloads)
        self._lengths = [len(e.name) for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def get(self, name: str) -> BrandEntry:
        try:
            return self._by_name[name]
        except KeyError:
            raise KbError(f"unknown entry {name!r}") from None

    def match_text(self, scene_text: str) -> list[BrandEntry]:
        """Entries whose name occurs as a phrase, ordered by first match position then name."""
        if not scene_text:
            return []
        first_pos: dict[int, int] = {}
        for end, idx in self._short_auto.scan(scene_text):
            start = end - self._lengths[idx]
            if _is_boundary(scene_text, start, end):
                if idx not in first_pos or start < first_pos[idx]:
                    first_pos[idx] = start
        folded = fold_text(scene_text)
        for end, key_idx in self._long_auto.scan(folded):
            key = self._long_keys[key_idx]
            start = end - len(key)
            if _is_boundary(scene_text, start, end):
                for idx in self._long_payloads[key]:
                    if idx not in first_pos or start < first_pos[idx]:
                        first_pos[idx] = start
        ordered = sorted(first_pos, key=lambda i: (first_pos[i], self.entries[i].name))
        return [self.entries[i] for i in ordered]


def match_text(kb: KnowledgeBase, scene_text: str) -> list[BrandEntry]:
    return kb.match_text(scene_text)


def pick_single_match(matches: Sequence[BrandEntry], seed: int) -> BrandEntry:
    """Seeded uniform choice for callers that need exactly one match."""
    if not matches:
        raise KbError("no matches to pick from")
    rng = np.random.default_rng(seed)
    return matches[int(rng.integers(len(matches)))]


def first_sentence(text: str) -> str:
    m = _SENTENCE_END.search(text)
    return text[: m.end()] if m else text


def ingest(
    raw_entries: Iterable[tuple[str, str | None, str] | tuple[str, str | None, str, str | None]],
    common_words: set[str],
) -> KnowledgeBase:
    """Apply the KB filter rules; returns the compiled base.

    Rules: drop names that are common words (case-insensitive) or single
    characters, cut descriptions to their first sentence, synthesize missing
    descriptions, de-duplicate by exact name keeping the first occurrence.
    """
    folded_words = {w.casefold() for w in common_words}
    seen: set[str] = set()
    entries: list[BrandEntry] = []
    for raw in raw_entries:
        name, description, source = raw[0], raw[1], raw[2]
        industry = raw[3] if len(raw) > 3 else None
        if len(name) < 2:
            continue
        if name.casefold() in folded_words:
            continue
        if name in seen:
            continue
        seen.add(name)
        if description:
            description = first_sentence(description.strip())
        else:
            description = f"{name} is a brand name in the industry of {industry or _FALLBACK_INDUSTRY}"
        entries.append(BrandEntry(name=name, description=description, source=source))
    if not entries:
        raise KbError("no entries retained after filtering")
    return KnowledgeBase(entries)


@dataclass
class IngestReport:
    raw: int
    dropped_common: int
    dropped_short: int
    dropped_duplicate: int
    retained: int


def ingest_with_report(raw_entries, common_words: set[str]):
    raw_entries = list(raw_entries)
    folded = {w.casefold() for w in common_words}
    dropped_common = sum(1 for r in raw_entries if len(r[0]) >= 2 and r[0].casefold() in folded)
    dropped_short = sum(1 for r in raw_entries if len(r[0]) < 2)
    kept_names = [
        r[0] for r in raw_entries if len(r[0]) >= 2 and r[0].casefold() not in folded
    ]
    dropped_dup = len(kept_names) - len(dict.fromkeys(kept_names))
    kb = ingest(raw_entries, common_words)
    report = IngestReport(
        raw=len(raw_entries),
        dropped_common=dropped_common,
        dropped_short=dropped_short,
        dropped_duplicate=dropped_dup,
        retained=len(kb),
    )
    return kb, report


# -- file formats -------------------------------------------------------------

KB_CACHE_VERSION = 1


def read_raw_entries(path: Path | str) -> list[tuple[str, str | None, str, str | None]]:
    """JSON-lines rows {"name", "description", "source"[, "industry"]}."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rows.append(
                    (
                        str(obj["name"]),
                        obj.get("description"),
                        str(obj.get("source", "curated_list")),
                        obj.get("industry"),
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise KbError(f"{path}:{lineno}: bad KB row: {exc}") from exc
    if not rows:
        raise KbError(f"{path}: empty KB source")
    return rows


def read_word_list(path: Path | str) -> set[str]:
    with open(path, encoding="utf-8") as fh:
        return {line.strip() for line in fh if line.strip()}


def save_kb_cache(kb: KnowledgeBase, path: Path | str) -> None:
    doc = {
        "version": KB_CACHE_VERSION,
        "entries": [
            {"name": e.name, "description": e.description, "source": e.source}
            for e in kb.entries
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def load_kb_cache(path: Path | str) -> KnowledgeBase:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != KB_CACHE_VERSION:
        raise KbError(f"{path}: unsupported KB cache version {doc.get('version')!r}")
    return KnowledgeBase(
        [BrandEntry(e["name"], e["description"], e["source"]) for e in doc["entries"]]
    )
