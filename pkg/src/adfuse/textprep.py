"""OCR block assembly and annotation-text cleaning.

Paragraph grouping merges consecutive paragraphs whose font sizes differ by
at most 20% of the larger one, then drops blocks whose length-weighted mean
confidence falls below 0.7. Label cleaning normalizes whitespace, rejects
configured invalid answers, repairs known typos token-wise, and rejects texts
that lack a "because" clause or whose content nouns are all non-informative.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FONT_SIMILARITY = 0.20
MIN_BLOCK_CONFIDENCE = 0.7

# small closed lists backing the noun heuristic; a full tagger is out of scope
DEFAULT_STOPWORDS = frozenset(
    """a an the i you we they he she it this that these those my your our their
    its is are was were be been being to of in on at for with and or but because
    so if then than as by from not no very really just too also there here""".split()
)
DEFAULT_VERBS = frozenset(
    """should would could can will may might must do does did have has had buy
    get use make go see try drink eat wear drive visit support choose want need
    take look feel help works work""".split()
)

DEFAULT_INVALID_ANSWERS = frozenset({"i don't know", "not an ad", "not sure"})
DEFAULT_TYPOS = {"becasue": "because", "becaues": "because"}
DEFAULT_NONINFORMATIVE = frozenset({"product", "thing", "vendor"})


class TextPrepError(Exception):
    pass


@dataclass(frozen=True)
class OcrParagraph:
    text: str
    font_size: float
    confidence: float
    order_index: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise TextPrepError(f"confidence {self.confidence} outside [0, 1]")
        if self.font_size <= 0:
            raise TextPrepError(f"font size {self.font_size} must be positive")


@dataclass
class CleaningRules:
    invalid_answers: set[str] = field(default_factory=lambda: set(DEFAULT_INVALID_ANSWERS))
    typo_map: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_TYPOS))
    noninformative_nouns: set[str] = field(default_factory=lambda: set(DEFAULT_NONINFORMATIVE))
    stopwords: set[str] = field(default_factory=lambda: set(DEFAULT_STOPWORDS))
    verbs: set[str] = field(default_factory=lambda: set(DEFAULT_VERBS))
    seed: int = 0

    def __post_init__(self):
        for key in self.typo_map:
            if key != key.lower():
                raise TextPrepError(f"typo_map key {key!r} must be lowercase")

    @classmethod
    def from_file(cls, path: Path | str) -> "CleaningRules":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        kwargs = {}
        for name in ("invalid_answers", "noninformative_nouns", "stopwords", "verbs"):
            if name in doc:
                kwargs[name] = {str(x) for x in doc[name]}
        if "typo_map" in doc:
            kwargs["typo_map"] = {str(k): str(v) for k, v in doc["typo_map"].items()}
        if "seed" in doc:
            kwargs["seed"] = int(doc["seed"])
        return cls(**kwargs)


def group_blocks(paragraphs: Sequence[OcrParagraph]) -> list[str]:
    """Merge consecutive similar-font paragraphs; drop low-confidence blocks."""
    if not paragraphs:
        return []
    for prev, cur in zip(paragraphs, paragraphs[1:]):
        if cur.order_index <= prev.order_index:
            raise TextPrepError("paragraphs must be ordered by strictly increasing order_index")
    groups: list[list[OcrParagraph]] = [[paragraphs[0]]]
    for prev, cur in zip(paragraphs, paragraphs[1:]):
        gap = abs(cur.font_size - prev.font_size) / max(cur.font_size, prev.font_size)
        if gap <= FONT_SIMILARITY:
            groups[-1].append(cur)
        else:
            groups.append([cur])
    blocks = []
    for group in groups:
        weights = [len(p.text) for p in group]
        total = sum(weights)
        if total > 0:
            confidence = sum(p.confidence * w for p, w in zip(group, weights)) / total
        else:
            confidence = sum(p.confidence for p in group) / len(group)
        if confidence < MIN_BLOCK_CONFIDENCE:
            continue
        blocks.append(" ".join(p.text for p in group))
    return blocks


def _split_token(token: str) -> tuple[str, str, str]:
    """(leading punctuation, core, trailing punctuation)."""
    start, end = 0, len(token)
    while start < end and not token[start].isalnum():
        start += 1
    while end > start and not token[end - 1].isalnum():
        end -= 1
    return token[:start], token[start:end], token[end:]


def _repair_token(token: str, typo_map: dict[str, str]) -> str:
    head, core, tail = _split_token(token)
    fixed = typo_map.get(core.lower())
    if fixed is None:
        return token
    if core[:1].isupper():
        fixed = fixed[:1].upper() + fixed[1:]
    return head + fixed + tail


def clean_label(text: str, rules: CleaningRules) -> str | None:
    """Repaired text, or None when the label is rejected."""
    normalized = " ".join(text.split())
    if not normalized:
        return None
    if normalized.casefold() in {a.casefold() for a in rules.invalid_answers}:
        return None
    tokens = [_repair_token(t, rules.typo_map) for t in normalized.split()]
    cores = [_split_token(t)[1].lower() for t in tokens]
    if "because" not in cores:
        return None
    nounish = [
        c
        for c in cores
        if c and c not in rules.stopwords and c not in rules.verbs and not c.isdigit()
    ]
    if all(c in rules.noninformative_nouns for c in nounish):
        return None
    return " ".join(tokens)


def select_ground_truth(texts: Sequence[str], seed: int) -> str:
    """Seeded uniform choice of one ground-truth text."""
    if not texts:
        raise TextPrepError("no texts to select from")
    rng = np.random.default_rng(seed)
    return texts[int(rng.integers(len(texts)))]


# -- file plumbing -------------------------------------------------------------


def read_ocr_file(path: Path | str) -> list[tuple[str, list[OcrParagraph]]]:
    """JSON-lines rows {"image_id", "paragraphs": [{text, font_size, confidence, order_index}]}."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                paragraphs = [
                    OcrParagraph(
                        text=str(p["text"]),
                        font_size=float(p["font_size"]),
                        confidence=float(p["confidence"]),
                        order_index=int(p["order_index"]),
                    )
                    for p in obj["paragraphs"]
                ]
                out.append((str(obj["image_id"]), paragraphs))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise TextPrepError(f"{path}:{lineno}: bad OCR row: {exc}") from exc
    return out


def clean_labels_file(
    labels_by_image: dict[str, list[str]], rules: CleaningRules, path: Path | str
) -> dict[str, int]:
    """Clean every image's labels, pick a ground truth, write the JSON-lines report.

    Images whose labels are all rejected get ``"ground_truth": null`` and are
    counted in the returned stats (the flag rate is a report field).
    """
    kept_images = 0
    flagged = 0
    with open(path, "w", encoding="utf-8") as fh:
        for image_id in sorted(labels_by_image):
            raw = labels_by_image[image_id]
            kept, rejected = [], []
            for label in raw:
                cleaned = clean_label(label, rules)
                if cleaned is None:
                    rejected.append(label)
                else:
                    kept.append(cleaned)
            if kept:
                ground_truth = select_ground_truth(kept, rules.seed)
                kept_images += 1
            else:
                ground_truth = None
                flagged += 1
            fh.write(
                json.dumps(
                    {
                        "image_id": image_id,
                        "labels": kept,
                        "ground_truth": ground_truth,
                        "rejected": rejected,
                    },
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
                + "\n"
            )
    return {"images": kept_images + flagged, "kept": kept_images, "all_rejected": flagged}
