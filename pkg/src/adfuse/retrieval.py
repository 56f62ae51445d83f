"""Candidate construction and image-to-text retrieval metrics.

Two protocols: the official one (3 ground-truth texts plus 12 sampled
negatives per image) and the harder K-candidate one (a single seeded
ground-truth positive plus K-1 negatives drawn from other images). Metrics
are ranking-based, so any strictly increasing transform of the scores (for
instance the learnable logit scale) leaves them unchanged.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .manifest import PairRow
from .sampling import SamplingError, sample_excluding

OFFICIAL_POSITIVES = 3
OFFICIAL_NEGATIVES = 12


class RetrievalError(Exception):
    pass


@dataclass(frozen=True)
class EvalProtocol:
    kind: str  # "official" | "k_candidate"
    k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("official", "k_candidate"):
            raise RetrievalError(f"unknown protocol kind {self.kind!r}")
        if self.kind == "k_candidate" and (self.k is None or self.k < 2):
            raise RetrievalError("k_candidate protocol needs K >= 2")


@dataclass(frozen=True)
class Metrics:
    accuracy: float  # percentage of images whose top-ranked text is a positive
    rank: float  # mean over images of the best positive's rank (1-based)
    mean_rank: float  # mean over images of the mean rank of all positives
    n_images: int


@dataclass(frozen=True)
class CandidateSet:
    image_id: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...]

    def __post_init__(self):
        ids = self.positives + self.negatives
        if not self.positives:
            raise RetrievalError(f"{self.image_id}: no positives")
        if len(set(ids)) != len(ids):
            raise RetrievalError(f"{self.image_id}: duplicate candidate ids")


def score(image_feat: np.ndarray, text_feats: Sequence[np.ndarray]) -> list[float]:
    """Dot-product scores of one image feature against each text feature."""
    image_feat = np.asarray(image_feat, dtype=np.float64)
    out = []
    for t in text_feats:
        t = np.asarray(t, dtype=np.float64)
        if t.shape != image_feat.shape:
            raise RetrievalError(f"dim mismatch {t.shape} vs {image_feat.shape}")
        out.append(float(image_feat @ t))
    return out


def _image_rng(seed: int, image_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(image_id.encode("utf-8"))]))


def group_by_image(rows: Sequence[PairRow]) -> dict[str, list[str]]:
    texts: dict[str, list[str]] = {}
    for row in rows:
        texts.setdefault(row.image_id, []).append(row.label_text_id)
    return texts


def build_candidates(protocol: EvalProtocol, rows: Sequence[PairRow]) -> list[CandidateSet]:
    """Seeded, reproducible candidate sets over the given manifest rows."""
    by_image = group_by_image(rows)
    image_ids = sorted(by_image)
    all_texts = sorted({t for ts in by_image.values() for t in ts})
    text_pos = {t: i for i, t in enumerate(all_texts)}
    sets: list[CandidateSet] = []
    for image_id in image_ids:
        own = by_image[image_id]
        rng = _image_rng(protocol.seed, image_id)
        if protocol.kind == "official":
            if len(own) < OFFICIAL_POSITIVES:
                raise RetrievalError(
                    f"{image_id}: official protocol needs >= {OFFICIAL_POSITIVES} ground-truth texts"
                )
            positives = own if len(own) == OFFICIAL_POSITIVES else [
                own[i] for i in sorted(rng.choice(len(own), OFFICIAL_POSITIVES, replace=False))
            ]
            n_neg = OFFICIAL_NEGATIVES
        else:
            positives = [own[int(rng.integers(len(own)))]]
            n_neg = protocol.k - 1
        own_pos = sorted(text_pos[t] for t in set(own))
        try:
            neg_idx = sample_excluding(len(all_texts), own_pos, n_neg, rng)
        except SamplingError as exc:
            raise RetrievalError(f"{image_id}: {exc}") from exc
        negatives = [all_texts[int(i)] for i in neg_idx]
        sets.append(CandidateSet(image_id, tuple(positives), tuple(negatives)))
    return sets


def evaluate(
    image_feats: Mapping[str, np.ndarray],
    text_feats: Mapping[str, np.ndarray],
    candidate_sets: Sequence[CandidateSet],
    per_image: list | None = None,
) -> Metrics:
    """Rank every candidate set; ties broken by ascending text id.

    ``image_feats`` / ``text_feats`` map ids to vectors (a FeatureBank works).
    ``per_image`` (optional) collects (image_id, best_rank, mean_rank, hit).
    """
    if not candidate_sets:
        raise RetrievalError("no candidate sets")
    hits = 0
    best_rank_sum = 0.0
    mean_rank_sum = 0.0
    for cs in candidate_sets:
        try:
            img = np.asarray(image_feats[cs.image_id], dtype=np.float64)
        except KeyError:
            raise RetrievalError(f"unresolvable image id {cs.image_id!r}") from None
        ids = list(cs.positives + cs.negatives)
        try:
            feats = np.stack([np.asarray(text_feats[t], dtype=np.float64) for t in ids])
        except KeyError as exc:
            raise RetrievalError(f"unresolvable text id {exc}") from None
        scores = feats @ img
        order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
        rank_of = {ids[i]: pos + 1 for pos, i in enumerate(order)}
        pos_ranks = sorted(rank_of[t] for t in cs.positives)
        hit = pos_ranks[0] == 1
        hits += hit
        best_rank_sum += pos_ranks[0]
        mean_rank_sum += sum(pos_ranks) / len(pos_ranks)
        if per_image is not None:
            per_image.append((cs.image_id, pos_ranks[0], sum(pos_ranks) / len(pos_ranks), hit))
    n = len(candidate_sets)
    return Metrics(
        accuracy=100.0 * hits / n,
        rank=best_rank_sum / n,
        mean_rank=mean_rank_sum / n,
        n_images=n,
    )
