"""Vision-side brand scoring over proposed regions and the text/vision ensemble.

Every entry carries 6 scoring-prompt features plus one "advertisement" prompt
feature. An entry's score against a region is the mean of the 6 prompt dot
products. The whole image participates as an extra region. Candidate A is the
best single cell; candidate B is the best region-mean among entries that win
at least one region; the advertisement-prompt similarity of the global image
feature arbitrates between them, and likewise across modules when text
matching finds several names. All ties resolve by ascending entry name.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .banks import FeatureBank
from .kb import BrandEntry, KnowledgeBase

logger = logging.getLogger(__name__)

PROMPTS_PER_ENTRY = 6


class VisionError(Exception):
    pass


@dataclass(frozen=True)
class RegionProposal:
    region_id: str
    feature: np.ndarray
    is_global: bool = False


class PromptBank:
    """Per-entry prompt features aligned to KB entries.

    Built from standard bank files with ids ``<name>/prompt/<0..5>`` and
    ``<name>/ad``; multiple bank shards may be passed and are merged.
    """

    def __init__(self, entries: Sequence[BrandEntry], prompt_feats: np.ndarray, ad_feats: np.ndarray):
        if prompt_feats.shape != (len(entries), PROMPTS_PER_ENTRY, ad_feats.shape[-1]):
            raise VisionError(
                f"prompt features shape {prompt_feats.shape} inconsistent with "
                f"{len(entries)} entries"
            )
        if ad_feats.shape[0] != len(entries):
            raise VisionError("advertisement features misaligned with entries")
        self.entries = tuple(entries)
        self.prompt_feats = np.ascontiguousarray(prompt_feats, dtype=np.float64)
        self.ad_feats = np.ascontiguousarray(ad_feats, dtype=np.float64)
        self._row = {e.name: i for i, e in enumerate(self.entries)}

    @classmethod
    def from_banks(cls, kb: KnowledgeBase, banks: Sequence[FeatureBank]) -> "PromptBank":
        lookup: dict[str, np.ndarray] = {}
        for bank in banks:
            for rid in bank.ids:
                lookup[rid] = bank.get(rid)
        dim = banks[0].dim
        prompt_feats = np.empty((len(kb.entries), PROMPTS_PER_ENTRY, dim))
        ad_feats = np.empty((len(kb.entries), dim))
        for i, entry in enumerate(kb.entries):
            try:
                for k in range(PROMPTS_PER_ENTRY):
                    prompt_feats[i, k] = lookup[f"{entry.name}/prompt/{k}"]
                ad_feats[i] = lookup[f"{entry.name}/ad"]
            except KeyError as exc:
                raise VisionError(f"entry {entry.name!r} missing prompt feature {exc}") from exc
        return cls(kb.entries, prompt_feats, ad_feats)

    def ad_score(self, name: str, global_image_feat: np.ndarray) -> float:
        return float(self.ad_feats[self._row[name]] @ np.asarray(global_image_feat, dtype=np.float64))


def score_entries(regions: Sequence[RegionProposal], prompts: PromptBank) -> np.ndarray:
    """Entry-by-region matrix of mean dot products over the 6 scoring prompts.

    Cells are accumulated in a fixed order (ascending feature index, then
    ascending prompt index) so every cell is bit-identical to a plain
    sequential dot product; BLAS kernels reorder reductions and would not be.
    """
    if not regions:
        raise VisionError("no regions")
    n_global = sum(r.is_global for r in regions)
    if n_global != 1:
        raise VisionError(f"expected exactly one global region, got {n_global}")
    feats = np.stack([np.asarray(r.feature, dtype=np.float64) for r in regions])
    dim = prompts.prompt_feats.shape[2]
    if feats.shape[1] != dim:
        raise VisionError("region/prompt dimension mismatch")
    n_entries = len(prompts.entries)
    scores = np.zeros((n_entries, len(regions)))
    dots = np.empty((n_entries, len(regions)))
    for k in range(PROMPTS_PER_ENTRY):
        dots[:] = 0.0
        pk = prompts.prompt_feats[:, k, :]
        for t in range(dim):
            dots += pk[:, t, None] * feats[None, :, t]
        scores += dots
    return scores / PROMPTS_PER_ENTRY


def select_vision_candidate(
    score_matrix: np.ndarray,
    global_image_feat: np.ndarray,
    prompts: PromptBank,
) -> BrandEntry:
    """Arbitrate between the best-cell and best-champion-mean candidates."""
    if score_matrix.size == 0:
        raise VisionError("empty score matrix")
    entries = prompts.entries
    names = [e.name for e in entries]

    def argmax_by_name(values) -> int:
        best = None
        for i, v in enumerate(values):
            if best is None or v > values[best] or (v == values[best] and names[i] < names[best]):
                best = i
        return best

    flat_best = None
    for e_idx in range(score_matrix.shape[0]):
        for r_idx in range(score_matrix.shape[1]):
            v = score_matrix[e_idx, r_idx]
            if (
                flat_best is None
                or v > flat_best[0]
                or (v == flat_best[0] and names[e_idx] < names[flat_best[1]])
            ):
                flat_best = (v, e_idx)
    cand_a = flat_best[1]

    champions = sorted({argmax_by_name(score_matrix[:, r]) for r in range(score_matrix.shape[1])})
    means = score_matrix.mean(axis=1)
    best_champ = None
    for i in champions:
        if (
            best_champ is None
            or means[i] > means[best_champ]
            or (means[i] == means[best_champ] and names[i] < names[best_champ])
        ):
            best_champ = i
    cand_b = best_champ

    if cand_a == cand_b:
        return entries[cand_a]
    score_a = prompts.ad_score(names[cand_a], global_image_feat)
    score_b = prompts.ad_score(names[cand_b], global_image_feat)
    if score_a == score_b:
        logger.info(
            "advertisement-prompt tie between %r and %r; resolving by name", names[cand_a], names[cand_b]
        )
        return entries[cand_a] if names[cand_a] < names[cand_b] else entries[cand_b]
    return entries[cand_a] if score_a > score_b else entries[cand_b]


def ensemble(
    text_matches: Sequence[BrandEntry],
    vision_result: BrandEntry,
    global_image_feat: np.ndarray,
    prompts: PromptBank,
) -> BrandEntry:
    """Text/vision arbitration: 0 text hits -> vision, 1 -> text, several ->
    best advertisement-prompt similarity over the union."""
    if not text_matches:
        return vision_result
    if len(text_matches) == 1:
        return text_matches[0]
    pool: list[BrandEntry] = []
    seen = set()
    for e in list(text_matches) + [vision_result]:
        if e.name not in seen:
            seen.add(e.name)
            pool.append(e)
    best = None
    best_score = None
    for e in pool:
        s = prompts.ad_score(e.name, global_image_feat)
        if best is None or s > best_score or (s == best_score and e.name < best.name):
            best, best_score = e, s
    return best
