"""Export operations: images, label/scene texts, brand prompts, regions.

Outputs are standard bank files plus their id sidecars, written through a
resumable appender: every vector row is written before its sidecar line, so
after an interrupt the writer truncates back to the last complete record and
continues without duplicating ids. All vectors are L2-normalized before the
float32 cast, which keeps every emitted file loadable by the bank validator.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from adfuse.banks import FORMAT_VERSION, HEADER, MAGIC, sidecar_path
from adfuse.manifest import PairRow, write_manifest

from .encoders import EncoderClient, EncoderError, RegionProposer

logger = logging.getLogger(__name__)

PROMPT_TEMPLATES = (
    "A brand logo of {name}",
    "A logo of {name}",
    "A trademark of {name}",
    "A brand logo of {name}. {description}",
    "A logo of {name}. {description}",
    "A trademark of {name}. {description}",
)
AD_TEMPLATE = "An advertisement of {name}"


class ExportError(Exception):
    pass


@dataclass
class ExportJob:
    output_path: Path
    modality: str
    dim: int
    items: list[tuple[str, str]] = field(default_factory=list)  # (record id, encoder payload)
    batch_size: int = 32
    encoder_endpoint: str | None = None


@dataclass
class ExportResult:
    written: int
    resumed: int
    failed: list[tuple[str, str]]

    @property
    def flagged(self) -> bool:
        return bool(self.failed)


class BankAppender:
    """Incremental bank writer that can resume a partially written file."""

    def __init__(self, path: Path | str, dim: int, modality: str):
        self.path = Path(path)
        self.side = sidecar_path(self.path)
        self.dim = dim
        self.modality = modality
        self.row_size = dim * 4
        self.ids: list[str] = []
        if self.path.exists():
            self._recover()
        else:
            with open(self.path, "wb") as fh:
                fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, dim, 0))
            self.side.write_text("")
        self._data = open(self.path, "r+b")
        self._data.seek(HEADER.size + len(self.ids) * self.row_size)
        self._side = open(self.side, "a", encoding="utf-8")

    def _recover(self) -> None:
        size = self.path.stat().st_size
        if size < HEADER.size:
            raise ExportError(f"{self.path}: shorter than a bank header")
        with open(self.path, "rb") as fh:
            magic, version, dim, _count = HEADER.unpack(fh.read(HEADER.size))
        if magic != MAGIC or version != FORMAT_VERSION:
            raise ExportError(f"{self.path}: not a bank file")
        if dim != self.dim:
            raise ExportError(f"{self.path}: existing dim {dim} != requested {self.dim}")
        rows: list[str] = []
        if self.side.exists():
            for line in self.side.read_text(encoding="utf-8").splitlines():
                try:
                    obj = json.loads(line)
                    if obj["row"] != len(rows):
                        break
                    rows.append(str(obj["id"]))
                except (json.JSONDecodeError, KeyError):
                    break  # torn tail line from an interrupt
        n_data = (size - HEADER.size) // self.row_size
        valid = min(len(rows), n_data)
        rows = rows[:valid]
        # truncate both files back to the last complete record
        with open(self.path, "r+b") as fh:
            fh.truncate(HEADER.size + valid * self.row_size)
            fh.seek(0)
            fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, self.dim, valid))
        with open(self.side, "w", encoding="utf-8") as fh:
            for row, rid in enumerate(rows):
                fh.write(
                    json.dumps(
                        {"row": row, "id": rid, "modality": self.modality},
                        ensure_ascii=False,
                        separators=(",", ":"),
                    )
                    + "\n"
                )
        self.ids = rows

    def __contains__(self, record_id: str) -> bool:
        return record_id in set(self.ids)

    def append(self, record_id: str, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise ExportError(f"{record_id}: vector shape {vector.shape} != ({self.dim},)")
        norm = np.linalg.norm(vector)
        if not np.isfinite(norm) or norm == 0:
            raise ExportError(f"{record_id}: vector not normalizable")
        self._data.write((vector / norm).astype("<f4").tobytes())
        self._data.flush()
        self._side.write(
            json.dumps(
                {"row": len(self.ids), "id": record_id, "modality": self.modality},
                ensure_ascii=False,
                separators=(",", ":"),
            )
            + "\n"
        )
        self._side.flush()
        self.ids.append(record_id)

    def close(self) -> None:
        self._data.seek(0)
        self._data.write(HEADER.pack(MAGIC, FORMAT_VERSION, self.dim, len(self.ids)))
        self._data.close()
        self._side.close()


def _export_items(
    job: ExportJob, encoder: EncoderClient, items: Sequence[tuple[str, str]]
) -> ExportResult:
    seen: set[str] = set()
    for rid, _ in items:
        if rid in seen:
            raise ExportError(f"duplicate record id {rid!r} in export listing")
        seen.add(rid)
    appender = BankAppender(job.output_path, job.dim, job.modality)
    existing = set(appender.ids)
    todo = [(rid, payload) for rid, payload in items if rid not in existing]
    resumed = len(items) - len(todo)
    failed: list[tuple[str, str]] = []
    written = 0
    try:
        for start in range(0, len(todo), job.batch_size):
            batch = todo[start : start + job.batch_size]
            payloads = [p for _, p in batch]
            try:
                vectors = encoder.encode(payloads)
                per_item = list(zip(batch, vectors))
            except EncoderError:
                per_item = []
                for rid, payload in batch:  # isolate the failing items
                    try:
                        per_item.append(((rid, payload), encoder.encode([payload])[0]))
                    except EncoderError as exc:
                        logger.warning("encoder failed for %r: %s", rid, exc)
                        failed.append((rid, str(exc)))
            for (rid, _), vec in per_item:
                appender.append(rid, vec)
                written += 1
    finally:
        appender.close()
    if failed:
        logger.warning("%s: partial output, %d items failed", job.output_path, len(failed))
    return ExportResult(written=written, resumed=resumed, failed=failed)


def export_images(job: ExportJob, encoder: EncoderClient) -> ExportResult:
    """One record per image id; vectors L2-normalized before the write."""
    return _export_items(job, encoder, job.items)


def export_texts(job: ExportJob, encoder: EncoderClient) -> ExportResult:
    """Label or scene-text records from a (id, text) listing."""
    return _export_items(job, encoder, job.items)


def prompt_strings(name: str, description: str) -> list[tuple[str, str]]:
    """The 6 scoring prompts plus the advertisement prompt for one entry."""
    out = [
        (f"{name}/prompt/{k}", template.format(name=name, description=description))
        for k, template in enumerate(PROMPT_TEMPLATES)
    ]
    out.append((f"{name}/ad", AD_TEMPLATE.format(name=name)))
    return out


def export_prompts(job: ExportJob, kb, encoder: EncoderClient) -> ExportResult:
    """7 records per KB entry with the exact template strings."""
    items: list[tuple[str, str]] = []
    for entry in kb.entries:
        items.extend(prompt_strings(entry.name, entry.description))
    return _export_items(job, encoder, items)


def export_regions(
    job: ExportJob, proposer: RegionProposer, encoder: EncoderClient
) -> ExportResult:
    """Region crops plus one whole-image record per image.

    A proposal failure degrades that image to its global record only and
    flags the result; encoding failures are handled per item as elsewhere.
    """
    items: list[tuple[str, str]] = []
    proposal_failures: list[tuple[str, str]] = []
    for image_id, image_ref in job.items:
        try:
            crops = proposer.propose(image_ref)
        except EncoderError as exc:
            logger.warning("region proposal failed for %r: %s", image_id, exc)
            proposal_failures.append((image_id, str(exc)))
            crops = []
        for k, crop in enumerate(crops):
            items.append((f"{image_id}/region/{k}", crop))
        items.append((f"{image_id}/global", image_ref))
    result = _export_items(job, encoder, items)
    result.failed.extend(proposal_failures)
    return result


def export_pair_manifest(rows: Sequence[PairRow], path: Path | str) -> None:
    """Training manifest in the primary's JSON-lines schema."""
    write_manifest(list(rows), path)
