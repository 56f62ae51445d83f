"""Dataset manifests: JSON-lines rows binding image ids to text/brand ids."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

SPLITS = ("train", "val", "test")


class ManifestError(Exception):
    pass


@dataclass(frozen=True)
class PairRow:
    image_id: str
    label_text_id: str
    split: str
    scene_text_id: str | None = None
    brand_id: str | None = None


def read_manifest(path: Path | str) -> list[PairRow]:
    rows: list[PairRow] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                row = PairRow(
                    image_id=str(obj["image_id"]),
                    label_text_id=str(obj["label_text_id"]),
                    split=str(obj["split"]),
                    scene_text_id=obj.get("scene_text_id"),
                    brand_id=obj.get("brand_id"),
                )
            except KeyError as exc:
                raise ManifestError(f"{path}:{lineno}: missing field {exc}") from exc
            if row.split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {row.split!r}")
            rows.append(row)
    if not rows:
        raise ManifestError(f"{path}: empty manifest")
    return rows


def write_manifest(rows: list[PairRow], path: Path | str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            obj = {"image_id": row.image_id, "label_text_id": row.label_text_id}
            if row.scene_text_id is not None:
                obj["scene_text_id"] = row.scene_text_id
            if row.brand_id is not None:
                obj["brand_id"] = row.brand_id
            obj["split"] = row.split
            fh.write(json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n")
