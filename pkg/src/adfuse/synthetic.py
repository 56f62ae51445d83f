"""Seeded synthetic fixture data for the fusion pipeline.

Each message gets a latent unit code; the label-text feature is that code.
The image, scene-text and brand features are independently noised views of a
corrupted copy of the code, all in the shared feature space. Combining views
averages their noise down, so retrieval accuracy rises strictly with every
added modality, while the corruption level caps what any fusion can reach:
the corrupted copy itself is the best possible image-side feature, and its
accuracy is the generator-defined ceiling the tests use as the oracle.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .banks import FeatureBank, save_bank
from .manifest import PairRow, write_manifest


@dataclass(frozen=True)
class FusionSpec:
    n_train: int = 4000
    n_val: int = 300
    n_test: int = 400
    dim: int = 64
    gamma: float = 1.4  # corruption of the shared code; sets the fusion ceiling
    noise: tuple[float, float, float] = (1.35, 0.80, 0.80)  # image, scene_text, brand
    seed: int = 0

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_val + self.n_test


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


@dataclass
class FusionData:
    banks: dict[str, FeatureBank]
    rows: list[PairRow]
    ideal_image_feats: dict[str, np.ndarray]  # best attainable fused feature


def generate_fusion_data(spec: FusionSpec) -> FusionData:
    rng = np.random.default_rng(spec.seed)
    labels, images, scenes, brands = [], [], [], []
    rows: list[PairRow] = []
    ideal: dict[str, np.ndarray] = {}
    for i in range(spec.n_total):
        z = _unit(rng, spec.dim)
        corrupted = z + spec.gamma * _unit(rng, spec.dim)
        corrupted /= np.linalg.norm(corrupted)
        views = []
        for sigma in spec.noise:
            v = corrupted + sigma * _unit(rng, spec.dim)
            views.append(v / np.linalg.norm(v))
        labels.append(z)
        images.append(views[0])
        scenes.append(views[1])
        brands.append(views[2])
        if i < spec.n_train:
            split = "train"
        elif i < spec.n_train + spec.n_val:
            split = "val"
        else:
            split = "test"
        image_id = f"img_{i:05d}"
        rows.append(
            PairRow(
                image_id=image_id,
                label_text_id=f"msg_{i:05d}",
                scene_text_id=f"st_{i:05d}",
                brand_id=f"brand_{i:05d}",
                split=split,
            )
        )
        ideal[image_id] = corrupted
    n = spec.n_total

    def bank(prefix: str, vecs, modality: str) -> FeatureBank:
        ids = [f"{prefix}_{i:05d}" for i in range(n)]
        return FeatureBank(ids, np.array(vecs, dtype=np.float32), modality)

    banks = {
        "image": bank("img", images, "image"),
        "label_text": bank("msg", labels, "label_text"),
        "scene_text": bank("st", scenes, "scene_text"),
        "brand": bank("brand", brands, "brand_prompt"),
    }
    return FusionData(banks=banks, rows=rows, ideal_image_feats=ideal)


def write_fusion_dataset(spec: FusionSpec, out_dir: Path | str) -> dict[str, Path]:
    """Emit the four banks plus the manifest; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = generate_fusion_data(spec)
    paths: dict[str, Path] = {}
    for name, bank in data.banks.items():
        path = out_dir / f"{name}.adfb"
        save_bank(bank, path)
        paths[name] = path
    manifest = out_dir / "manifest.jsonl"
    write_manifest(data.rows, manifest)
    paths["manifest"] = manifest
    return paths
