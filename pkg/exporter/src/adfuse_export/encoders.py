"""Encoder and region-proposal clients.

The exporter is the only component that talks to external services; the
HTTP client posts batched JSON and expects ``{"vectors": [[...], ...]}``
back. The deterministic fake encoder exists for tests and dry runs: it
derives a unit vector from a hash of the item, so re-exports are exactly
reproducible without any service.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import requests


class EncoderError(Exception):
    pass


class EncoderClient(Protocol):
    dim: int

    def encode(self, items: Sequence[str]) -> np.ndarray:
        """One vector per item; raises EncoderError on failure."""


class RegionProposer(Protocol):
    def propose(self, image_ref: str) -> list[str]:
        """Region references for one image (may be empty); raises on failure."""


@dataclass
class HttpEncoderClient:
    endpoint: str
    dim: int
    timeout: float = 30.0

    def encode(self, items: Sequence[str]) -> np.ndarray:
        try:
            resp = requests.post(self.endpoint, json={"items": list(items)}, timeout=self.timeout)
            resp.raise_for_status()
            vectors = np.asarray(resp.json()["vectors"], dtype=np.float64)
        except (requests.RequestException, KeyError, ValueError) as exc:
            raise EncoderError(f"{self.endpoint}: {exc}") from exc
        if vectors.shape != (len(items), self.dim):
            raise EncoderError(
                f"{self.endpoint}: expected {(len(items), self.dim)} vectors, got {vectors.shape}"
            )
        return vectors


@dataclass
class HttpRegionProposer:
    endpoint: str
    timeout: float = 30.0

    def propose(self, image_ref: str) -> list[str]:
        try:
            resp = requests.post(self.endpoint, json={"image": image_ref}, timeout=self.timeout)
            resp.raise_for_status()
            return [str(r) for r in resp.json()["regions"]]
        except (requests.RequestException, KeyError, ValueError) as exc:
            raise EncoderError(f"{self.endpoint}: {exc}") from exc


class FakeEncoder:
    """Deterministic stand-in: unit vector seeded by the item's hash."""

    def __init__(self, dim: int, fail_items: set[str] | None = None):
        self.dim = dim
        self.fail_items = fail_items or set()

    def encode(self, items: Sequence[str]) -> np.ndarray:
        out = np.empty((len(items), self.dim))
        for i, item in enumerate(items):
            if item in self.fail_items:
                raise EncoderError(f"fake encoder refuses {item!r}")
            digest = hashlib.sha256(item.encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            v = rng.standard_normal(self.dim)
            out[i] = v / np.linalg.norm(v)
        return out


class FakeRegionProposer:
    """Deterministic proposals: ``n_regions(image_ref)`` synthetic crops."""

    def __init__(self, counts: dict[str, int] | None = None, default: int = 2):
        self.counts = counts or {}
        self.default = default

    def propose(self, image_ref: str) -> list[str]:
        n = self.counts.get(image_ref, self.default)
        return [f"{image_ref}#crop{k}" for k in range(n)]
