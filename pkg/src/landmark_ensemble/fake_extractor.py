"""Deterministic stand-in for the external embedding extractor.

Emits one vector per manifest image (and per salient crop when region
records are supplied) in the standard embedding file format. Vectors are
not learned features: a block of channel statistics computed from the
pixels is tiled across the leading dimensions, and the remainder is
low-amplitude noise seeded from the pixel content, so the same image always
maps to the same vector, under any id, on any run. That is enough signal
for the downstream classifiers to be exercised end to end without any
pretrained backbone.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import imaging
from ._rng import stream
from .embeddings import DatasetManifest, EmbeddingStore
from .gbvs import SalientRegion

__all__ = ["image_stats", "fake_embedding", "extract_fake"]

_STATS_TILES = 16
_STATS_GAIN = 2.0
_NOISE_SCALE = 0.01


def image_stats(img: np.ndarray) -> np.ndarray:
    """16 channel/texture statistics of an RGB image in [0, 1]."""
    img = imaging.validate_image(img)
    lum = imaging.to_luminance(img)
    rg, by = imaging.color_opponency(img)
    dx = np.abs(np.diff(lum, axis=1))
    dy = np.abs(np.diff(lum, axis=0))
    diag = np.abs(lum[1:, 1:] - lum[:-1, :-1])
    inner = lum[1:-1, 1:-1]
    neighbours = (lum[:-2, 1:-1] + lum[2:, 1:-1] + lum[1:-1, :-2] + lum[1:-1, 2:]) / 4.0
    checker = np.abs(inner - neighbours) if inner.size else np.zeros((1, 1))
    edge = 0.0
    if dx[:-1].size and dy[:, :-1].size:
        edge = float((dx[:-1, :] + dy[:, :-1] > 0.15).mean())
    return np.array(
        [
            img[:, :, 0].mean(),
            img[:, :, 1].mean(),
            img[:, :, 2].mean(),
            img[:, :, 0].std(),
            img[:, :, 1].std(),
            img[:, :, 2].std(),
            lum.mean(),
            lum.std(),
            dx.mean() if dx.size else 0.0,
            dy.mean() if dy.size else 0.0,
            diag.mean() if diag.size else 0.0,
            checker.mean(),
            edge,
            rg.mean(),
            by.mean(),
            lum.max() - lum.min(),
        ]
    )


def _content_seed(img: np.ndarray) -> int:
    digest = hashlib.sha256(np.ascontiguousarray(img).tobytes()).digest()
    return int.from_bytes(digest[:8], "little")


def fake_embedding(img: np.ndarray, dim: int = 2048, seed: int = 0) -> np.ndarray:
    """Stats block tiled over the leading dims, content-seeded noise after."""
    stats = image_stats(img) * _STATS_GAIN
    block = np.tile(stats, _STATS_TILES)
    if dim < block.size:
        vec = block[:dim]
    else:
        rng = stream(seed, "fake-embedding", _content_seed(img))
        noise = rng.normal(0.0, _NOISE_SCALE, size=dim - block.size)
        vec = np.concatenate([block, noise])
    return vec.astype(np.float32)


def extract_fake(
    manifest: DatasetManifest,
    images_root,
    regions: list[tuple[str, int, SalientRegion]] | None = None,
    dim: int = 2048,
    seed: int = 0,
) -> EmbeddingStore:
    """Embed every manifest image, plus ``<id>#<rank>`` records for crops."""
    import os

    store = EmbeddingStore(dim)
    by_image: dict[str, list[tuple[int, SalientRegion]]] = {}
    for image_id, rank, region in regions or []:
        by_image.setdefault(image_id, []).append((rank, region))

    for e in manifest.entries:
        path = e.path if os.path.isabs(e.path) else os.path.join(images_root, e.path)
        img = imaging.load_image(path)
        store.add(e.path, fake_embedding(img, dim, seed))
        for rank, region in sorted(by_image.get(e.path, [])):
            x0, y0, x1, y1 = region.crop_box
            store.add(f"{e.path}#{rank}", fake_embedding(img[y0:y1, x0:x1], dim, seed))
    return store
