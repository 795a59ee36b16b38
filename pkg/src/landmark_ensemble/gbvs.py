"""Graph-based visual saliency and salient-region extraction.

Feature maps become fully connected graphs over a fixed grid: edge weights
combine feature dissimilarity (absolute log ratio) with a Gaussian falloff in
grid distance. The equilibrium mass of the resulting Markov chain is the
activation; a second chain whose weights attract mass toward high activation
concentrates it into peaks; the per-channel results are summed and rescaled
into a master map, from which the top regions are picked greedily.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imaging
from .errors import ConvergenceError

__all__ = [
    "GbvsConfig",
    "SaliencyMap",
    "SalientRegion",
    "dissimilarity_weight",
    "build_transition",
    "markov_equilibrium",
    "activate",
    "normalize_map",
    "combine_maps",
    "compute_saliency",
    "top_k_regions",
    "extract_crops",
    "write_region_records",
    "read_region_records",
]

# Relative spread below which a map counts as flat (degenerate fallback path).
_FLAT_RTOL = 1e-12

# Damping weight for the equilibrium iteration. Plain power iteration
# oscillates on bipartite chains (e.g. a single-spike map over a constant
# background); mixing in the identity preserves the fixed point and
# guarantees convergence for every irreducible chain.
_DAMPING = 0.05


@dataclass(frozen=True)
class GbvsConfig:
    """Saliency parameters. Sigmas default to fractions of the grid width."""

    grid_w: int = 32
    grid_h: int = 32
    sigma_act: float | None = None  # default 0.15 * grid_w
    sigma_norm: float | None = None  # default 0.06 * grid_w
    eps_clamp: float = 1e-6
    power_iter_tol: float = 1e-9
    power_iter_max: int = 10_000
    num_regions: int = 5
    suppression_radius: float = 1.0 / 6.0  # fraction of grid width
    crop_fraction: float = 0.5  # fraction of min(image dims)
    pyramid_levels: int = 2

    def __post_init__(self):
        if self.grid_w < 2 or self.grid_h < 2:
            raise ValueError("grid dimensions must be >= 2")
        if self.sigma_act is None:
            object.__setattr__(self, "sigma_act", 0.15 * self.grid_w)
        if self.sigma_norm is None:
            object.__setattr__(self, "sigma_norm", 0.06 * self.grid_w)
        if self.sigma_act <= 0 or self.sigma_norm <= 0:
            raise ValueError("sigmas must be positive")
        if not (0.0 < self.eps_clamp < 1.0):
            raise ValueError("eps_clamp must lie in (0, 1)")
        if self.power_iter_tol <= 0:
            raise ValueError("power_iter_tol must be positive")
        if self.power_iter_max < 1:
            raise ValueError("power_iter_max must be >= 1")
        if self.num_regions < 1:
            raise ValueError("num_regions must be >= 1")
        if not (0.0 < self.suppression_radius < 1.0):
            raise ValueError("suppression_radius must lie in (0, 1)")
        if not (0.0 < self.crop_fraction <= 1.0):
            raise ValueError("crop_fraction must lie in (0, 1]")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")


@dataclass(frozen=True)
class SaliencyMap:
    """Master saliency grid plus the source-image dimensions it maps back to."""

    grid: np.ndarray  # (grid_h, grid_w), values in [0, 1]
    source_w: int
    source_h: int


@dataclass(frozen=True)
class SalientRegion:
    """A ranked peak in source-image pixel coordinates."""

    center_x: int
    center_y: int
    score: float
    crop_box: tuple[int, int, int, int]  # (x0, y0, x1, y1), x1/y1 exclusive


_falloff_cache: dict[tuple[int, int, float], np.ndarray] = {}


def _grid_falloff(grid_w: int, grid_h: int, sigma: float) -> np.ndarray:
    """exp(-d^2 / (2 sigma^2)) for all node pairs of a row-major grid."""
    key = (grid_w, grid_h, float(sigma))
    cached = _falloff_cache.get(key)
    if cached is not None:
        return cached
    ys, xs = np.divmod(np.arange(grid_w * grid_h), grid_w)
    d2 = (xs[:, None] - xs[None, :]) ** 2 + (ys[:, None] - ys[None, :]) ** 2
    falloff = np.exp(-d2 / (2.0 * sigma**2))
    _falloff_cache[key] = falloff
    return falloff


def dissimilarity_weight(m: np.ndarray, a: int, b: int, sigma: float) -> float:
    """|log(M(a)/M(b))| * exp(-d^2/(2 sigma^2)) for flat node indices a, b.

    The map must already be clamped to a positive floor.
    """
    flat = np.asarray(m, dtype=np.float64).ravel()
    w = m.shape[1]
    ax, ay = a % w, a // w
    bx, by = b % w, b // w
    d2 = (ax - bx) ** 2 + (ay - by) ** 2
    return abs(np.log(flat[a] / flat[b])) * np.exp(-d2 / (2.0 * sigma**2))


def _column_normalize(weights: np.ndarray) -> np.ndarray:
    """Divide each column by its sum; all-zero columns become uniform."""
    n = weights.shape[0]
    sums = weights.sum(axis=0)
    dead = sums <= 0.0
    safe = np.where(dead, 1.0, sums)
    t = weights / safe
    if dead.any():
        t[:, dead] = 1.0 / n
    return t


def build_transition(m: np.ndarray, sigma: float) -> np.ndarray:
    """Assemble the dissimilarity chain of a grid map, column-stochastic.

    Column j holds the outgoing probabilities of node j. A flat map (all
    outgoing weights zero) falls back to uniform columns.
    """
    m = imaging.validate_map(m)
    if m.min() <= 0.0:
        raise ValueError("map must be strictly positive; clamp to the floor first")
    h, w = m.shape
    logs = np.log(m.astype(np.float64).ravel())
    weights = np.abs(logs[:, None] - logs[None, :]) * _grid_falloff(w, h, sigma)
    np.fill_diagonal(weights, 0.0)
    return _column_normalize(weights)


def markov_equilibrium(t: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    """Equilibrium distribution of a column-stochastic chain.

    Damped power iteration from the uniform vector; returns v with v >= 0,
    sum(v) == 1 (renormalized each step) and ||Tv - v||_1 < tol. Raises
    ConvergenceError with the final residual when max_iter is exhausted.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ValueError(f"transition matrix must be square, got {t.shape}")
    n = t.shape[0]
    v = np.full(n, 1.0 / n)
    residual = np.inf
    for _ in range(max_iter):
        w = t @ v
        residual = float(np.abs(w - v).sum())
        if residual < tol:
            return v
        v = (1.0 - _DAMPING) * w + _DAMPING * v
        v /= v.sum()
    raise ConvergenceError(residual, max_iter, tol)


def _is_flat(m: np.ndarray) -> bool:
    mx, mn = float(m.max()), float(m.min())
    return (mx - mn) <= _FLAT_RTOL * max(1.0, abs(mx), abs(mn))


def activate(feature_map: np.ndarray, cfg: GbvsConfig) -> np.ndarray:
    """Equilibrium mass of the dissimilarity chain, reshaped to the grid.

    The map must already be at grid resolution; it is clamped to the
    positive floor here before the log-ratio weights are formed.
    """
    feature_map = imaging.validate_map(feature_map)
    if feature_map.shape != (cfg.grid_h, cfg.grid_w):
        raise ValueError(
            f"feature map shape {feature_map.shape} != grid ({cfg.grid_h}, {cfg.grid_w})"
        )
    clamped = np.maximum(feature_map, cfg.eps_clamp)
    t = build_transition(clamped, cfg.sigma_act)
    v = markov_equilibrium(t, cfg.power_iter_tol, cfg.power_iter_max)
    return v.reshape(cfg.grid_h, cfg.grid_w)


def normalize_map(activation: np.ndarray, cfg: GbvsConfig) -> np.ndarray:
    """Second chain pass concentrating mass at high-activation cells.

    Weights into node i are activation(i) * falloff(d); a flat activation
    (including all-zero) short-circuits to the uniform grid.
    """
    activation = imaging.validate_map(activation)
    if activation.shape != (cfg.grid_h, cfg.grid_w):
        raise ValueError(
            f"activation shape {activation.shape} != grid ({cfg.grid_h}, {cfg.grid_w})"
        )
    if activation.min() < 0.0:
        raise ValueError("activation must be non-negative")
    n = activation.size
    if _is_flat(activation):
        return np.full((cfg.grid_h, cfg.grid_w), 1.0 / n)
    falloff = _grid_falloff(cfg.grid_w, cfg.grid_h, cfg.sigma_norm)
    weights = activation.ravel()[:, None] * falloff
    t = _column_normalize(weights)
    v = markov_equilibrium(t, cfg.power_iter_tol, cfg.power_iter_max)
    return v.reshape(cfg.grid_h, cfg.grid_w)


def combine_maps(maps: list[np.ndarray]) -> np.ndarray:
    """Sum in list order, then rescale affinely to [0, 1]; flat sums go to zero."""
    if not maps:
        raise ValueError("combine_maps needs at least one map")
    first = imaging.validate_map(maps[0])
    total = first.copy()
    for m in maps[1:]:
        m = imaging.validate_map(m)
        if m.shape != first.shape:
            raise ValueError(f"map shape mismatch: {m.shape} != {first.shape}")
        total += m
    mx, mn = float(total.max()), float(total.min())
    if (mx - mn) <= _FLAT_RTOL * max(1.0, abs(mx), abs(mn)):
        return np.zeros_like(total)
    return (total - mn) / (mx - mn)


def _channel_maps(img: np.ndarray, cfg: GbvsConfig) -> list[np.ndarray]:
    """Per-level channel stack: luminance, RG, BY, then the orientation bank.

    Level-major order; the orientation responses are computed on the
    luminance pyramid at each level.
    """
    lum = imaging.to_luminance(img)
    rg, by = imaging.color_opponency(img)
    lum_pyr = imaging.build_pyramid(lum, cfg.pyramid_levels)
    rg_pyr = imaging.build_pyramid(rg, cfg.pyramid_levels)
    by_pyr = imaging.build_pyramid(by, cfg.pyramid_levels)
    maps = []
    for level in range(cfg.pyramid_levels):
        maps.append(lum_pyr[level])
        maps.append(rg_pyr[level])
        maps.append(by_pyr[level])
        for params in imaging.GABOR_BANK:
            maps.append(imaging.gabor_response(lum_pyr[level], params))
    return maps


def compute_saliency(img: np.ndarray, cfg: GbvsConfig | None = None) -> SaliencyMap:
    """Full pipeline: channels x scales -> activate -> normalize -> master map."""
    cfg = cfg or GbvsConfig()
    img = imaging.validate_image(img)
    h, w = img.shape[0], img.shape[1]
    normalized = []
    for m in _channel_maps(img, cfg):
        at_grid = imaging.resize_plane(m, cfg.grid_w, cfg.grid_h)
        act = activate(at_grid, cfg)
        normalized.append(normalize_map(act, cfg))
    grid = combine_maps(normalized)
    return SaliencyMap(grid=grid, source_w=w, source_h=h)


def _fallback_centers(grid_w: int, grid_h: int, k: int) -> list[tuple[float, float]]:
    """Fixed layout for an all-zero map: grid center plus quadrant centers."""
    layout = [
        (grid_w / 2.0, grid_h / 2.0),
        (grid_w / 4.0, grid_h / 4.0),
        (3.0 * grid_w / 4.0, grid_h / 4.0),
        (grid_w / 4.0, 3.0 * grid_h / 4.0),
        (3.0 * grid_w / 4.0, 3.0 * grid_h / 4.0),
    ]
    return [layout[i % len(layout)] for i in range(k)]


def _crop_box(cx: int, cy: int, side: int, img_w: int, img_h: int) -> tuple[int, int, int, int]:
    x0 = min(max(cx - side // 2, 0), img_w - side)
    y0 = min(max(cy - side // 2, 0), img_h - side)
    return (x0, y0, x0 + side, y0 + side)


def top_k_regions(sal: SaliencyMap, cfg: GbvsConfig | None = None) -> list[SalientRegion]:
    """Greedy peak picking with Euclidean non-maximum suppression.

    Scores are non-increasing; grid centers end up pairwise separated by at
    least suppression_radius * grid_w cells. An all-zero map yields the fixed
    fallback layout at score 0. If suppression exhausts the grid early, the
    remaining slots also fall back to the fixed layout.
    """
    cfg = cfg or GbvsConfig()
    grid = imaging.validate_map(sal.grid)
    gh, gw = grid.shape
    side = max(1, round(cfg.crop_fraction * min(sal.source_w, sal.source_h)))
    cell_w = sal.source_w / gw
    cell_h = sal.source_h / gh

    def region_at(gx: float, gy: float, score: float) -> SalientRegion:
        cx = min(int((gx + 0.5) * cell_w), sal.source_w - 1)
        cy = min(int((gy + 0.5) * cell_h), sal.source_h - 1)
        return SalientRegion(
            center_x=cx,
            center_y=cy,
            score=score,
            crop_box=_crop_box(cx, cy, side, sal.source_w, sal.source_h),
        )

    if not np.any(grid):
        return [region_at(gx - 0.5, gy - 0.5, 0.0) for gx, gy in _fallback_centers(gw, gh, cfg.num_regions)]

    radius = cfg.suppression_radius * gw
    ys, xs = np.divmod(np.arange(grid.size), gw)
    working = grid.ravel().copy()
    regions: list[SalientRegion] = []
    for _ in range(cfg.num_regions):
        best = int(np.argmax(working))
        if not np.isfinite(working[best]):
            break
        gx, gy = int(xs[best]), int(ys[best])
        regions.append(region_at(gx, gy, float(grid.ravel()[best])))
        suppress = (xs - gx) ** 2 + (ys - gy) ** 2 <= radius**2
        working[suppress] = -np.inf
    if len(regions) < cfg.num_regions:
        missing = cfg.num_regions - len(regions)
        fallback = _fallback_centers(gw, gh, cfg.num_regions)[-missing:]
        regions.extend(region_at(gx - 0.5, gy - 0.5, 0.0) for gx, gy in fallback)
    return regions


def extract_crops(
    img: np.ndarray, regions: list[SalientRegion], out_size: int = 416
) -> list[np.ndarray]:
    """Cut each region's crop box and resize it to out_size x out_size."""
    img = imaging.validate_image(img)
    h, w = img.shape[0], img.shape[1]
    crops = []
    for region in regions:
        x0, y0, x1, y1 = region.crop_box
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise ValueError(f"crop box {region.crop_box} outside {w}x{h} image")
        crops.append(imaging.resize_bilinear(img[y0:y1, x0:x1], out_size, out_size))
    return crops


def write_region_records(path, records: list[tuple[str, list[SalientRegion]]]) -> None:
    """Line format: image_id, rank, cx, cy, score, x0,y0,x1,y1 (tab-separated)."""
    lines = []
    for image_id, regions in records:
        for rank, region in enumerate(regions, start=1):
            x0, y0, x1, y1 = region.crop_box
            lines.append(
                f"{image_id}\t{rank}\t{region.center_x}\t{region.center_y}"
                f"\t{region.score!r}\t{x0},{y0},{x1},{y1}\n"
            )
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def read_region_records(path) -> list[tuple[str, int, SalientRegion]]:
    """Parse region records as (image_id, rank, region) tuples in file order."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            image_id, rank, cx, cy, score, box = parts
            x0, y0, x1, y1 = (int(v) for v in box.split(","))
            region = SalientRegion(
                center_x=int(cx), center_y=int(cy), score=float(score), crop_box=(x0, y0, x1, y1)
            )
            out.append((image_id, int(rank), region))
    return out
