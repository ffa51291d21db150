"""Seeded 1-D heightfield terrain: flat, slope, hurdle and discrete kinds.

A patch spans [0, patch_len] meters sampled every `spacing` meters. Feature
magnitudes scale linearly with the difficulty level in [0, 9]; with a fixed
seed the underlying random draws are identical across levels, which makes
max feature height monotone in level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError

TERRAIN_KINDS = ("flat", "slope", "hurdle", "discrete")
TERRAIN_TAG = "bipedrl-terrain-v1"

MAX_SLOPE_DEG = 16.6
MAX_HURDLE_HEIGHT = 0.1
DISCRETE_HEIGHT_RANGE = (0.03, 0.15)
DISCRETE_EXTENT_RANGE = (0.5, 2.0)
N_DISCRETE_BLOCKS = 20
HURDLE_WIDTH = 0.30


@dataclass
class Terrain:
    kind: str
    level: float
    seed: int
    spacing: float
    heights: np.ndarray  # (n_samples,) float32, heights[i] at x = i * spacing

    @property
    def length(self) -> float:
        return (len(self.heights) - 1) * self.spacing


def generate_terrain(kind: str, level: float, seed: int, patch_len: float = 8.0,
                     spacing: float = 0.05, n_hurdles: int = 4) -> Terrain:
    if kind not in TERRAIN_KINDS:
        raise ContractError(f"unknown terrain kind {kind!r}")
    if not (0.0 <= level <= 9.0):
        raise ContractError(f"terrain level must be in [0, 9], got {level}")
    n = int(round(patch_len / spacing)) + 1
    x = np.arange(n, dtype=np.float64) * spacing
    frac = level / 9.0
    h = np.zeros(n, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if kind == "slope":
        h = math.tan(math.radians(frac * MAX_SLOPE_DEG)) * x
    elif kind == "hurdle":
        height = frac * MAX_HURDLE_HEIGHT
        # regular spacing, first hurdle away from the spawn point
        gap = (patch_len - 2.0) / max(n_hurdles, 1)
        for i in range(n_hurdles):
            x0 = 1.5 + i * gap
            h[(x >= x0) & (x <= x0 + HURDLE_WIDTH)] = height
    elif kind == "discrete":
        lo, hi = DISCRETE_HEIGHT_RANGE
        for _ in range(N_DISCRETE_BLOCKS):
            extent = rng.uniform(*DISCRETE_EXTENT_RANGE)
            x0 = rng.uniform(0.5, patch_len - 0.5)
            height = frac * rng.uniform(lo, hi)
            sel = (x >= x0) & (x <= x0 + extent)
            h[sel] = np.maximum(h[sel], height)
    return Terrain(kind=kind, level=level, seed=seed, spacing=spacing,
                   heights=h.astype(np.float32))


def export_terrain(t: Terrain) -> str:
    lines = [TERRAIN_TAG,
             f"kind {t.kind}",
             f"level {t.level}",
             f"seed {t.seed}",
             f"spacing {t.spacing}",
             "heights " + " ".join(f"{v:.6f}" for v in t.heights)]
    return "\n".join(lines) + "\n"


def import_terrain(text: str) -> Terrain:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != TERRAIN_TAG:
        raise ContractError("not a terrain file (missing tag)")
    kv = {}
    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        kv[key] = rest
    try:
        heights = np.array([float(v) for v in kv["heights"].split()], dtype=np.float32)
        return Terrain(kind=kv["kind"], level=float(kv["level"]), seed=int(kv["seed"]),
                       spacing=float(kv["spacing"]), heights=heights)
    except KeyError as e:
        raise ContractError(f"terrain file missing field {e}") from None


class TerrainBatch:
    """Per-environment heightfields with vectorized interpolation lookup."""

    def __init__(self, terrains: list[Terrain]):
        if not terrains:
            raise ContractError("empty terrain batch")
        n_samples = len(terrains[0].heights)
        if any(len(t.heights) != n_samples for t in terrains):
            raise ContractError("terrains in a batch must share sample count")
        self.spacing = terrains[0].spacing
        self.heights = np.stack([t.heights for t in terrains]).astype(np.float32)
        self.kinds = [t.kind for t in terrains]
        self.levels = np.array([t.level for t in terrains], dtype=np.float32)
        self.n_envs = len(terrains)
        self.length = (n_samples - 1) * self.spacing

    def replace(self, idx: np.ndarray, terrains: list[Terrain]):
        for row, t in zip(np.atleast_1d(idx), terrains):
            self.heights[row] = t.heights
            self.kinds[int(row)] = t.kind
            self.levels[row] = t.level

    def lookup(self, xs: np.ndarray, env_idx: np.ndarray | None = None) -> np.ndarray:
        """Interpolated terrain height under world x; (rows, k) -> (rows, k).

        Rows align with environments unless env_idx selects a subset.
        Heights clamp to the edge values outside the patch.
        """
        n_samples = self.heights.shape[1]
        u = np.clip(xs / self.spacing, 0.0, n_samples - 1 - 1e-6)
        i0 = u.astype(np.int64)
        f = (u - i0).astype(np.float32)
        rows = (np.arange(self.heights.shape[0]) if env_idx is None
                else np.asarray(env_idx))[:, None]
        h0 = self.heights[rows, i0]
        h1 = self.heights[rows, np.minimum(i0 + 1, n_samples - 1)]
        return h0 * (1.0 - f) + h1 * f
