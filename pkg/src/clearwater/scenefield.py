"""Neural scene representation: hash-grid encoding and reflectance heads.

A point is encoded by interpolating learned feature tables at a stack of
grid resolutions growing geometrically from coarse to fine. Coarse levels
whose dense grid fits the table budget index directly; finer levels fold
their vertex coordinates through a spatial hash and tolerate collisions.
Three small MLP heads read the concatenated features and produce density,
albedo, and a unit surface normal.

Gradients flow into the feature tables and head weights only; sample
coordinates are treated as fixed lookup structure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc

HASH_PRIMES = (1, 2654435761, 805459861)

# Corner offsets of a unit cell, binary order (z fastest).
_CORNERS = np.array(
    [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.int64
)


@dataclass(frozen=True)
class EncoderConfig:
    levels: int = 8
    features_per_level: int = 2
    table_size: int = 2**14
    base_resolution: int = 16
    max_resolution: int = 256
    aabb_lo: tuple = (-1.0, -1.0, -1.0)
    aabb_hi: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.features_per_level < 1 or self.table_size < 1:
            raise ValueError("features_per_level and table_size must be >= 1")
        if not (2 <= self.base_resolution <= self.max_resolution):
            raise ValueError(
                f"need 2 <= base {self.base_resolution} <= max {self.max_resolution}"
            )
        lo, hi = np.asarray(self.aabb_lo), np.asarray(self.aabb_hi)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(hi > lo):
            raise ValueError(f"bad domain box lo={self.aabb_lo} hi={self.aabb_hi}")


@dataclass(frozen=True)
class HeadsConfig:
    width: int = 64
    depth: int = 3  # affine layers per head

    def __post_init__(self):
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")


@dataclass
class SceneSample:
    """Field outputs at a batch of points; entries are Nodes or ndarrays."""

    sigma: object  # (n,) density, >= 0
    albedo: object  # (n, 3), >= 0; the renderer clamps to <= 1
    normal: object  # (n, 3), unit rows


def level_resolutions(cfg: EncoderConfig) -> list[int]:
    """Per-level grid resolutions on a geometric schedule from base to max."""
    if cfg.levels == 1:
        return [cfg.base_resolution]
    growth = (cfg.max_resolution / cfg.base_resolution) ** (1.0 / (cfg.levels - 1))
    res = [int(round(cfg.base_resolution * growth**i)) for i in range(cfg.levels)]
    res[0], res[-1] = cfg.base_resolution, cfg.max_resolution
    return res


class HashGridEncoder:
    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        self.resolutions = level_resolutions(cfg)
        # Dense indexing while the full vertex grid fits the table budget.
        self.rows = [min(r**3, cfg.table_size) for r in self.resolutions]
        self.dense = [r**3 <= cfg.table_size for r in self.resolutions]
        self._lo = np.asarray(cfg.aabb_lo, dtype=np.float64)
        self._span = np.asarray(cfg.aabb_hi, dtype=np.float64) - self._lo

    @property
    def out_dim(self) -> int:
        return self.cfg.levels * self.cfg.features_per_level

    def table_name(self, level: int) -> str:
        return f"field/grid/l{level}"

    def register(self, store: gc.ParamStore, rng: np.random.Generator) -> None:
        for lvl in range(self.cfg.levels):
            init = rng.uniform(-1e-4, 1e-4, size=(self.rows[lvl], self.cfg.features_per_level))
            store.add(self.table_name(lvl), init)

    def _lookup(self, x: np.ndarray, level: int):
        """Corner indices and trilinear weights for one level.

        Args:
            x: (n, 3) world points; coordinates clamp to the domain box.

        Returns:
            (indices (n, 8) int, weights (n, 8)) with weights summing to 1.
        """
        res = self.resolutions[level]
        u = np.clip((x - self._lo) / self._span, 0.0, 1.0)
        g = u * (res - 1)
        c0 = np.minimum(g.astype(np.int64), res - 2)
        frac = g - c0
        corners = c0[:, None, :] + _CORNERS[None, :, :]
        if self.dense[level]:
            idx = (corners[..., 0] * res + corners[..., 1]) * res + corners[..., 2]
        else:
            h = corners.astype(np.uint64)
            mixed = (
                h[..., 0] * np.uint64(HASH_PRIMES[0])
                ^ h[..., 1] * np.uint64(HASH_PRIMES[1])
                ^ h[..., 2] * np.uint64(HASH_PRIMES[2])
            )
            idx = (mixed % np.uint64(self.rows[level])).astype(np.int64)
        one_minus = 1.0 - frac
        parts = np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], one_minus[:, None, :])
        weights = parts.prod(axis=2)
        return idx, weights

    def encode(self, ctx: gc.EvalContext, x: np.ndarray):
        """Concatenated per-level features for points x of shape (n, 3)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != 3:
            raise ValueError(f"expected (n, 3) points, got {x.shape}")
        feats = []
        for lvl in range(self.cfg.levels):
            idx, w = self._lookup(x, lvl)
            table = ctx.param(self.table_name(lvl))
            # weights are computed in float64 for stable grid coordinates, then
            # dropped to the table dtype so features inherit it (float32 training)
            feats.append(gc.trilerp(table, idx, w.astype(table.dtype)))
        return gc.concat(feats, axis=1)


class SceneField:
    """Hash-grid encoding feeding density, albedo, and normal heads."""

    HEADS = (("sigma", 1), ("albedo", 3), ("normal", 3))

    def __init__(self, enc_cfg: EncoderConfig | None = None, heads_cfg: HeadsConfig | None = None):
        self.encoder = HashGridEncoder(enc_cfg or EncoderConfig())
        self.heads_cfg = heads_cfg or HeadsConfig()

    def _layer_dims(self, out_dim: int) -> list[tuple[int, int]]:
        width, depth = self.heads_cfg.width, self.heads_cfg.depth
        dims = []
        d_in = self.encoder.out_dim
        for i in range(depth):
            d_out = out_dim if i == depth - 1 else width
            dims.append((d_in, d_out))
            d_in = d_out
        return dims

    def register(self, store: gc.ParamStore, rng: np.random.Generator,
                 normal_hint=None) -> None:
        """Create all parameters.

        normal_hint, when given, is a (3,) direction the initial normals lean
        toward. With a camera-co-located light the clamped cosine zeroes every
        gradient of a batch whose normals face away, so starting them toward
        the cameras keeps the shading branch trainable from step one.
        """
        if normal_hint is not None:
            normal_hint = np.asarray(normal_hint, dtype=np.float64)
            norm = np.linalg.norm(normal_hint)
            if normal_hint.shape != (3,) or not np.isfinite(norm) or norm < 1e-6:
                raise ValueError("normal_hint must be a non-zero (3,) direction")
            normal_hint = normal_hint / norm
        self.encoder.register(store, rng)
        for head, out_dim in self.HEADS:
            for i, (d_in, d_out) in enumerate(self._layer_dims(out_dim)):
                bound = 1.0 / np.sqrt(d_in)
                store.add(f"field/{head}/w{i}", rng.uniform(-bound, bound, size=(d_in, d_out)))
                bias = np.zeros(d_out)
                if i == self.heads_cfg.depth - 1:
                    if head == "normal":
                        # Encoder features start near zero; a random bias keeps
                        # the normalization away from the zero vector at init.
                        bias = rng.uniform(-0.5, 0.5, size=d_out)
                        if normal_hint is not None:
                            bias = normal_hint + 0.1 * bias
                    elif head == "sigma":
                        # Start the volume empty (softplus(-4) ~ 0.018). A zero
                        # bias would fill space with density 0.69 fog that both
                        # attenuates all channels equally (stealing beta's role)
                        # and seeds floaters dense enough to pass the object
                        # gate, where the refined loss no longer squeezes them.
                        bias = np.full(d_out, -4.0)
                store.add(f"field/{head}/b{i}", bias)

    def _head(self, ctx: gc.EvalContext, name: str, feats):
        h = feats
        for i in range(self.heads_cfg.depth):
            h = gc.affine(h, ctx.param(f"field/{name}/w{i}"), ctx.param(f"field/{name}/b{i}"))
            if i < self.heads_cfg.depth - 1:
                h = gc.leaky_relu(h)
        return h

    def query(self, ctx: gc.EvalContext, x: np.ndarray) -> SceneSample:
        """Evaluate the field at (n, 3) world points."""
        feats = self.encoder.encode(ctx, x)
        sigma = gc.softplus(gc.reshape(self._head(ctx, "sigma", feats), (len(x),)))
        albedo = gc.softplus(self._head(ctx, "albedo", feats))
        normal = gc.normalize(self._head(ctx, "normal", feats), axis=-1)
        return SceneSample(sigma=sigma, albedo=albedo, normal=normal)
