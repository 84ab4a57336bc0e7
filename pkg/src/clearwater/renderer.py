"""Ray generation, stratified sampling, and the volumetric renderers.

Image formation assumes a single point light co-centered with the camera.
Light attenuates on the way out, reflects off a Lambertian surface element,
and attenuates again on the way back along the same path, so each sample's
contribution carries the accumulated transmittance squared:

    L = S + T_n * sum_i T_i * phi_i * l_i,   l_i = T_n * T_i * E_i * albedo * cos+

T uses the per-channel effective density (water attenuation applies only in
the water-mask region), phi = 1 - exp(-sigma * delta) uses the plain density,
E follows the inverse-square law from the shared camera/light center, and S
is the uniform backscatter floor. True-color rendering swaps in the
object-only density and drops S, beta, and the near-plane factor.

Compositing accumulates transmittance exclusively (sample i is attenuated by
the medium strictly in front of it), which makes an opaque surface's total
weight approach one; the standalone profile helper defaults to the inclusive
running sum and takes a flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from . import watermodel as wm

MODES = ("underwater", "true_color")


def _expand(x):
    # (...,) -> (..., 1) so per-sample scalars broadcast against RGB triples.
    shape = x.shape if isinstance(x, gc.Node) else np.shape(x)
    return gc.reshape(x, tuple(shape) + (1,))


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus a rigid camera-to-world transform.

    Convention: +z forward, +x right, +y down in pixel space; pixel (row, col)
    centers sit exactly at integer coordinates, so (cy, cx) is the principal
    point.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {pose.shape}")
        rot = pose[:3, :3]
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-6:
            raise ValueError("pose rotation is not orthonormal within 1e-6")
        if not np.allclose(pose[3], (0.0, 0.0, 0.0, 1.0), atol=1e-9):
            raise ValueError("pose bottom row must be (0, 0, 0, 1)")
        object.__setattr__(self, "pose", pose)

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    d_n: float
    d_f: float

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64)
        direction = np.asarray(self.direction, dtype=np.float64)
        if origin.shape != (3,) or direction.shape != (3,):
            raise ValueError("origin and direction must be 3-vectors")
        if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
            raise ValueError("direction must be unit length within 1e-6")
        if not 0.0 < self.d_n < self.d_f:
            raise ValueError(f"need 0 < d_n < d_f, got d_n={self.d_n} d_f={self.d_f}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)


@dataclass(frozen=True)
class RaySamples:
    """Ordered sample distances, step sizes, and world points along one ray."""

    t: np.ndarray
    delta: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        delta = np.asarray(self.delta, dtype=np.float64)
        x = np.asarray(self.x, dtype=np.float64)
        if t.ndim != 1 or delta.shape != t.shape or x.shape != t.shape + (3,):
            raise ValueError("mismatched sample shapes")
        if np.any(np.diff(t) <= 0):
            raise ValueError("sample distances must be strictly increasing")
        if np.any(delta <= 0):
            raise ValueError("step sizes must be positive")
        # Interior steps are the gaps between consecutive samples.
        if t.size > 1 and not np.allclose(delta[:-1], np.diff(t), rtol=1e-9, atol=1e-12):
            raise ValueError("interior delta must equal t[i+1] - t[i]")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class LightModel:
    """Point light co-centered with the camera; intensity at unit distance."""

    intensity: np.ndarray

    def __post_init__(self):
        intensity = np.asarray(self.intensity, dtype=np.float64)
        if intensity.shape != (3,):
            raise ValueError(f"intensity must have shape (3,), got {intensity.shape}")
        if not np.all(np.isfinite(intensity)) or np.any(intensity < 0):
            raise ValueError("intensity must be finite and non-negative")
        object.__setattr__(self, "intensity", intensity)


def pixel_directions(camera: Camera, rows, cols) -> np.ndarray:
    """Unit world-space directions through the given pixel centers.

    rows/cols may be fractional; both paths (single rays and whole images)
    share this function so their outputs agree bitwise.
    """
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    d_cam = np.stack(
        [
            (cols - camera.cx) / camera.fx,
            (rows - camera.cy) / camera.fy,
            np.ones_like(cols),
        ],
        axis=-1,
    )
    d_world = d_cam @ camera.rotation.T
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def generate_rays(camera: Camera, pixels, d_n: float, d_f: float) -> list[Ray]:
    """Rays from the camera center through the listed (row, col) pixel centers."""
    for i, (row, col) in enumerate(pixels):
        if not (0 <= row <= camera.height - 1 and 0 <= col <= camera.width - 1):
            raise ValueError(
                f"pixels[{i}] = ({row}, {col}) outside {camera.height}x{camera.width} image"
            )
    rows = np.array([p[0] for p in pixels], dtype=np.float64)
    cols = np.array([p[1] for p in pixels], dtype=np.float64)
    dirs = pixel_directions(camera, rows, cols)
    origin = camera.center
    return [Ray(origin=origin, direction=d, d_n=d_n, d_f=d_f) for d in dirs]


def stratified_samples(d_n: float, d_f: float, n: int, count: int, *, jitter: bool = False, rng=None):
    """Stratified sample distances and step sizes for `count` parallel rays.

    Bin k covers [d_n + k*w, d_n + (k+1)*w] with w = (d_f - d_n)/n; jitter off
    takes bin centers. Returns (t, delta), both (count, n). The last step size
    is the stratum width, interior ones are the sample gaps.
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n}")
    if not 0.0 < d_n < d_f:
        raise ValueError(f"need 0 < d_n < d_f, got d_n={d_n} d_f={d_f}")
    width = (d_f - d_n) / n
    edges = d_n + width * np.arange(n, dtype=np.float64)
    if jitter:
        if rng is None:
            raise ValueError("jitter=True requires an rng")
        u = rng.random((count, n))
    else:
        u = np.full((count, n), 0.5)
    t = edges + width * u
    delta = np.concatenate([np.diff(t, axis=1), np.full((count, 1), width)], axis=1)
    return t, delta


def sample_points(ray: Ray, n: int, jitter: bool = False, rng=None) -> RaySamples:
    """Stratified samples along one ray between its bounding planes."""
    t, delta = stratified_samples(ray.d_n, ray.d_f, n, 1, jitter=jitter, rng=rng)
    t, delta = t[0], delta[0]
    x = ray.origin + t[:, None] * ray.direction
    return RaySamples(t=t, delta=delta, x=x)


def transmittance_profile(sigma_lambda, delta, inclusive: bool = True):
    """Per-sample transmittance T(x_i) = exp(-sum sigma_lambda * delta).

    Args:
        sigma_lambda: (..., n, 3) per-channel densities, >= 0.
        delta: (..., n) step sizes, > 0.
        inclusive: include sample i itself in the running sum (the default);
            the compositing path passes False so opacity and transmittance do
            not double-count the current interval.

    Returns:
        (..., n, 3) transmittances, non-increasing along the sample axis.
    """
    if np.any(gc.value_of(sigma_lambda) < 0):
        raise ValueError("sigma_lambda must be non-negative")
    delta_v = np.asarray(gc.value_of(delta))
    if np.any(delta_v <= 0):
        raise ValueError("delta must be positive")
    s = gc.mul(sigma_lambda, delta_v[..., None])
    c = gc.cumsum(s, axis=-2)
    if not inclusive:
        c = gc.sub(c, s)
    return gc.exp(gc.neg(c))


def incident_radiance(x, origin, light: LightModel) -> np.ndarray:
    """Inverse-square irradiance E = E0 / ||x - origin||^2, shaped (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    d2 = ((x - origin) ** 2).sum(axis=-1)
    if np.any(d2 <= 1e-12):
        raise ValueError("point coincides with the light center (distance <= 1e-6)")
    return light.intensity / d2[..., None]


def shade(sample, x, ray: Ray, light: LightModel, t_to_x, t_n):
    """Reflected radiance l = T_n * T * E * albedo * max(0, cos) at sample points.

    The co-centered light makes the direction toward the light the reverse of
    the ray direction. Back-facing surface elements contribute nothing.
    """
    e = incident_radiance(x, ray.origin, light)
    to_light = -ray.direction
    cosp = gc.relu(gc.cos_angle(sample.normal, np.broadcast_to(to_light, gc.value_of(sample.normal).shape)))
    albedo = gc.clamp_max(sample.albedo, 1.0)
    return gc.mul(gc.mul(gc.mul(t_n, t_to_x), e), gc.mul(albedo, _expand(cosp)))


def composite_radiance(sample, t, delta, to_light, light: LightModel, *, mode: str,
                       water: wm.WaterParams | None = None, d_n: float | None = None,
                       a: float = 3.0, b: float = 3.0):
    """Composite field samples along a batch of rays into per-ray radiance.

    The field outputs come in flat over rays*samples (the shape the field
    query produces); t and delta are (rays, n) and to_light is (rays, 3).
    This is the differentiable core behind both ray renderers; it inlines the
    shade product so the light distance can reuse the sample depth t, which
    equals ||x - o|| for the co-centered light.

    mode "underwater" needs water and d_n and applies the full model; mode
    "true_color" uses the object-only density with gate constants a, b and
    drops the water terms.

    Returns (rays, 3) radiance, a Node when the sample is taped.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    rays, n = t.shape
    sigma = gc.reshape(sample.sigma, (rays, n))
    albedo = gc.reshape(gc.clamp_max(sample.albedo, 1.0), (rays, n, 3))
    normal = gc.reshape(sample.normal, (rays, n, 3))

    # the sample depths set the integration dtype (float32 during training)
    e = light.intensity.astype(np.asarray(t).dtype, copy=False) / (t * t)[..., None]
    cosp = gc.relu(gc.cos_angle(normal, np.asarray(to_light)[:, None, :]))
    surface = gc.mul(gc.mul(albedo, e), _expand(cosp))

    if mode == "underwater":
        if water is None or d_n is None:
            raise ValueError("underwater mode requires water parameters and d_n")
        sig_lam = wm.sigma_lambda(sigma, water)
        trans = transmittance_profile(sig_lam, delta, inclusive=False)
        # Opacity comes from the plain density: the water body itself emits
        # backscatter only through S, not through phi.
        phi = gc.sub(1.0, gc.exp(gc.neg(gc.mul(sigma, delta))))
        contrib = gc.mul(gc.mul(trans, trans), gc.mul(_expand(phi), surface))
        ray_sum = gc.reduce_sum(contrib, axis=1)
        # The near-gap factor applies once per light pass: outbound inside l,
        # return outside the sum.
        t_n = gc.exp(gc.mul(water.beta, -float(d_n)))
        return gc.add(water.backscatter, gc.mul(gc.mul(t_n, t_n), ray_sum))

    sig_bar = wm.refined_sigma(sigma, a, b)
    s = gc.mul(sig_bar, delta)
    running = gc.cumsum(s, axis=-1)
    trans = gc.exp(gc.neg(gc.sub(running, s)))
    phi = gc.sub(1.0, gc.exp(gc.neg(s)))
    contrib = gc.mul(_expand(gc.mul(gc.mul(trans, trans), phi)), surface)
    return gc.reduce_sum(contrib, axis=1)


def render_underwater(ray: Ray, field_query, water: wm.WaterParams, light: LightModel,
                      n: int, *, jitter: bool = False, rng=None):
    """Radiance arriving along one ray through the full underwater model."""
    samples = sample_points(ray, n, jitter=jitter, rng=rng)
    fld = field_query(samples.x)
    out = composite_radiance(
        fld, samples.t[None], samples.delta[None], -ray.direction[None, :], light,
        mode="underwater", water=water, d_n=ray.d_n,
    )
    return gc.reshape(out, (3,))


def render_true_color(ray: Ray, field_query, light: LightModel, n: int, *,
                      a: float = 3.0, b: float = 3.0, jitter: bool = False, rng=None):
    """Water-free radiance along one ray: object-only density, no S, no beta."""
    samples = sample_points(ray, n, jitter=jitter, rng=rng)
    fld = field_query(samples.x)
    out = composite_radiance(
        fld, samples.t[None], samples.delta[None], -ray.direction[None, :], light,
        mode="true_color", a=a, b=b,
    )
    return gc.reshape(out, (3,))


def render_image(camera: Camera, field_query, water: wm.WaterParams | None,
                 light: LightModel, n: int, mode: str, *, d_n: float, d_f: float,
                 a: float = 3.0, b: float = 3.0, jitter: bool = False, rng=None,
                 rows=None) -> np.ndarray:
    """Render a view, one pixel row per batch.

    Row-at-a-time batching keeps the output bitwise independent of how a
    caller tiles the image into row bands, and a 1x1 image reproduces the
    single-ray path exactly. `rows` restricts rendering to a band (the full
    image when None). Returns (len(rows), width, 3) linear radiance.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    row_list = list(range(camera.height)) if rows is None else [int(r) for r in rows]
    for r in row_list:
        if not 0 <= r < camera.height:
            raise ValueError(f"row {r} outside image of height {camera.height}")
    origin = camera.center
    img = np.empty((len(row_list), camera.width, 3), dtype=np.float64)
    cols = np.arange(camera.width, dtype=np.float64)
    for k, row in enumerate(row_list):
        dirs = pixel_directions(camera, np.full(camera.width, row, dtype=np.float64), cols)
        t, delta = stratified_samples(d_n, d_f, n, camera.width, jitter=jitter, rng=rng)
        x = origin + t[..., None] * dirs[:, None, :]
        fld = field_query(x.reshape(-1, 3))
        out = composite_radiance(
            fld, t, delta, -dirs, light,
            mode=mode, water=water, d_n=d_n, a=a, b=b,
        )
        img[k] = gc.value_of(out)
    return img
