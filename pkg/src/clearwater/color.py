"""Color conversions and image metrics.

Images are float arrays with a trailing RGB axis. Three spaces appear in the
pipeline: linear scene radiance in [0, 1], sRGB-encoded values in [0, 1]
(tone_map / inverse_tone_map), and CIELAB with the a/b axes shifted by +128
and clamped to [0, 255] for metric reporting.
"""

from __future__ import annotations

import numpy as np

SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)

# D65 reference white; equals the row sums of the matrix above.
D65_WHITE = np.array([0.95047, 1.00000, 1.08883])

_LINEAR_KNEE = 0.0031308
_SRGB_KNEE = 0.04045
_LAB_T0 = (6.0 / 29.0) ** 3
_LAB_SLOPE = 1.0 / (3.0 * (6.0 / 29.0) ** 2)


def tone_map(linear: np.ndarray) -> np.ndarray:
    """Linear radiance to sRGB encoding; input is clamped to [0, 1]."""
    c = np.clip(np.asarray(linear), 0.0, 1.0)
    return np.where(c <= _LINEAR_KNEE, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def inverse_tone_map(srgb: np.ndarray) -> np.ndarray:
    """sRGB encoding back to linear radiance; input is clamped to [0, 1]."""
    s = np.clip(np.asarray(srgb), 0.0, 1.0)
    return np.where(s <= _SRGB_KNEE, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)


def linear_to_xyz(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb @ SRGB_TO_XYZ.T


def xyz_to_lab(xyz: np.ndarray) -> np.ndarray:
    t = np.asarray(xyz, dtype=np.float64) / D65_WHITE
    f = np.where(t > _LAB_T0, np.cbrt(t), _LAB_SLOPE * t + 4.0 / 29.0)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    lab = np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)
    return lab


def linear_to_lab_encoded(rgb: np.ndarray) -> np.ndarray:
    """Linear RGB in [0,1] to CIELAB with a/b shifted by +128, clamped to [0, 255]."""
    lab = xyz_to_lab(linear_to_xyz(np.clip(rgb, 0.0, 1.0)))
    out = lab.copy()
    out[..., 1] = np.clip(lab[..., 1] + 128.0, 0.0, 255.0)
    out[..., 2] = np.clip(lab[..., 2] + 128.0, 0.0, 255.0)
    return out


def mse_ab(img: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    """Per-channel mean squared error on the encoded CIELAB A and B planes.

    Args:
        img, ref: linear RGB images of identical shape (..., 3).

    Returns:
        (mse_a, mse_b).
    """
    img, ref = np.asarray(img), np.asarray(ref)
    if img.shape != ref.shape or img.shape[-1] != 3:
        raise ValueError(f"shape mismatch {img.shape} vs {ref.shape}")
    lab_img = linear_to_lab_encoded(img)
    lab_ref = linear_to_lab_encoded(ref)
    diff = lab_img - lab_ref
    return float(np.mean(diff[..., 1] ** 2)), float(np.mean(diff[..., 2] ** 2))


def angular_error(img: np.ndarray, ref: np.ndarray, norm_floor: float = 1e-6) -> float:
    """Mean angle in radians between paired color triples.

    Operates on whatever triples it is given; the evaluation pipeline feeds it
    tone-mapped (sRGB) values. Pixels where either triple has norm below
    `norm_floor` are skipped; if every pixel is degenerate there is no angle
    to report and the call is rejected.
    """
    img, ref = np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape or img.shape[-1] != 3:
        raise ValueError(f"shape mismatch {img.shape} vs {ref.shape}")
    u = img.reshape(-1, 3)
    v = ref.reshape(-1, 3)
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    valid = (nu >= norm_floor) & (nv >= norm_floor)
    skipped = int(np.size(nu) - np.count_nonzero(valid))
    if not np.any(valid):
        raise ValueError(f"all {skipped} pixels degenerate (norm < {norm_floor})")
    cos = (u[valid] * v[valid]).sum(axis=1) / (nu[valid] * nv[valid])
    return float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))
