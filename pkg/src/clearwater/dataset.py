"""Posed multi-view dataset IO.

Directory layout:

    dataset.json    intrinsics, near/far planes, light, posed frames
    images/*.png    16-bit linear RGB observations
    truth.json      synthetic ground truth (water params, clean renders)

Images store linear radiance scaled to the uint16 range; no transfer curve is
baked in. cv2 speaks BGR, so the read/write helpers flip channels.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import cv2
import numpy as np

from . import color
from . import renderer as rd

PNG_SCALE = 65535.0


def write_png16(path: str, img: np.ndarray) -> None:
    """Write (h, w, 3) linear RGB in [0, 1] as a 16-bit PNG; values are clipped."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) image, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    coded = np.round(np.clip(img, 0.0, 1.0) * PNG_SCALE).astype(np.uint16)
    if not cv2.imwrite(path, coded[:, :, ::-1]):
        raise IOError(f"could not write {path}")


def read_png16(path: str) -> np.ndarray:
    """Read a 16-bit linear PNG back to (h, w, 3) float64 in [0, 1]."""
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"could not read {path}")
    if raw.dtype != np.uint16 or raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"{path}: expected 3-channel 16-bit PNG, got {raw.dtype} {raw.shape}")
    return raw[:, :, ::-1].astype(np.float64) / PNG_SCALE


def write_preview(path: str, img: np.ndarray) -> None:
    """Write an 8-bit sRGB preview of a linear image."""
    coded = np.round(color.tone_map(np.clip(img, 0.0, 1.0)) * 255.0).astype(np.uint8)
    if not cv2.imwrite(path, coded[:, :, ::-1]):
        raise IOError(f"could not write {path}")


@dataclass(frozen=True)
class Frame:
    file: str
    pose: np.ndarray  # 4x4 camera-to-world


@dataclass
class Dataset:
    """A loaded dataset: shared intrinsics, posed frames, and their images."""

    root: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float
    light: rd.LightModel
    frames: list[Frame]
    images: np.ndarray  # (k, height, width, 3) linear RGB

    def __len__(self) -> int:
        return len(self.frames)

    def camera(self, idx: int) -> rd.Camera:
        return rd.Camera(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                         width=self.width, height=self.height,
                         pose=self.frames[idx].pose)


def _need(obj: dict, key: str, where: str):
    if key not in obj:
        raise ValueError(f"dataset.json: missing key '{where}{key}'")
    return obj[key]


def load_dataset(root: str) -> Dataset:
    """Parse and validate a dataset directory; loads every image eagerly."""
    manifest_path = os.path.join(root, "dataset.json")
    if not os.path.isfile(manifest_path):
        raise ValueError(f"no dataset.json under {root}")
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as err:
            raise ValueError(f"{manifest_path}: invalid JSON ({err})") from err

    intr = _need(manifest, "intrinsics", "")
    fields = {k: _need(intr, k, "intrinsics.") for k in ("fx", "fy", "cx", "cy", "width", "height")}
    near = float(_need(manifest, "near", ""))
    far = float(_need(manifest, "far", ""))
    if not 0.0 < near < far:
        raise ValueError(f"dataset.json: need 0 < near < far, got {near}, {far}")
    light = rd.LightModel(intensity=np.asarray(_need(_need(manifest, "light", ""), "e0", "light."), dtype=np.float64))

    frames = []
    for i, fr in enumerate(_need(manifest, "frames", "")):
        file = _need(fr, "file", f"frames[{i}].")
        transform = np.asarray(_need(fr, "transform", f"frames[{i}]."), dtype=np.float64)
        if transform.shape != (16,):
            raise ValueError(f"dataset.json: frames[{i}].transform must hold 16 reals")
        frames.append(Frame(file=file, pose=transform.reshape(4, 4)))
    if not frames:
        raise ValueError("dataset.json: frames list is empty")

    missing = [fr.file for fr in frames if not os.path.isfile(os.path.join(root, fr.file))]
    if missing:
        raise ValueError(f"missing image files: {', '.join(missing)}")

    width, height = int(fields["width"]), int(fields["height"])
    images = np.empty((len(frames), height, width, 3), dtype=np.float64)
    for i, fr in enumerate(frames):
        img = read_png16(os.path.join(root, fr.file))
        if img.shape != (height, width, 3):
            raise ValueError(f"{fr.file}: image is {img.shape[1]}x{img.shape[0]}, "
                             f"manifest says {width}x{height}")
        images[i] = img

    ds = Dataset(root=root, fx=float(fields["fx"]), fy=float(fields["fy"]),
                 cx=float(fields["cx"]), cy=float(fields["cy"]),
                 width=width, height=height, near=near, far=far,
                 light=light, frames=frames, images=images)
    for i in range(len(ds)):
        ds.camera(i)  # pose validation lives in the Camera type
    return ds


def load_truth(root: str) -> dict:
    """Ground-truth sidecar for synthetic datasets (evaluation only)."""
    path = os.path.join(root, "truth.json")
    if not os.path.isfile(path):
        raise ValueError(f"no truth.json under {root}")
    with open(path) as fh:
        truth = json.load(fh)
    for key in ("beta", "backscatter", "clean_files"):
        if key not in truth:
            raise ValueError(f"truth.json: missing key '{key}'")
    return truth


def frustum_bounds(ds: Dataset, pad: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounds of every point any ray of the dataset can sample.

    Evaluated over the full pixel grid at both bounding planes: direction
    components are not monotone in pixel coordinates after normalization and
    rotation, so corner pixels alone would not be safe. The padded box is the
    natural domain for the scene field's encoder.
    """
    rows, cols = np.meshgrid(np.arange(ds.height, dtype=np.float64),
                             np.arange(ds.width, dtype=np.float64), indexing="ij")
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for i in range(len(ds)):
        cam = ds.camera(i)
        dirs = rd.pixel_directions(cam, rows.ravel(), cols.ravel())
        for depth in (ds.near, ds.far):
            pts = cam.center + depth * dirs
            lo = np.minimum(lo, pts.min(axis=0))
            hi = np.maximum(hi, pts.max(axis=0))
    span = hi - lo
    return lo - pad * span, hi + pad * span
