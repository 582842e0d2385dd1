"""Class activation maps and heatmap overlay files.

A CAM projects the classifier's weight row for one class onto the feature
maps entering the global average pool, giving a spatial saliency map. The
overlay renderer writes binary PPM (P6) so outputs stay byte-deterministic
and dependency-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbones import Network
from .errors import ContractError, FormatError, ShapeError
from .tensor import Tensor, no_grad

GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # Rec.601 luma


@dataclass
class CamMap:
    """Normalized activation map with the prediction it explains."""

    values: np.ndarray        # (H, W) in [0, 1]
    predicted_class: int
    image: np.ndarray         # the (C, H, W) input the map was computed for


def project_features(weights_row: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Raw class activation: at each position, dot(classifier row, features)."""
    if weights_row.shape[0] != features.shape[0]:
        raise ShapeError(
            f"classifier row has {weights_row.shape[0]} channels, features "
            f"have {features.shape[0]}")
    return np.einsum("c,chw->hw", weights_row, features)


def bilinear_resize(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsampling with corner alignment; size-1 axes replicate."""
    h, w = values.shape
    ys = np.linspace(0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = values[np.ix_(y0, x0)] * (1 - fx) + values[np.ix_(y0, x1)] * fx
    bottom = values[np.ix_(y1, x0)] * (1 - fx) + values[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bottom * fy


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all 0.5."""
    lo, hi = float(raw.min()), float(raw.max())
    if hi == lo:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def compute_cam(net: Network, image, target_class: int | None = None) -> CamMap:
    """Class activation map of one (C, H, W) image at input resolution.

    Uses the classifier row of ``target_class`` when given, else of the
    predicted class. Requires a global-average-pool + affine head.
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if img.ndim != 3:
        raise ShapeError(f"compute_cam expects one (C,H,W) image, got {img.shape}")
    weight = net.classifier_weight().data  # raises ContractError on a bad head
    with no_grad():
        feats = net.forward_features(img, training=False)
        x = feats
        for _, layer in net.layers[net.head_start:]:
            x = layer.forward(x, training=False)
        logits = x.data.ravel()
    predicted = int(np.argmax(logits))
    cls = predicted if target_class is None else int(target_class)
    if not 0 <= cls < weight.shape[0]:
        raise ContractError(f"class {cls} outside 0..{weight.shape[0] - 1}")
    raw = project_features(weight[cls], feats.data)
    upsampled = bilinear_resize(raw, img.shape[1], img.shape[2])
    return CamMap(values=normalize_map(upsampled), predicted_class=predicted,
                  image=img)


def heat_color(values: np.ndarray) -> np.ndarray:
    """Blue-to-red linear colormap: (H, W) in [0,1] -> (H, W, 3)."""
    v = np.clip(values, 0.0, 1.0)
    return np.stack([v, np.zeros_like(v), 1.0 - v], axis=-1)


def emit_heatmap(cam: CamMap, image: np.ndarray, path: str) -> None:
    """Write the overlay as binary PPM: half grayscale image, half colormap.

    ``image`` is the display version of the input, (3, H, W) in [0, 1], and
    must match the map's resolution.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"emit_heatmap needs a (3,H,W) image, got {image.shape}")
    if image.shape[1:] != cam.values.shape:
        raise ShapeError(
            f"image {image.shape[1:]} and map {cam.values.shape} resolutions differ")
    gray = sum(wc * image[i] for i, wc in enumerate(GRAY_WEIGHTS))
    overlay = 0.5 * gray[:, :, None] + 0.5 * heat_color(cam.values)
    pixels = np.rint(np.clip(overlay, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = cam.values.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(pixels.tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary 8-bit PPM into a (3, H, W) float array in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise FormatError(f"{path}: not a binary P6 file")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise FormatError(f"{path}: malformed P6 header")
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit P6 supported, got maxval {maxval}")
    data = parts[3][:w * h * 3]
    if len(data) != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float32) / 255.0
