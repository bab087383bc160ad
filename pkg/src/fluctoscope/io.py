"""Stack containers, sidecars, and report files.

Stacks travel as multi-page 32-bit float grayscale TIFF (readable by
standard microscopy tooling) or as a dependency-free raw container:
little-endian float32, row-major, frames concatenated, with the geometry
in a JSON sidecar {M, T, pixel_size_nm, frame_rate_hz}. Reconstructed
images are written both as float TIFF (quantitative) and as 8-bit preview
PNGs whose scaling is documented in the sidecar.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .covariance import ImageStack


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def write_stack(path: str | Path, stack: ImageStack) -> None:
    """Write a stack as multi-page float32 TIFF (.tif/.tiff) or raw
    binary (.raw/.bin) with a JSON sidecar holding the geometry."""
    path = Path(path)
    frames = np.asarray(stack.frames, dtype=np.float32)
    meta = {
        "M": int(stack.M),
        "T": int(stack.T),
        "pixel_size_nm": float(stack.pixel_size_nm),
        "frame_rate_hz": float(stack.frame_rate_hz),
        "dtype": "float32",
        "order": "row-major",
        "byteorder": "little",
    }
    if path.suffix.lower() in (".tif", ".tiff"):
        pages = [Image.fromarray(f, mode="F") for f in frames]
        pages[0].save(path, save_all=True, append_images=pages[1:])
    elif path.suffix.lower() in (".raw", ".bin"):
        frames.astype("<f4").tofile(path)
    else:
        raise ValueError(f"unsupported stack container: {path.suffix}")
    _sidecar_path(path).write_text(json.dumps(meta, indent=2,
                                              sort_keys=True))


def read_stack(path: str | Path) -> ImageStack:
    path = Path(path)
    meta = json.loads(_sidecar_path(path).read_text())
    if path.suffix.lower() in (".tif", ".tiff"):
        img = Image.open(path)
        frames = []
        for t in range(img.n_frames):
            img.seek(t)
            frames.append(np.asarray(img, dtype=np.float64))
        arr = np.stack(frames)
    elif path.suffix.lower() in (".raw", ".bin"):
        m, t = meta["M"], meta["T"]
        arr = np.fromfile(path, dtype="<f4").reshape(t, m, m)
        arr = arr.astype(np.float64)
    else:
        raise ValueError(f"unsupported stack container: {path.suffix}")
    return ImageStack(arr, pixel_size_nm=meta["pixel_size_nm"],
                      frame_rate_hz=meta["frame_rate_hz"])


def write_image(path: str | Path, img: np.ndarray,
                pixel_size_nm: float | None = None) -> None:
    """Float32 TIFF of a single 2D image, plus an 8-bit preview PNG and a
    sidecar recording the preview scaling."""
    path = Path(path)
    img = np.asarray(img, dtype=np.float32)
    Image.fromarray(img, mode="F").save(path)
    lo, hi = float(img.min()), float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    preview = ((img - lo) * scale).clip(0, 255).astype(np.uint8)
    Image.fromarray(preview, mode="L").save(path.with_suffix(".png"))
    meta = {
        "shape": list(img.shape),
        "preview_min": lo,
        "preview_max": hi,
        "preview_scale": scale,
    }
    if pixel_size_nm is not None:
        meta["pixel_size_nm"] = float(pixel_size_nm)
    _sidecar_path(path).write_text(json.dumps(meta, indent=2,
                                              sort_keys=True))


def read_image(path: str | Path) -> np.ndarray:
    img = Image.open(Path(path))
    return np.asarray(img, dtype=np.float64)


def write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
