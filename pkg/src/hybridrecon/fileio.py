"""Image, raw-dump and dataset directory I/O.

Raw dump format (``.f64``), little-endian::

    8 bytes   magic b"HRF64PLN"
    3 x u32   width, height, channels
    4 bytes   reserved (zero)
    data      channels planes of height x width float64, plane-major

A flatland image row is stored with height 1.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .scenes import Dataset, SceneSpec, camera_from_dict

RAW_MAGIC = b"HRF64PLN"


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(values, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Binary P6; ``rgb`` is (H, W, 3) or a flatland row (W, 3) in [0, 1]."""
    rgb = np.asarray(rgb, dtype=float)
    if rgb.ndim == 2:
        rgb = rgb[None]
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(to_uint8(rgb).tobytes())


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=float)
    if gray.ndim == 1:
        gray = gray[None]
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(to_uint8(gray).tobytes())


def _read_pnm(path: str | Path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} file")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos:pos + w * h * channels], dtype=np.uint8)
    shape = (h, w, channels) if channels > 1 else (h, w)
    return data.reshape(shape).astype(float) / 255.0


def read_ppm(path: str | Path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path: str | Path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def write_raw(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = img[None]
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<IIII", w, h, c, 0))
        fh.write(np.ascontiguousarray(img.transpose(2, 0, 1), dtype="<f8").tobytes())


def read_raw(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != RAW_MAGIC:
        raise ValueError(f"{path}: not a raw f64 dump")
    w, h, c, _ = struct.unpack("<IIII", raw[8:24])
    planes = np.frombuffer(raw[24:24 + 8 * w * h * c], dtype="<f8").reshape(c, h, w)
    return planes.transpose(1, 2, 0).copy()


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_dataset(ds: Dataset, out_dir: str | Path) -> list[Path]:
    """Write ``scene.json``, ``view_####.ppm``, ``mask_####.pgm`` and
    ``view_####.f64``; returns the written paths in order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "hybridrecon-dataset/1",
        "scene": ds.scene.to_dict(),
        "seed": ds.seed,
        "dim": ds.dim,
        "cameras": [c.to_dict() for c in ds.cameras],
    }
    paths = [out / "scene.json"]
    paths[0].write_text(json.dumps(meta, indent=1, sort_keys=True))
    for i, (img, mask) in enumerate(zip(ds.images, ds.masks)):
        p_img, p_mask, p_raw = out / f"view_{i:04d}.ppm", out / f"mask_{i:04d}.pgm", out / f"view_{i:04d}.f64"
        write_ppm(p_img, img)
        write_pgm(p_mask, mask.astype(float))
        write_raw(p_raw, img)
        paths += [p_img, p_mask, p_raw]
    return paths


def load_dataset(in_dir: str | Path) -> Dataset:
    src = Path(in_dir)
    meta_path = src / "scene.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{src} is not a dataset directory (no scene.json)")
    meta = json.loads(meta_path.read_text())
    scene = SceneSpec.from_dict(meta["scene"])
    cams = [camera_from_dict(c) for c in meta["cameras"]]
    images, masks = [], []
    for i, cam in enumerate(cams):
        img = read_raw(src / f"view_{i:04d}.f64")
        mask = read_pgm(src / f"mask_{i:04d}.pgm") > 0.5
        shape = cam.shape
        images.append(img.reshape(*shape, 3))
        masks.append(mask.reshape(shape))
    return Dataset(scene, cams, images, masks, meta.get("seed", 0))
