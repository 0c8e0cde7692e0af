"""On-disk formats: PFM depth maps, PGM images and KITTI label files."""

from __future__ import annotations

import re
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np


class LabelParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


# --------------------------------------------------------------------------
# PFM / PGM


def write_pfm(path, image) -> None:
    """Single-channel little-endian PFM, rows stored bottom to top."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"(Pf|PF)\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=m.end())
    arr = arr.reshape(h, w, channels) if channels == 3 else arr.reshape(h, w)
    return arr[::-1].astype(np.float64)


def write_pgm(path, image, maxval: int = 255) -> None:
    """Binary PGM; ``image`` holds integer levels in [0, maxval]."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM writer expects a 2-D array")
    if not 0 < maxval < 65536:
        raise ValueError("maxval must be in 1..65535")
    if img.min() < 0 or img.max() > maxval:
        raise ValueError("pixel values outside [0, maxval]")
    h, w = img.shape
    dtype = "u1" if maxval < 256 else ">u2"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=dtype).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    dtype = "u1" if maxval < 256 else ">u2"
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=m.end()).reshape(h, w)
    return arr.astype(np.int64), maxval


def write_unit_image(path, image) -> None:
    """Store a [0, 1] float image as a 16-bit PGM."""
    q = np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 65535).astype(np.int64)
    write_pgm(path, q, 65535)


def read_unit_image(path) -> np.ndarray:
    arr, maxval = read_pgm(path)
    return arr / float(maxval)


def write_mask(path, mask) -> None:
    write_pgm(path, (np.asarray(mask) > 0).astype(np.int64) * 255, 255)


def read_mask(path) -> np.ndarray:
    arr, _ = read_pgm(path)
    return (arr > 0).astype(np.uint8)


# --------------------------------------------------------------------------
# KITTI labels


@dataclass(frozen=True)
class KittiLabel:
    """One line of a KITTI object label file; ``score`` is absent for ground truth."""

    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]
    dimensions: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]  # bottom center, camera frame
    rotation_y: float
    score: float | None = None

    def to_line(self) -> str:
        parts = [self.type, f"{self.truncated:.6f}", f"{int(self.occluded)}", f"{self.alpha:.6f}"]
        parts += [f"{v:.6f}" for v in (*self.bbox, *self.dimensions, *self.location)]
        parts.append(f"{self.rotation_y:.6f}")
        if self.score is not None:
            parts.append(f"{self.score:.6f}")
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "KittiLabel":
        tok = line.split()
        if len(tok) not in (15, 16):
            raise ValueError(f"expected 15 or 16 fields, got {len(tok)}")
        try:
            vals = [float(t) for t in tok[1:]]
            occluded = int(tok[2])
        except ValueError as exc:
            raise ValueError(f"non-numeric field: {exc}") from None
        return cls(
            type=tok[0],
            truncated=vals[0],
            occluded=occluded,
            alpha=vals[2],
            bbox=tuple(vals[3:7]),
            dimensions=tuple(vals[7:10]),
            location=tuple(vals[10:13]),
            rotation_y=vals[13],
            score=vals[14] if len(tok) == 16 else None,
        )

    def quantized(self) -> "KittiLabel":
        """The label as it reads back after a write (6-decimal rounding)."""
        return KittiLabel.from_line(self.to_line())


LABEL_FIELDS = tuple(f.name for f in fields(KittiLabel))


def write_labels(path, labels) -> None:
    text = "".join(lab.to_line() + "\n" for lab in labels)
    Path(path).write_text(text)


def read_labels(path) -> list[KittiLabel]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(KittiLabel.from_line(line))
        except ValueError as exc:
            raise LabelParseError(path, lineno, str(exc)) from None
    return out
