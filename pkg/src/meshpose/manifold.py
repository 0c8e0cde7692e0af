"""Built-in low-poly car manifold and the plain-text manifold file format.

File layout (ASCII, whitespace separated, see docs/formats.md)::

    N K F
    N lines of 3 floats        mean vertices
    K blocks of N lines        displacement bases
    F lines of 3 ints          faces (0-based vertex indices)
"""

from __future__ import annotations

import functools
from pathlib import Path

import numpy as np

from .geometry import ShapeManifold

N_STATIONS = 14
RING_SIZE = 14
BASIS_SCALE = 0.1

# (z, height) control points from rear (-z) to front (+z); front is the longer hood
_HEIGHT_PROFILE = np.array([
    [-1.95, 0.90],
    [-1.70, 1.02],
    [-1.30, 1.06],
    [-0.95, 1.45],
    [-0.20, 1.50],
    [0.35, 1.45],
    [0.95, 1.00],
    [1.55, 0.92],
    [1.95, 0.72],
])
_LENGTH = 3.9
_WIDTH = 1.65
_BELTLINE = 0.92


def _ring(z: float, height: float, half_width: float) -> np.ndarray:
    theta = np.pi / RING_SIZE + 2.0 * np.pi * np.arange(RING_SIZE) / RING_SIZE
    p = 0.35
    c, s = np.cos(theta), np.sin(theta)
    x = half_width * np.sign(c) * np.abs(c) ** p
    y = -height / 2.0 + height / 2.0 * np.sign(s) * np.abs(s) ** p
    up = np.clip((-y - _BELTLINE) / max(height - _BELTLINE, 1e-6), 0.0, 1.0)
    x = x * (1.0 - 0.28 * up)
    return np.column_stack([x, y, np.full(RING_SIZE, z)])


def _orient_outward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    signed_volume = np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0
    return faces if signed_volume > 0 else faces[:, ::-1].copy()


@functools.lru_cache(maxsize=1)
def car_manifold() -> ShapeManifold:
    """Procedural car mesh (198 vertices, 392 faces) with length/height/width bases."""
    zs = np.linspace(-_LENGTH / 2, _LENGTH / 2, N_STATIONS)
    heights = np.interp(zs, _HEIGHT_PROFILE[:, 0], _HEIGHT_PROFILE[:, 1])
    taper = 1.0 - 0.12 * (np.abs(zs) / (_LENGTH / 2)) ** 4
    rings = [_ring(z, h, _WIDTH / 2 * t) for z, h, t in zip(zs, heights, taper)]
    verts = np.concatenate(rings)
    rear_cap = np.array([0.0, -heights[0] / 2, zs[0] - 0.02])
    front_cap = np.array([0.0, -heights[-1] / 2, zs[-1] + 0.02])
    verts = np.vstack([verts, rear_cap, front_cap])
    i_rear, i_front = len(verts) - 2, len(verts) - 1

    faces = []
    for s in range(N_STATIONS - 1):
        for j in range(RING_SIZE):
            a = s * RING_SIZE + j
            b = s * RING_SIZE + (j + 1) % RING_SIZE
            c = (s + 1) * RING_SIZE + j
            d = (s + 1) * RING_SIZE + (j + 1) % RING_SIZE
            faces += [(a, b, d), (a, d, c)]
    last = (N_STATIONS - 1) * RING_SIZE
    for j in range(RING_SIZE):
        faces.append((i_rear, (j + 1) % RING_SIZE, j))
        faces.append((i_front, last + j, last + (j + 1) % RING_SIZE))
    faces = np.array(faces, dtype=np.int64)

    # origin: ground-contact center of the axis-aligned extent
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    verts = verts - np.array([(lo[0] + hi[0]) / 2, hi[1], (lo[2] + hi[2]) / 2])
    faces = _orient_outward(verts, faces)

    bases = np.zeros((3,) + verts.shape)
    bases[0, :, 2] = BASIS_SCALE * verts[:, 2]  # longer
    bases[1, :, 1] = BASIS_SCALE * verts[:, 1]  # higher (bottom stays on the ground)
    bases[2, :, 0] = BASIS_SCALE * verts[:, 0]  # wider
    return ShapeManifold(verts, bases, faces)


def save_manifold(manifold: ShapeManifold, path) -> None:
    n, k, f = manifold.n_vertices, manifold.n_bases, len(manifold.faces)
    lines = [f"{n} {k} {f}"]
    fmt = "{:.17g} {:.17g} {:.17g}"
    lines += [fmt.format(*v) for v in manifold.mean_vertices]
    for b in manifold.bases:
        lines += [fmt.format(*v) for v in b]
    lines += ["{} {} {}".format(*t) for t in manifold.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifold(path) -> ShapeManifold:
    tokens = Path(path).read_text().split()
    if len(tokens) < 3:
        raise ValueError("manifold file is missing its header")
    n, k, f = (int(t) for t in tokens[:3])
    n_float = 3 * n * (k + 1)
    expected = 3 + n_float + 3 * f
    if len(tokens) != expected:
        raise ValueError(f"manifold file has {len(tokens)} tokens, expected {expected}")
    floats = np.array(tokens[3:3 + n_float], dtype=np.float64).reshape(k + 1, n, 3)
    faces = np.array(tokens[3 + n_float:], dtype=np.int64).reshape(f, 3)
    return ShapeManifold(floats[0], floats[1:], faces)
