"""Compiled rasterization kernels.

All loops run in a fixed order, so outputs are bit-identical across calls and
threads. Pixel (u, v) is sampled at its center, integer coordinates (u, v).
"""

import math

import numpy as np
from numba import njit

_MIN_AREA = 1e-10


@njit(cache=True, nogil=True)
def _seg_dist(px, py, ax, ay, bx, by):
    ex = bx - ax
    ey = by - ay
    l2 = ex * ex + ey * ey
    t = 0.0
    if l2 > 0.0:
        t = ((px - ax) * ex + (py - ay) * ey) / l2
        t = min(max(t, 0.0), 1.0)
    dx = px - (ax + t * ex)
    dy = py - (ay + t * ey)
    return math.sqrt(dx * dx + dy * dy), t, dx, dy


@njit(cache=True, nogil=True)
def _pixel_range(lo, hi, radius, n):
    a = max(0, int(math.ceil(lo - radius)))
    b = min(n - 1, int(math.floor(hi + radius)))
    return a, b


@njit(cache=True, nogil=True)
def coverage(tri, valid, height, width):
    """Hard coverage of pixel centers by any valid face; counts degenerate faces."""
    covered = np.zeros((height, width), dtype=np.bool_)
    n_degenerate = 0
    for f in range(tri.shape[0]):
        if not valid[f]:
            continue
        ax, ay = tri[f, 0, 0], tri[f, 0, 1]
        bx, by = tri[f, 1, 0], tri[f, 1, 1]
        cx, cy = tri[f, 2, 0], tri[f, 2, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < _MIN_AREA:
            n_degenerate += 1
            continue
        u0, u1 = _pixel_range(min(ax, bx, cx), max(ax, bx, cx), 0.0, width)
        v0, v1 = _pixel_range(min(ay, by, cy), max(ay, by, cy), 0.0, height)
        for v in range(v0, v1 + 1):
            for u in range(u0, u1 + 1):
                if covered[v, u]:
                    continue
                w0 = (bx - ax) * (v - ay) - (by - ay) * (u - ax)
                w1 = (cx - bx) * (v - by) - (cy - by) * (u - bx)
                w2 = (ax - cx) * (v - cy) - (ay - cy) * (u - cx)
                if area > 0:
                    inside = w0 >= 0 and w1 >= 0 and w2 >= 0
                else:
                    inside = w0 <= 0 and w1 <= 0 and w2 <= 0
                if inside:
                    covered[v, u] = True
    return covered, n_degenerate


@njit(cache=True, nogil=True)
def contour_distance(seg, height, width, radius):
    """Distance from each pixel center to the nearest contour segment.

    Pixels farther than ``radius`` from every segment keep ``inf`` and index -1.
    Ties keep the lowest segment index.
    """
    d2 = np.full((height, width), np.inf)
    arg = np.full((height, width), -1, dtype=np.int64)
    r2 = radius * radius
    for e in range(seg.shape[0]):
        ax, ay = seg[e, 0, 0], seg[e, 0, 1]
        bx, by = seg[e, 1, 0], seg[e, 1, 1]
        ex = bx - ax
        ey = by - ay
        l2 = ex * ex + ey * ey
        inv = 1.0 / l2 if l2 > 0.0 else 0.0
        u0, u1 = _pixel_range(min(ax, bx), max(ax, bx), radius, width)
        v0, v1 = _pixel_range(min(ay, by), max(ay, by), radius, height)
        for v in range(v0, v1 + 1):
            for u in range(u0, u1 + 1):
                t = ((u - ax) * ex + (v - ay) * ey) * inv
                t = min(max(t, 0.0), 1.0)
                dx = u - (ax + t * ex)
                dy = v - (ay + t * ey)
                q = dx * dx + dy * dy
                if q <= r2 and q < d2[v, u]:
                    d2[v, u] = q
                    arg[v, u] = e
    return np.sqrt(d2), arg


@njit(cache=True, nogil=True)
def contour_backward(seg, arg, coef):
    """Gradient w.r.t. segment endpoints given coef = dL/d(distance) per pixel."""
    height, width = arg.shape
    grad = np.zeros(seg.shape)
    for v in range(height):
        for u in range(width):
            e = arg[v, u]
            c = coef[v, u]
            if e < 0 or c == 0.0:
                continue
            d, t, dx, dy = _seg_dist(u, v, seg[e, 0, 0], seg[e, 0, 1], seg[e, 1, 0], seg[e, 1, 1])
            if d < 1e-12:
                continue
            nx = dx / d
            ny = dy / d
            grad[e, 0, 0] -= c * nx * (1.0 - t)
            grad[e, 0, 1] -= c * ny * (1.0 - t)
            grad[e, 1, 0] -= c * nx * t
            grad[e, 1, 1] -= c * ny * t
    return grad


@njit(cache=True, nogil=True)
def zbuffer(verts, faces, tri, valid, fx, fy, cx, cy, height, width, near, far):
    """Hard z-buffer with exact ray/plane depth; returns (depth, winner face)."""
    depth = np.full((height, width), np.inf)
    winner = np.full((height, width), -1, dtype=np.int64)
    for f in range(faces.shape[0]):
        if not valid[f]:
            continue
        ax, ay = tri[f, 0, 0], tri[f, 0, 1]
        bx, by = tri[f, 1, 0], tri[f, 1, 1]
        qx, qy = tri[f, 2, 0], tri[f, 2, 1]
        area = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
        if abs(area) < _MIN_AREA:
            continue
        p0 = verts[faces[f, 0]]
        p1 = verts[faces[f, 1]]
        p2 = verts[faces[f, 2]]
        e1 = p1 - p0
        e2 = p2 - p0
        nx = e1[1] * e2[2] - e1[2] * e2[1]
        ny = e1[2] * e2[0] - e1[0] * e2[2]
        nz = e1[0] * e2[1] - e1[1] * e2[0]
        num = nx * p0[0] + ny * p0[1] + nz * p0[2]
        u0, u1 = _pixel_range(min(ax, bx, qx), max(ax, bx, qx), 0.0, width)
        v0, v1 = _pixel_range(min(ay, by, qy), max(ay, by, qy), 0.0, height)
        for v in range(v0, v1 + 1):
            ry = (v - cy) / fy
            for u in range(u0, u1 + 1):
                w0 = (bx - ax) * (v - ay) - (by - ay) * (u - ax)
                w1 = (qx - bx) * (v - by) - (qy - by) * (u - bx)
                w2 = (ax - qx) * (v - qy) - (ay - qy) * (u - qx)
                if area > 0:
                    inside = w0 >= 0 and w1 >= 0 and w2 >= 0
                else:
                    inside = w0 <= 0 and w1 <= 0 and w2 <= 0
                if not inside:
                    continue
                rx = (u - cx) / fx
                den = nx * rx + ny * ry + nz
                if abs(den) < 1e-15:
                    continue
                z = num / den
                if z > near and z < far and z < depth[v, u]:
                    depth[v, u] = z
                    winner[v, u] = f
    return depth, winner


@njit(cache=True, nogil=True)
def _cross(ax, ay, az, bx, by, bz):
    return ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx


@njit(cache=True, nogil=True)
def zbuffer_backward(verts, faces, winner, coef, fx, fy, cx, cy):
    """Gradient of sum(coef * depth) w.r.t. vertices with winners held fixed.

    With depth z = det(p0, p1, p2) / (n . r), n = (p1 - p0) x (p2 - p0),
    dz/dp_j = (p_{j+1} x p_{j+2} - z (p_{j+1} - p_{j+2}) x r) / (n . r).
    """
    height, width = winner.shape
    grad = np.zeros(verts.shape)
    p = np.empty((3, 3))
    for v in range(height):
        ry = (v - cy) / fy
        for u in range(width):
            f = winner[v, u]
            g = coef[v, u]
            if f < 0 or g == 0.0:
                continue
            rx = (u - cx) / fx
            for j in range(3):
                for c in range(3):
                    p[j, c] = verts[faces[f, j], c]
            nx, ny, nz = _cross(p[1, 0] - p[0, 0], p[1, 1] - p[0, 1], p[1, 2] - p[0, 2],
                                p[2, 0] - p[0, 0], p[2, 1] - p[0, 1], p[2, 2] - p[0, 2])
            den = nx * rx + ny * ry + nz
            z = (nx * p[0, 0] + ny * p[0, 1] + nz * p[0, 2]) / den
            for j in range(3):
                a = (j + 1) % 3
                b = (j + 2) % 3
                qx, qy, qz = _cross(p[a, 0], p[a, 1], p[a, 2], p[b, 0], p[b, 1], p[b, 2])
                sx, sy, sz = _cross(p[a, 0] - p[b, 0], p[a, 1] - p[b, 1], p[a, 2] - p[b, 2], rx, ry, 1.0)
                k = faces[f, j]
                scale = g / den
                grad[k, 0] += scale * (qx - z * sx)
                grad[k, 1] += scale * (qy - z * sy)
                grad[k, 2] += scale * (qz - z * sz)
    return grad


@njit(cache=True, nogil=True)
def warp(depth, in_obj, fx, fy, cx, cy, R_bg, t_bg, R_obj, t_obj, fx2, fy2, cx2, cy2, img):
    """Warp ``img`` into the depth map's frame.

    Pixels with ``in_obj`` move with (R_obj, t_obj), all others with
    (R_bg, t_bg). Returns sampled values, validity and d(value)/d(depth).
    Bilinear taps clamp to the last full cell, as in the numpy sampler.
    """
    height, width = depth.shape
    hh, ww = img.shape
    val = np.zeros((height, width))
    valid = np.zeros((height, width), dtype=np.bool_)
    dval = np.zeros((height, width))
    for v in range(height):
        ry = (v - cy) / fy
        for u in range(width):
            d = depth[v, u]
            if not (d > 0.0 and math.isfinite(d)):
                continue
            rx = (u - cx) / fx
            R = R_obj if in_obj[v, u] else R_bg
            t = t_obj if in_obj[v, u] else t_bg
            ax = R[0, 0] * rx + R[0, 1] * ry + R[0, 2]
            ay = R[1, 0] * rx + R[1, 1] * ry + R[1, 2]
            az = R[2, 0] * rx + R[2, 1] * ry + R[2, 2]
            px = ax * d + t[0]
            py = ay * d + t[1]
            pz = az * d + t[2]
            if pz <= 1e-6:
                continue
            u2 = fx2 * px / pz + cx2
            v2 = fy2 * py / pz + cy2
            if not (u2 >= 0.0 and u2 <= ww - 1 and v2 >= 0.0 and v2 <= hh - 1):
                continue
            u0 = min(max(int(math.floor(u2)), 0), max(ww - 2, 0))
            v0 = min(max(int(math.floor(v2)), 0), max(hh - 2, 0))
            u1 = min(u0 + 1, ww - 1)
            v1 = min(v0 + 1, hh - 1)
            a = u2 - u0
            b = v2 - v0
            i00 = img[v0, u0]
            i01 = img[v0, u1]
            i10 = img[v1, u0]
            i11 = img[v1, u1]
            top = i00 + a * (i01 - i00)
            bottom = i10 + a * (i11 - i10)
            gu = (1 - b) * (i01 - i00) + b * (i11 - i10)
            gv = bottom - top
            du = fx2 * (ax * pz - px * az) / (pz * pz)
            dv = fy2 * (ay * pz - py * az) / (pz * pz)
            val[v, u] = top + b * (bottom - top)
            valid[v, u] = True
            dval[v, u] = gu * du + gv * dv
    return val, valid, dval


@njit(cache=True, nogil=True)
def nearest_brute(points, vertices):
    """Exact nearest vertex per point; ties keep the lowest vertex index."""
    n = points.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    for i in range(n):
        best = np.inf
        arg = -1
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        for j in range(vertices.shape[0]):
            dx = px - vertices[j, 0]
            dy = py - vertices[j, 1]
            dz = pz - vertices[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
                arg = j
        idx[i] = arg
        dist[i] = math.sqrt(best)
    return idx, dist


@njit(cache=True, nogil=True)
def _hidden_interval(ax, ay, rx, ry, uv, faces, f):
    """Open parameter interval of segment a + t r (t in [0, 1]) inside face f.

    Returns (t_lo, t_hi, k_lo, k_hi) where k_* is the face edge that bounds
    the interval (-1 when the bound is the segment's own end).
    """
    p0 = faces[f, 0]
    p1 = faces[f, 1]
    p2 = faces[f, 2]
    area = ((uv[p1, 0] - uv[p0, 0]) * (uv[p2, 1] - uv[p0, 1])
            - (uv[p1, 1] - uv[p0, 1]) * (uv[p2, 0] - uv[p0, 0]))
    s = 1.0 if area > 0 else -1.0
    lo, hi = 0.0, 1.0
    k_lo, k_hi = -1, -1
    for k in range(3):
        i = faces[f, k]
        j = faces[f, (k + 1) % 3]
        ex = uv[j, 0] - uv[i, 0]
        ey = uv[j, 1] - uv[i, 1]
        f0 = s * (ex * (ay - uv[i, 1]) - ey * (ax - uv[i, 0]))
        f1 = s * (ex * ry - ey * rx)
        if f1 == 0.0:
            if f0 <= 0.0:
                return 1.0, 0.0, -1, -1
            continue
        t = -f0 / f1
        if f1 > 0.0:
            if t > lo:
                lo = t
                k_lo = k
        elif t < hi:
            hi = t
            k_hi = k
    return lo, hi, k_lo, k_hi


@njit(cache=True, nogil=True)
def outline_pieces(uv, edges, faces, usable, min_len):
    """Parts of the contour edges that lie on the boundary of the union of faces.

    Every edge is clipped against all usable faces that do not contain it.
    Returns segments (P, 2, 2), the owning edge (P,) and endpoint records
    (P, 2, 3): (kind, c, d) with kind 0/1 = the edge's first/second vertex and
    kind 2 = the crossing with the face edge from vertex c to vertex d.
    """
    n_e = edges.shape[0]
    n_f = faces.shape[0]
    cap = 8 * n_e + 8
    seg = np.empty((cap, 2, 2))
    owner = np.empty(cap, dtype=np.int64)
    ends = np.empty((cap, 2, 3), dtype=np.int64)
    lo_t = np.empty(n_f)
    hi_t = np.empty(n_f)
    lo_c = np.empty((n_f, 2), dtype=np.int64)
    hi_c = np.empty((n_f, 2), dtype=np.int64)
    n = 0
    for e in range(n_e):
        a = edges[e, 0]
        b = edges[e, 1]
        ax, ay = uv[a, 0], uv[a, 1]
        rx, ry = uv[b, 0] - ax, uv[b, 1] - ay
        m = 0
        for f in range(n_f):
            if not usable[f]:
                continue
            has_a = faces[f, 0] == a or faces[f, 1] == a or faces[f, 2] == a
            has_b = faces[f, 0] == b or faces[f, 1] == b or faces[f, 2] == b
            if has_a and has_b:
                continue
            lo, hi, k_lo, k_hi = _hidden_interval(ax, ay, rx, ry, uv, faces, f)
            if hi - lo <= 1e-12:
                continue
            lo_t[m] = lo
            hi_t[m] = hi
            lo_c[m, 0] = faces[f, k_lo] if k_lo >= 0 else -1
            lo_c[m, 1] = faces[f, (k_lo + 1) % 3] if k_lo >= 0 else -1
            hi_c[m, 0] = faces[f, k_hi] if k_hi >= 0 else -1
            hi_c[m, 1] = faces[f, (k_hi + 1) % 3] if k_hi >= 0 else -1
            m += 1
        order = np.argsort(lo_t[:m], kind="mergesort")
        # sweep: visible pieces lie between the merged hidden intervals
        start = 0.0
        sc0, sc1 = -1, -1
        k = 0
        while True:
            if k < m:
                j = order[k]
                stop, ec0, ec1 = lo_t[j], lo_c[j, 0], lo_c[j, 1]
            else:
                stop, ec0, ec1 = 1.0, -1, -1
            if stop - start > 0.0 and (stop - start) * math.sqrt(rx * rx + ry * ry) > min_len:
                if n == seg.shape[0]:
                    seg2 = np.empty((2 * n, 2, 2))
                    seg2[:n] = seg
                    seg = seg2
                    owner2 = np.empty(2 * n, dtype=np.int64)
                    owner2[:n] = owner
                    owner = owner2
                    ends2 = np.empty((2 * n, 2, 3), dtype=np.int64)
                    ends2[:n] = ends
                    ends = ends2
                seg[n, 0, 0] = ax + start * rx
                seg[n, 0, 1] = ay + start * ry
                seg[n, 1, 0] = ax + stop * rx
                seg[n, 1, 1] = ay + stop * ry
                owner[n] = e
                if sc0 < 0:
                    ends[n, 0, 0], ends[n, 0, 1], ends[n, 0, 2] = 0, -1, -1
                else:
                    ends[n, 0, 0], ends[n, 0, 1], ends[n, 0, 2] = 2, sc0, sc1
                if ec0 < 0:
                    ends[n, 1, 0], ends[n, 1, 1], ends[n, 1, 2] = 1, -1, -1
                else:
                    ends[n, 1, 0], ends[n, 1, 1], ends[n, 1, 2] = 2, ec0, ec1
                n += 1
            if k >= m:
                break
            # advance over every hidden interval that overlaps the current one
            j = order[k]
            cur, cc0, cc1 = hi_t[j], hi_c[j, 0], hi_c[j, 1]
            k += 1
            while k < m and lo_t[order[k]] <= cur:
                j = order[k]
                if hi_t[j] > cur:
                    cur, cc0, cc1 = hi_t[j], hi_c[j, 0], hi_c[j, 1]
                k += 1
            if cur >= 1.0:
                break
            start, sc0, sc1 = cur, cc0, cc1
    return seg[:n], owner[:n], ends[:n]


@njit(cache=True, nogil=True)
def _cut_backward(g, a, b, c, d, uv, grad):
    """Chain a gradient on X = intersection(line ab, line cd) to the four vertices."""
    ax, ay = uv[a, 0], uv[a, 1]
    rx, ry = uv[b, 0] - ax, uv[b, 1] - ay
    sx, sy = uv[d, 0] - uv[c, 0], uv[d, 1] - uv[c, 1]
    qx, qy = uv[c, 0] - ax, uv[c, 1] - ay
    den = rx * sy - ry * sx
    if den == 0.0:
        return
    t = (qx * sy - qy * sx) / den
    # dt/d(vertex) = (dN - t dD) / D with N = q x s, D = r x s
    gr = g[0] * rx + g[1] * ry
    dNa_x, dNa_y = -sy, sx
    dNc_x, dNc_y = sy + qy, -sx - qx
    dNd_x, dNd_y = -qy, qx
    dDa_x, dDa_y = -sy, sx
    dDb_x, dDb_y = sy, -sx
    dDc_x, dDc_y = ry, -rx
    dDd_x, dDd_y = -ry, rx
    grad[a, 0] += (1.0 - t) * g[0] + gr * (dNa_x - t * dDa_x) / den
    grad[a, 1] += (1.0 - t) * g[1] + gr * (dNa_y - t * dDa_y) / den
    grad[b, 0] += t * g[0] + gr * (-t * dDb_x) / den
    grad[b, 1] += t * g[1] + gr * (-t * dDb_y) / den
    grad[c, 0] += gr * (dNc_x - t * dDc_x) / den
    grad[c, 1] += gr * (dNc_y - t * dDc_y) / den
    grad[d, 0] += gr * (dNd_x - t * dDd_x) / den
    grad[d, 1] += gr * (dNd_y - t * dDd_y) / den


@njit(cache=True, nogil=True)
def pieces_backward(g_seg, owner, ends, edges, uv):
    """Map gradients on outline piece endpoints to projected vertex gradients."""
    grad = np.zeros(uv.shape)
    g = np.empty(2)
    for p in range(g_seg.shape[0]):
        a = edges[owner[p], 0]
        b = edges[owner[p], 1]
        for s in range(2):
            g[0] = g_seg[p, s, 0]
            g[1] = g_seg[p, s, 1]
            kind = ends[p, s, 0]
            if kind == 0:
                grad[a, 0] += g[0]
                grad[a, 1] += g[1]
            elif kind == 1:
                grad[b, 0] += g[0]
                grad[b, 1] += g[1]
            else:
                _cut_backward(g, a, b, ends[p, s, 1], ends[p, s, 2], uv, grad)
    return grad
