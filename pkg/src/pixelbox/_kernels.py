"""Loop-bound numeric kernels with optional numba acceleration.

Two kernels live here: the O(n^3) assignment solve and the oriented-box
intersection volume (half-space clipping). Both are written as plain Python
functions that numba can compile unchanged; the ``*_py`` and ``*_jit``
variants are always importable (the jit ones are None without numba) and the
unsuffixed names are the selected backend.

Backend selection: environment variable ``PIXELBOX_NUMBA`` set to ``0`` (or
``false``/``off``) forces the pure-Python path, ``1`` (or ``true``/``on``)
requires numba, anything else (default) uses numba when importable.
"""

from __future__ import annotations

import math
import os

import numpy as np


def _assignment(cost):
    """Minimum-cost assignment on a square matrix via shortest augmenting paths.

    Returns the column assigned to each row. Rows are processed lowest index
    first and scans run in index order, so ties resolve deterministically.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.full(n + 1, -1, dtype=np.int64)  # row matched to each column; column n is virtual
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        match[n] = i
        j0 = n
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = -1
            for j in range(n):
                if not used[j]:
                    cur = cost[i0, j] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == -1:
                break
        while j0 != n:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(n):
        row_to_col[match[j]] = j
    return row_to_col


# Quad vertex cycles of the 6 faces of the sign-bit-ordered cuboid template.
_BOX_FACES = np.array(
    [
        [0, 2, 6, 4],  # x-
        [1, 3, 7, 5],  # x+
        [0, 1, 5, 4],  # y-
        [2, 3, 7, 6],  # y+
        [0, 1, 3, 2],  # z-
        [4, 5, 7, 6],  # z+
    ],
    dtype=np.int64,
)
_BOX_FACES.setflags(write=False)

_MAXV = 32  # vertices per face polygon after clipping
_MAXF = 16  # faces incl. the caps added by the 6 clip planes


def _box_clip_volume(verts, half):
    """Volume of an oriented box clipped to the axis-aligned box |p| <= half.

    ``verts`` are the 8 vertices of the oriented box (template order) already
    expressed in the axis-aligned box's local frame. Faces are clipped by the
    six half-spaces Sutherland-Hodgman style; every plane that actually cuts
    adds its convex cross-section as a cap face, and the volume comes from a
    tetrahedral fan around the vertex centroid.
    """
    eps = 1e-9
    poly = np.zeros((_MAXF, _MAXV, 3))
    cnt = np.zeros(_MAXF, dtype=np.int64)
    nf = 6
    for f in range(6):
        for k in range(4):
            for c in range(3):
                poly[f, k, c] = verts[_BOX_FACES[f, k], c]
        cnt[f] = 4

    for axis in range(3):
        for side in range(2):
            sign = 1.0 if side == 0 else -1.0
            bound = half[axis]
            newpoly = np.zeros((_MAXF, _MAXV, 3))
            newcnt = np.zeros(_MAXF, dtype=np.int64)
            nnf = 0
            cap = np.zeros((_MAXF * _MAXV, 3))
            ncap = 0
            cut = False
            for f in range(nf):
                m = cnt[f]
                if m < 3:
                    continue
                out = np.zeros((_MAXV, 3))
                no = 0
                for k in range(m):
                    kp = k - 1 if k > 0 else m - 1
                    dc = bound - sign * poly[f, k, axis]
                    dp = bound - sign * poly[f, kp, axis]
                    if dc < -eps or dp < -eps:
                        cut = True
                    if (dc < -eps) != (dp < -eps):
                        t = dp / (dp - dc)
                        for c in range(3):
                            pt = poly[f, kp, c] + (poly[f, k, c] - poly[f, kp, c]) * t
                            out[no, c] = pt
                            cap[ncap, c] = pt
                        no += 1
                        ncap += 1
                    if dc >= -eps:
                        for c in range(3):
                            out[no, c] = poly[f, k, c]
                        no += 1
                        if dc <= eps:
                            for c in range(3):
                                cap[ncap, c] = poly[f, k, c]
                            ncap += 1
                if no >= 3:
                    for k in range(no):
                        for c in range(3):
                            newpoly[nnf, k, c] = out[k, c]
                    newcnt[nnf] = no
                    nnf += 1
            if cut and ncap >= 3:
                # Deduplicate the collected on-plane points.
                uniq = np.zeros((_MAXV, 3))
                nu = 0
                for k in range(ncap):
                    fresh = True
                    for q in range(nu):
                        if (
                            abs(cap[k, 0] - uniq[q, 0]) <= 1e-9
                            and abs(cap[k, 1] - uniq[q, 1]) <= 1e-9
                            and abs(cap[k, 2] - uniq[q, 2]) <= 1e-9
                        ):
                            fresh = False
                            break
                    if fresh and nu < _MAXV:
                        for c in range(3):
                            uniq[nu, c] = cap[k, c]
                        nu += 1
                if nu >= 3:
                    # The section of a convex polytope is convex: order its
                    # vertices by angle around the centroid in the cut plane.
                    b = (axis + 1) % 3
                    c2 = (axis + 2) % 3
                    cb = 0.0
                    cc = 0.0
                    for k in range(nu):
                        cb += uniq[k, b]
                        cc += uniq[k, c2]
                    cb /= nu
                    cc /= nu
                    ang = np.zeros(_MAXV)
                    for k in range(nu):
                        ang[k] = math.atan2(uniq[k, c2] - cc, uniq[k, b] - cb)
                    for k in range(1, nu):  # insertion sort, nu is tiny
                        ka = ang[k]
                        p0 = uniq[k, 0]
                        p1 = uniq[k, 1]
                        p2 = uniq[k, 2]
                        q = k - 1
                        while q >= 0 and ang[q] > ka:
                            ang[q + 1] = ang[q]
                            uniq[q + 1, 0] = uniq[q, 0]
                            uniq[q + 1, 1] = uniq[q, 1]
                            uniq[q + 1, 2] = uniq[q, 2]
                            q -= 1
                        ang[q + 1] = ka
                        uniq[q + 1, 0] = p0
                        uniq[q + 1, 1] = p1
                        uniq[q + 1, 2] = p2
                    for k in range(nu):
                        for c in range(3):
                            newpoly[nnf, k, c] = uniq[k, c]
                    newcnt[nnf] = nu
                    nnf += 1
            poly = newpoly
            cnt = newcnt
            nf = nnf
            if nf == 0:
                return 0.0

    # Vertex centroid is interior for a convex polytope, so unsigned
    # tetrahedra of the face fans sum exactly to the volume.
    gx = 0.0
    gy = 0.0
    gz = 0.0
    total = 0
    for f in range(nf):
        for k in range(cnt[f]):
            gx += poly[f, k, 0]
            gy += poly[f, k, 1]
            gz += poly[f, k, 2]
            total += 1
    if total == 0:
        return 0.0
    gx /= total
    gy /= total
    gz /= total
    vol = 0.0
    for f in range(nf):
        m = cnt[f]
        ax = poly[f, 0, 0] - gx
        ay = poly[f, 0, 1] - gy
        az = poly[f, 0, 2] - gz
        for k in range(1, m - 1):
            bx = poly[f, k, 0] - gx
            by = poly[f, k, 1] - gy
            bz = poly[f, k, 2] - gz
            cx = poly[f, k + 1, 0] - gx
            cy = poly[f, k + 1, 1] - gy
            cz = poly[f, k + 1, 2] - gz
            det = (
                ax * (by * cz - bz * cy)
                - ay * (bx * cz - bz * cx)
                + az * (bx * cy - by * cx)
            )
            vol += abs(det)
    return vol / 6.0


def _select_backend():
    flag = os.environ.get("PIXELBOX_NUMBA", "auto").strip().lower()
    if flag in ("0", "false", "off", "no"):
        return False, False
    try:
        import numba  # noqa: F401

        available = True
    except ImportError:
        available = False
    if flag in ("1", "true", "on", "yes"):
        if not available:
            raise ImportError("PIXELBOX_NUMBA=1 but numba is not importable")
        return True, True
    return available, available


NUMBA_AVAILABLE, USING_NUMBA = _select_backend()

assignment_py = _assignment
box_clip_volume_py = _box_clip_volume

if NUMBA_AVAILABLE:
    from numba import njit

    assignment_jit = njit(cache=True)(_assignment)
    box_clip_volume_jit = njit(cache=True)(_box_clip_volume)
else:
    assignment_jit = None
    box_clip_volume_jit = None

if USING_NUMBA:
    assignment = assignment_jit
    box_clip_volume = box_clip_volume_jit
else:
    assignment = assignment_py
    box_clip_volume = box_clip_volume_py


def warm_up():
    """Trigger jit compilation (a no-op on the pure-Python backend)."""
    cost = np.array([[0.0, 1.0], [1.0, 0.0]])
    assignment(cost)
    box_clip_volume(np.asarray(0.5 * np.array(
        [[-1, -1, -1], [1, -1, -1], [-1, 1, -1], [1, 1, -1],
         [-1, -1, 1], [1, -1, 1], [-1, 1, 1], [1, 1, 1]], dtype=np.float64)),
        np.array([0.5, 0.5, 0.5]))
