# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels.

Mirrors mitoforge._kernels_py (same algorithms, same tolerance logic);
see mitoforge.kernels for backend selection.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()

from ._mc_tables import EDGE_AXIS, EDGE_BASE, TRI_TABLE

BACKEND_NAME = "cython"

FLAG_SURFACE = 1
FLAG_DEGENERATE = 2

cdef unsigned char _F_SURF = 1
cdef unsigned char _F_DEGEN = 2

# flattened copies of the lookup tables for nogil access
cdef cnp.int8_t[:, ::1] _TRI = np.ascontiguousarray(TRI_TABLE)
cdef cnp.int8_t[:, ::1] _EDGE_BASE = np.ascontiguousarray(EDGE_BASE)
cdef cnp.int8_t[::1] _EDGE_AXIS = np.ascontiguousarray(EDGE_AXIS)

# cube corner offsets, bit order must match the table convention
cdef int[8] _VOX = [0, 1, 1, 0, 0, 1, 1, 0]
cdef int[8] _VOY = [0, 0, 1, 1, 0, 0, 1, 1]
cdef int[8] _VOZ = [0, 0, 0, 0, 1, 1, 1, 1]


def mc_collect(values, double iso):
    """Table-driven cube scan; returns (n_triangles, 3) int64 edge keys."""
    cdef cnp.float64_t[:, :, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t nx = v.shape[0], ny = v.shape[1], nz = v.shape[2]
    if nx < 2 or ny < 2 or nz < 2:
        return np.zeros((0, 3), dtype=np.int64)

    cdef Py_ssize_t ix, iy, iz, bit, t, e, cap, count
    cdef int ci
    cdef cnp.int8_t le
    cdef Py_ssize_t ex, ey, ez

    cap = 4096
    out = np.empty((cap, 3), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] ov = out
    count = 0

    for ix in range(nx - 1):
        for iy in range(ny - 1):
            for iz in range(nz - 1):
                ci = 0
                for bit in range(8):
                    if v[ix + _VOX[bit], iy + _VOY[bit], iz + _VOZ[bit]] > iso:
                        ci |= 1 << bit
                if ci == 0 or ci == 255:
                    continue
                for t in range(5):
                    if _TRI[ci, 3 * t] < 0:
                        break
                    if count + 1 > cap:
                        cap *= 2
                        grown = np.empty((cap, 3), dtype=np.int64)
                        grown[:count] = out[:count]
                        out = grown
                        ov = out
                    for e in range(3):
                        le = _TRI[ci, 3 * t + e]
                        ex = ix + _EDGE_BASE[le, 0]
                        ey = iy + _EDGE_BASE[le, 1]
                        ez = iz + _EDGE_BASE[le, 2]
                        ov[count, e] = ((ex * ny + ey) * nz + ez) * 3 + _EDGE_AXIS[le]
                    count += 1
    return np.asarray(out[:count]).copy()


cdef double _pt_tri_dist2(double px, double py, double pz,
                          double ax, double ay, double az,
                          double bx, double by, double bz,
                          double cx, double cy, double cz) noexcept nogil:
    """Squared point-triangle distance (Ericson closest-point)."""
    cdef double abx = bx - ax, aby = by - ay, abz = bz - az
    cdef double acx = cx - ax, acy = cy - ay, acz = cz - az
    cdef double apx = px - ax, apy = py - ay, apz = pz - az
    cdef double d1 = abx * apx + aby * apy + abz * apz
    cdef double d2 = acx * apx + acy * apy + acz * apz
    cdef double qx, qy, qz, v, w, denom
    cdef double bpx, bpy, bpz, cpx, cpy, cpz
    cdef double d3, d4, d5, d6, va, vb, vc
    if d1 <= 0 and d2 <= 0:
        qx = ax; qy = ay; qz = az
    else:
        bpx = px - bx; bpy = py - by; bpz = pz - bz
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        if d3 >= 0 and d4 <= d3:
            qx = bx; qy = by; qz = bz
        else:
            cpx = px - cx; cpy = py - cy; cpz = pz - cz
            d5 = abx * cpx + aby * cpy + abz * cpz
            d6 = acx * cpx + acy * cpy + acz * cpz
            if d6 >= 0 and d5 <= d6:
                qx = cx; qy = cy; qz = cz
            else:
                vc = d1 * d4 - d3 * d2
                if vc <= 0 and d1 >= 0 and d3 <= 0:
                    denom = d1 - d3
                    if denom == 0: denom = 1.0
                    v = d1 / denom
                    qx = ax + v * abx; qy = ay + v * aby; qz = az + v * abz
                else:
                    vb = d5 * d2 - d1 * d6
                    if vb <= 0 and d2 >= 0 and d6 <= 0:
                        denom = d2 - d6
                        if denom == 0: denom = 1.0
                        w = d2 / denom
                        qx = ax + w * acx; qy = ay + w * acy; qz = az + w * acz
                    else:
                        va = d3 * d6 - d5 * d4
                        if va <= 0 and d4 - d3 >= 0 and d5 - d6 >= 0:
                            denom = (d4 - d3) + (d5 - d6)
                            if denom == 0: denom = 1.0
                            w = (d4 - d3) / denom
                            qx = bx + w * (cx - bx); qy = by + w * (cy - by); qz = bz + w * (cz - bz)
                        else:
                            denom = va + vb + vc
                            if denom == 0: denom = 1.0
                            v = vb / denom
                            w = vc / denom
                            qx = ax + v * abx + w * acx
                            qy = ay + v * aby + w * acy
                            qz = az + v * abz + w * acz
    cdef double dx = px - qx, dy = py - qy, dz = pz - qz
    return dx * dx + dy * dy + dz * dz


def ray_crossings(vertices, triangles, points,
                  double eps_z, double eps_area, double eps_surf):
    """Count +z ray/triangle crossings above each query point.

    Same contract as the python backend: (crossings, flags) with surface and
    degenerate flag bits.
    """
    cdef cnp.float64_t[:, ::1] V = np.ascontiguousarray(vertices, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] T = np.ascontiguousarray(triangles, dtype=np.int64)
    cdef cnp.float64_t[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t nt = T.shape[0], n_pts = P.shape[0]

    crossings = np.zeros(n_pts, dtype=np.int64)
    flags = np.zeros(n_pts, dtype=np.uint8)
    cdef cnp.int64_t[::1] cr = crossings
    cdef cnp.uint8_t[::1] fl = flags
    if nt == 0 or n_pts == 0:
        return crossings, flags

    # per-triangle corner copies and xy bounds
    ta = np.asarray(V)[np.asarray(T)[:, 0]]
    tb = np.asarray(V)[np.asarray(T)[:, 1]]
    tc = np.asarray(V)[np.asarray(T)[:, 2]]
    txy = np.stack([ta[:, :2], tb[:, :2], tc[:, :2]], axis=1)
    bmin = txy.min(axis=1)
    bmax = txy.max(axis=1)
    tzmax = np.maximum(np.maximum(ta[:, 2], tb[:, 2]), tc[:, 2])

    lo = bmin.min(axis=0)
    hi = bmax.max(axis=0)
    span = np.maximum(hi - lo, 1e-300)
    cdef int g = max(1, min(256, int(sqrt(nt / 4.0)) + 1))
    cdef int gx = g, gy = g
    inv = np.array([gx, gy]) / span

    # CSR bucket structure over the xy grid
    ix0 = np.clip(((bmin[:, 0] - lo[0]) * inv[0]).astype(np.int64), 0, gx - 1)
    ix1 = np.clip(((bmax[:, 0] - lo[0]) * inv[0]).astype(np.int64), 0, gx - 1)
    iy0 = np.clip(((bmin[:, 1] - lo[1]) * inv[1]).astype(np.int64), 0, gy - 1)
    iy1 = np.clip(((bmax[:, 1] - lo[1]) * inv[1]).astype(np.int64), 0, gy - 1)
    counts = ((ix1 - ix0 + 1) * (iy1 - iy0 + 1))
    total = int(counts.sum())
    cell_items_np = np.empty(total, dtype=np.int64)
    cell_count_np = np.zeros(gx * gy + 1, dtype=np.int64)

    cdef cnp.int64_t[::1] cix0 = ix0, cix1 = ix1, ciy0 = iy0, ciy1 = iy1
    cdef cnp.int64_t[::1] citems = cell_items_np
    cdef cnp.int64_t[::1] ccnt = cell_count_np
    cdef Py_ssize_t t2, cx, cy
    for t2 in range(nt):
        for cx in range(cix0[t2], cix1[t2] + 1):
            for cy in range(ciy0[t2], ciy1[t2] + 1):
                ccnt[cx * gy + cy + 1] += 1
    cell_start_np = np.cumsum(cell_count_np)
    cdef cnp.int64_t[::1] cstart = cell_start_np
    fill_np = cell_start_np[0:gx * gy].copy()
    cdef cnp.int64_t[::1] cfill = fill_np
    cdef Py_ssize_t slot
    for t2 in range(nt):
        for cx in range(cix0[t2], cix1[t2] + 1):
            for cy in range(ciy0[t2], ciy1[t2] + 1):
                slot = cx * gy + cy
                citems[cfill[slot]] = t2
                cfill[slot] += 1

    cdef cnp.float64_t[:, ::1] A = ta, B = tb, C = tc
    cdef cnp.float64_t[:, ::1] BMIN = bmin, BMAX = bmax
    cdef cnp.float64_t[::1] ZMAX = tzmax
    cdef double lox = lo[0], loy = lo[1], invx = inv[0], invy = inv[1]

    cdef Py_ssize_t i, k, tcand
    cdef Py_ssize_t pcx, pcy, cell
    cdef double px, py, pz
    cdef double axr, ayr, bxr, byr, cxr, cyr
    cdef double s_ab, s_bc, s_ca
    cdef double nxv, nyv, nzv, z_hit
    cdef bint pos, neg, strict, onproj
    cdef long n_cross
    cdef unsigned char flag
    cdef double e1x, e1y, e1z, e2x, e2y, e2z

    with nogil:
        for i in range(n_pts):
            px = P[i, 0]; py = P[i, 1]; pz = P[i, 2]
            pcx = <Py_ssize_t>((px - lox) * invx)
            if pcx < 0: pcx = 0
            if pcx > gx - 1: pcx = gx - 1
            pcy = <Py_ssize_t>((py - loy) * invy)
            if pcy < 0: pcy = 0
            if pcy > gy - 1: pcy = gy - 1
            cell = pcx * gy + pcy
            n_cross = 0
            flag = 0
            for k in range(cstart[cell], cstart[cell + 1]):
                tcand = citems[k]
                if (px < BMIN[tcand, 0] - eps_z or px > BMAX[tcand, 0] + eps_z
                        or py < BMIN[tcand, 1] - eps_z or py > BMAX[tcand, 1] + eps_z):
                    continue
                axr = A[tcand, 0] - px; ayr = A[tcand, 1] - py
                bxr = B[tcand, 0] - px; byr = B[tcand, 1] - py
                cxr = C[tcand, 0] - px; cyr = C[tcand, 1] - py
                s_ab = axr * byr - ayr * bxr
                s_bc = bxr * cyr - byr * cxr
                s_ca = cxr * ayr - cyr * axr
                pos = s_ab > eps_area and s_bc > eps_area and s_ca > eps_area
                neg = s_ab < -eps_area and s_bc < -eps_area and s_ca < -eps_area
                strict = pos or neg
                if strict:
                    e1x = B[tcand, 0] - A[tcand, 0]; e1y = B[tcand, 1] - A[tcand, 1]; e1z = B[tcand, 2] - A[tcand, 2]
                    e2x = C[tcand, 0] - A[tcand, 0]; e2y = C[tcand, 1] - A[tcand, 1]; e2z = C[tcand, 2] - A[tcand, 2]
                    nxv = e1y * e2z - e1z * e2y
                    nyv = e1z * e2x - e1x * e2z
                    nzv = e1x * e2y - e1y * e2x
                    if nzv == 0:
                        nzv = 1.0
                    z_hit = A[tcand, 2] - (nxv * (px - A[tcand, 0]) + nyv * (py - A[tcand, 1])) / nzv
                    if z_hit > pz + eps_z:
                        n_cross += 1
                    elif fabs(z_hit - pz) <= eps_z:
                        flag |= _F_SURF
                    continue
                onproj = ((s_ab >= -eps_area and s_bc >= -eps_area and s_ca >= -eps_area)
                          or (s_ab <= eps_area and s_bc <= eps_area and s_ca <= eps_area))
                if onproj:
                    if _pt_tri_dist2(px, py, pz,
                                     A[tcand, 0], A[tcand, 1], A[tcand, 2],
                                     B[tcand, 0], B[tcand, 1], B[tcand, 2],
                                     C[tcand, 0], C[tcand, 1], C[tcand, 2]) <= eps_surf * eps_surf:
                        flag |= _F_SURF
                    if ZMAX[tcand] >= pz - eps_z:
                        flag |= _F_DEGEN
            cr[i] = n_cross
            fl[i] = flag
    return crossings, flags


def label_components(mask, int connectivity):
    """Flood-fill labeling over a binary volume; labels in scan-order discovery."""
    if connectivity not in (6, 18, 26):
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    m = np.ascontiguousarray(mask) != 0
    cdef cnp.uint8_t[:, :, ::1] fg = m.astype(np.uint8)
    cdef Py_ssize_t nx = fg.shape[0], ny = fg.shape[1], nz = fg.shape[2]

    labels_np = np.zeros((nx, ny, nz), dtype=np.int32)
    cdef cnp.int32_t[:, :, ::1] lab = labels_np

    # neighbor offset table for the requested connectivity
    offs = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx == dy == dz == 0:
                    continue
                order = abs(dx) + abs(dy) + abs(dz)
                if connectivity == 6 and order > 1:
                    continue
                if connectivity == 18 and order > 2:
                    continue
                offs.append((dx, dy, dz))
    offs_np = np.array(offs, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] OFF = offs_np
    cdef Py_ssize_t n_off = OFF.shape[0]

    stack_np = np.empty(nx * ny * nz, dtype=np.int64)
    cdef cnp.int64_t[::1] stack = stack_np
    cdef Py_ssize_t top, ix, iy, iz, jx, jy, jz, kx, ky, kz, o, cur
    cdef cnp.int32_t next_label = 0

    with nogil:
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    if fg[ix, iy, iz] == 0 or lab[ix, iy, iz] != 0:
                        continue
                    next_label += 1
                    top = 0
                    stack[top] = (ix * ny + iy) * nz + iz
                    top += 1
                    lab[ix, iy, iz] = next_label
                    while top > 0:
                        top -= 1
                        cur = stack[top]
                        jx = cur // (ny * nz)
                        jy = (cur // nz) % ny
                        jz = cur % nz
                        for o in range(n_off):
                            kx = jx + OFF[o, 0]
                            if kx < 0 or kx >= nx:
                                continue
                            ky = jy + OFF[o, 1]
                            if ky < 0 or ky >= ny:
                                continue
                            kz = jz + OFF[o, 2]
                            if kz < 0 or kz >= nz:
                                continue
                            if fg[kx, ky, kz] != 0 and lab[kx, ky, kz] == 0:
                                lab[kx, ky, kz] = next_label
                                stack[top] = (kx * ny + ky) * nz + kz
                                top += 1
    return labels_np
