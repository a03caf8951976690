"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension (``mitoforge._kernels_cy``) is unavailable.
Both backends implement the same algorithms with the same tolerance logic so
their outputs are interchangeable; see ``mitoforge.kernels`` for selection.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ._mc_tables import EDGE_AXIS, EDGE_BASE, TRI_TABLE, VERT_OFFSETS

BACKEND_NAME = "python"

# flag bits returned by ray_crossings
FLAG_SURFACE = 1
FLAG_DEGENERATE = 2


def mc_collect(values: np.ndarray, iso: float) -> np.ndarray:
    """Run the 256-case table over a scalar grid.

    Returns an (n_triangles, 3) int64 array of global lattice-edge keys,
    ordered by cube scan order then table order. Edge key encoding:
    ``((ix * ny + iy) * nz + iz) * 3 + axis`` for the lattice point at the
    low end of the edge.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    nx, ny, nz = values.shape
    if nx < 2 or ny < 2 or nz < 2:
        return np.zeros((0, 3), dtype=np.int64)

    inside = values > iso
    # cube case index from the 8 corner bits
    idx = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint16)
    for bit, (ox, oy, oz) in enumerate(VERT_OFFSETS.tolist()):
        corner = inside[ox : nx - 1 + ox, oy : ny - 1 + oy, oz : nz - 1 + oz]
        idx |= corner.astype(np.uint16) << bit

    flat = idx.ravel()
    nontrivial = np.flatnonzero((flat != 0) & (flat != 255))
    if nontrivial.size == 0:
        return np.zeros((0, 3), dtype=np.int64)

    cases = flat[nontrivial]
    tri_rows = TRI_TABLE[cases][:, :15].reshape(-1, 5, 3).astype(np.int64)
    valid = tri_rows[:, :, 0] >= 0  # (ncubes, 5) slot mask
    cube_of_tri = np.repeat(nontrivial, valid.sum(axis=1))
    local_edges = tri_rows[valid]  # (ntri, 3) local edge ids 0..11

    # cube base lattice coordinates
    cyz = (ny - 1) * (nz - 1)
    bx = cube_of_tri // cyz
    rem = cube_of_tri - bx * cyz
    by = rem // (nz - 1)
    bz = rem - by * (nz - 1)

    ex = bx[:, None] + EDGE_BASE[local_edges, 0]
    ey = by[:, None] + EDGE_BASE[local_edges, 1]
    ez = bz[:, None] + EDGE_BASE[local_edges, 2]
    axis = EDGE_AXIS[local_edges].astype(np.int64)
    return ((ex * ny + ey) * nz + ez) * 3 + axis


def _bin_triangles(txy_min, txy_max, lo, inv_cell, gx, gy):
    """Bucket triangles into a uniform 2D grid keyed by xy bounding box."""
    ix0 = np.clip(((txy_min[:, 0] - lo[0]) * inv_cell[0]).astype(np.int64), 0, gx - 1)
    ix1 = np.clip(((txy_max[:, 0] - lo[0]) * inv_cell[0]).astype(np.int64), 0, gx - 1)
    iy0 = np.clip(((txy_min[:, 1] - lo[1]) * inv_cell[1]).astype(np.int64), 0, gy - 1)
    iy1 = np.clip(((txy_max[:, 1] - lo[1]) * inv_cell[1]).astype(np.int64), 0, gy - 1)
    cells = [[] for _ in range(gx * gy)]
    for t in range(txy_min.shape[0]):
        for cx in range(ix0[t], ix1[t] + 1):
            base = cx * gy
            for cy in range(iy0[t], iy1[t] + 1):
                cells[base + cy].append(t)
    return [np.asarray(c, dtype=np.int64) for c in cells]


def _point_triangle_dist2(p, a, b, c):
    """Squared distance from points to triangles, pairwise. Shapes (n,3)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    closest = np.empty_like(p)
    done = np.zeros(p.shape[0], dtype=bool)

    reg = (d1 <= 0) & (d2 <= 0)
    closest[reg] = a[reg]
    done |= reg
    reg = (~done) & (d3 >= 0) & (d4 <= d3)
    closest[reg] = b[reg]
    done |= reg
    reg = (~done) & (d6 >= 0) & (d5 <= d6)
    closest[reg] = c[reg]
    done |= reg

    vc = d1 * d4 - d3 * d2
    reg = (~done) & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    denom = np.where(d1 - d3 == 0, 1.0, d1 - d3)
    v = (d1 / denom)[:, None]
    closest[reg] = (a + v * ab)[reg]
    done |= reg

    vb = d5 * d2 - d1 * d6
    reg = (~done) & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    denom = np.where(d2 - d6 == 0, 1.0, d2 - d6)
    w = (d2 / denom)[:, None]
    closest[reg] = (a + w * ac)[reg]
    done |= reg

    va = d3 * d6 - d5 * d4
    reg = (~done) & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    denom = (d4 - d3) + (d5 - d6)
    denom = np.where(denom == 0, 1.0, denom)
    w = ((d4 - d3) / denom)[:, None]
    closest[reg] = (b + w * (c - b))[reg]
    done |= reg

    if not done.all():
        rest = ~done
        denom = va + vb + vc
        denom = np.where(denom == 0, 1.0, denom)
        v = (vb / denom)[:, None]
        w = (vc / denom)[:, None]
        closest[rest] = (a + v * ab + w * ac)[rest]

    d = p - closest
    return np.einsum("ij,ij->i", d, d)


def ray_crossings(
    vertices: np.ndarray,
    triangles: np.ndarray,
    points: np.ndarray,
    eps_z: float,
    eps_area: float,
    eps_surf: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Count +z ray/triangle crossings above each query point.

    Returns (crossings, flags) where flags carry FLAG_SURFACE for points
    within ``eps_surf`` of the surface and FLAG_DEGENERATE for rays that
    graze a triangle edge or vertex (caller re-casts those).
    """
    V = np.asarray(vertices, dtype=np.float64)
    T = np.asarray(triangles, dtype=np.int64)
    P = np.asarray(points, dtype=np.float64)
    n_pts = P.shape[0]
    crossings = np.zeros(n_pts, dtype=np.int64)
    flags = np.zeros(n_pts, dtype=np.uint8)
    if T.shape[0] == 0 or n_pts == 0:
        return crossings, flags

    ta = V[T[:, 0]]
    tb = V[T[:, 1]]
    tc = V[T[:, 2]]
    txy = np.stack([ta[:, :2], tb[:, :2], tc[:, :2]], axis=1)
    txy_min = txy.min(axis=1)
    txy_max = txy.max(axis=1)
    tz_max = np.maximum(np.maximum(ta[:, 2], tb[:, 2]), tc[:, 2])

    lo = txy_min.min(axis=0)
    hi = txy_max.max(axis=0)
    span = np.maximum(hi - lo, 1e-300)
    g = max(1, min(256, int(np.sqrt(T.shape[0] / 4.0)) + 1))
    gx = gy = g
    inv_cell = np.array([gx, gy]) / span
    cells = _bin_triangles(txy_min, txy_max, lo, inv_cell, gx, gy)

    pcx = np.clip(((P[:, 0] - lo[0]) * inv_cell[0]).astype(np.int64), 0, gx - 1)
    pcy = np.clip(((P[:, 1] - lo[1]) * inv_cell[1]).astype(np.int64), 0, gy - 1)
    pcell = pcx * gy + pcy
    order = np.argsort(pcell, kind="stable")
    sorted_cells = pcell[order]
    starts = np.searchsorted(sorted_cells, np.arange(gx * gy))
    ends = np.searchsorted(sorted_cells, np.arange(gx * gy), side="right")

    for cell in range(gx * gy):
        s, e = starts[cell], ends[cell]
        if s == e:
            continue
        cand = cells[cell]
        if cand.size == 0:
            continue
        pidx = order[s:e]
        # chunk to bound the broadcast size
        chunk = max(1, int(2_000_000 / max(1, cand.size)))
        for c0 in range(0, pidx.size, chunk):
            pi = pidx[c0 : c0 + chunk]
            _cell_pass(
                P[pi], pi, ta[cand], tb[cand], tc[cand], tz_max[cand],
                txy_min[cand], txy_max[cand],
                eps_z, eps_area, eps_surf, crossings, flags,
            )
    return crossings, flags


def _cell_pass(pts, pidx, a, b, c, zmax, bmin, bmax, eps_z, eps_area, eps_surf,
               crossings, flags):
    px = pts[:, 0][:, None]
    py = pts[:, 1][:, None]
    pz = pts[:, 2][:, None]

    in_box = (
        (px >= bmin[None, :, 0] - eps_z) & (px <= bmax[None, :, 0] + eps_z)
        & (py >= bmin[None, :, 1] - eps_z) & (py <= bmax[None, :, 1] + eps_z)
    )

    axr = a[None, :, 0] - px
    ayr = a[None, :, 1] - py
    bxr = b[None, :, 0] - px
    byr = b[None, :, 1] - py
    cxr = c[None, :, 0] - px
    cyr = c[None, :, 1] - py

    s_ab = axr * byr - ayr * bxr
    s_bc = bxr * cyr - byr * cxr
    s_ca = cxr * ayr - cyr * axr

    pos = (s_ab > eps_area) & (s_bc > eps_area) & (s_ca > eps_area)
    neg = (s_ab < -eps_area) & (s_bc < -eps_area) & (s_ca < -eps_area)
    strict = (pos | neg) & in_box
    onproj = (
        ((s_ab >= -eps_area) & (s_bc >= -eps_area) & (s_ca >= -eps_area))
        | ((s_ab <= eps_area) & (s_bc <= eps_area) & (s_ca <= eps_area))
    ) & in_box
    boundary = onproj & ~strict

    if strict.any():
        n = np.cross(b - a, c - a)  # (nt, 3)
        nz = n[None, :, 2]
        nz_safe = np.where(nz == 0, 1.0, nz)
        z_hit = a[None, :, 2] - (n[None, :, 0] * (px - a[None, :, 0])
                                 + n[None, :, 1] * (py - a[None, :, 1])) / nz_safe
        above = strict & (z_hit > pz + eps_z)
        onplane = strict & (np.abs(z_hit - pz) <= eps_z)
        np.add.at(crossings, pidx, above.sum(axis=1))
        hit_surf = onplane.any(axis=1)
        flags[pidx[hit_surf]] |= FLAG_SURFACE

    if boundary.any():
        # only grazes at or above the point matter for the crossing parity
        relevant = boundary & (zmax[None, :] >= pz - eps_z)
        bi, bj = np.nonzero(boundary)
        if bi.size:
            d2 = _point_triangle_dist2(pts[bi], a[bj], b[bj], c[bj])
            on_surf = d2 <= eps_surf * eps_surf
            surf_pts = pidx[bi[on_surf]]
            flags[surf_pts] |= FLAG_SURFACE
        ri = np.nonzero(relevant.any(axis=1))[0]
        if ri.size:
            flags[pidx[ri]] |= FLAG_DEGENERATE


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def label_components(mask: np.ndarray, connectivity: int) -> np.ndarray:
    """Label connected foreground voxels; labels follow scan-order discovery."""
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    labeled, _ = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    return labeled.astype(np.int32)
