"""Triangle meshes: extraction from masks, repair, queries, and sampling.

Vertex coordinates are physical nanometers unless the mesh has been passed
through :func:`normalize_unit_cube`, after which they live in the centered
unit cube. Inside/outside queries treat the surface itself as inside.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, InputError, NumericError
from .volume import VoxelVolume

NM2_PER_UM2 = 1e6
NM3_PER_UM3 = 1e9

# deterministic lateral offsets for re-casting rays that graze an edge
_RECAST_DIRS = (
    (0.7548776662466927, 0.6558656868355265),
    (-0.3182989630769221, 0.9479884043132418),
    (0.9096028639431571, -0.4154215131796861),
    (-0.6429384536534155, -0.7659138289044353),
)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    provenance: str | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.isfinite(self.vertices).all():
            raise ConfigError("mesh vertices must be finite")
        t = self.triangles
        if t.size:
            if t.min() < 0 or t.max() >= len(self.vertices):
                raise ConfigError("triangle index out of range")
            if ((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])).any():
                raise ConfigError("triangle with repeated vertex")
        self._watertight: bool | None = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))


@dataclass(frozen=True)
class NormalizationRecord:
    """Isotropic transform: normalized = (physical - translation) * scale."""

    scale: float
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.translation


@dataclass
class EmitterSet:
    """Fluorophore binding sites sampled on a mesh surface."""

    positions: np.ndarray
    density: float
    seed: int | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.positions)


# ---------------------------------------------------------------------------
# watertightness


def _directed_edges(triangles: np.ndarray) -> np.ndarray:
    return np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]], axis=0
    )


def watertight_audit(mesh: TriangleMesh) -> dict:
    """Edge-incidence audit.

    Watertight means every undirected edge is shared by exactly two triangles
    traversing it in opposite directions.
    """
    if mesh.n_triangles == 0:
        return {"watertight": False, "boundary_edges": 0, "bad_edges": 0}
    nv = mesh.n_vertices
    de = _directed_edges(mesh.triangles)
    dkey = de[:, 0] * nv + de[:, 1]
    ukey = np.minimum(de[:, 0], de[:, 1]) * nv + np.maximum(de[:, 0], de[:, 1])
    _, ucounts = np.unique(ukey, return_counts=True)
    n_boundary = int((ucounts == 1).sum())
    n_over = int((ucounts > 2).sum())
    duplicate_directed = int(len(dkey) - len(np.unique(dkey)))
    ok = n_boundary == 0 and n_over == 0 and duplicate_directed == 0
    return {
        "watertight": ok,
        "boundary_edges": n_boundary,
        "overshared_edges": n_over,
        "same_direction_pairs": duplicate_directed,
    }


def is_watertight(mesh: TriangleMesh) -> bool:
    if mesh._watertight is None:
        mesh._watertight = watertight_audit(mesh)["watertight"]
    return mesh._watertight


def _require_watertight(mesh: TriangleMesh, op: str) -> None:
    if not is_watertight(mesh):
        raise ConfigError(f"{op} requires a watertight mesh")


# ---------------------------------------------------------------------------
# marching cubes


def _mesh_from_grid(values: np.ndarray, iso: float, origin: np.ndarray,
                    spacing: float, provenance: str | None = None) -> TriangleMesh:
    """Shared marching-cubes post-processing: dedup edge keys, interpolate."""
    tri_edges = kernels.mc_collect(values, iso)
    if tri_edges.shape[0] == 0:
        raise NumericError("empty level set: no surface crosses the iso value")
    ny, nz = values.shape[1], values.shape[2]

    uniq, inv = np.unique(tri_edges.ravel(), return_inverse=True)
    axis = uniq % 3
    rest = uniq // 3
    iz = rest % nz
    iy = (rest // nz) % ny
    ix = rest // (ny * nz)
    base = np.stack([ix, iy, iz], axis=1).astype(np.float64)

    v0 = values[ix, iy, iz]
    step = np.zeros_like(base)
    step[np.arange(len(uniq)), axis] = 1.0
    jx = ix + (axis == 0)
    jy = iy + (axis == 1)
    jz = iz + (axis == 2)
    v1 = values[jx, jy, jz]
    t = (iso - v0) / (v1 - v0)
    verts = (base + t[:, None] * step) * spacing + origin

    triangles = inv.reshape(-1, 3)
    mesh = TriangleMesh(verts, triangles, provenance=provenance)

    # the table yields a globally consistent orientation; flip once if inward
    if _signed_volume(mesh) < 0:
        mesh = TriangleMesh(verts, triangles[:, [0, 2, 1]], provenance=provenance)

    # ambiguous-face configurations of the classic table can leave flat
    # quad cracks; close them in-plane so binary masks always mesh watertight
    if not is_watertight(mesh):
        mesh = make_watertight(mesh)
    return mesh


def marching_cubes(mask: VoxelVolume, iso: float = 0.5) -> TriangleMesh:
    """Extract the iso surface of a binary mask in physical nanometers.

    The mask is zero-padded by one voxel so the surface closes at the crop
    boundary; voxel values sit at voxel centers and vertices are linearly
    interpolated between them.
    """
    if not mask.is_binary():
        raise ConfigError("marching_cubes expects a binary mask")
    if mask.foreground_count() == 0:
        raise InputError("marching_cubes: mask is empty")
    if not 0.0 < iso < 1.0:
        raise ConfigError(f"iso must lie in (0, 1), got {iso}")
    values = np.pad(mask.data.astype(np.float64), 1)
    origin = mask.origin - mask.voxel_size
    return _mesh_from_grid(values, iso, origin, mask.voxel_size)


# ---------------------------------------------------------------------------
# repair


def _boundary_loops(mesh: TriangleMesh) -> list[list[int]]:
    nv = mesh.n_vertices
    de = _directed_edges(mesh.triangles)
    dkey = de[:, 0] * nv + de[:, 1]
    if len(dkey) != len(np.unique(dkey)):
        raise NumericError("mesh is non-orientable or inconsistently oriented")
    ukey = np.minimum(de[:, 0], de[:, 1]) * nv + np.maximum(de[:, 0], de[:, 1])
    order = np.argsort(ukey, kind="stable")
    sk = ukey[order]
    uniq, starts, counts = np.unique(sk, return_index=True, return_counts=True)
    if (counts > 2).any():
        raise NumericError("mesh has non-manifold edges")
    boundary_rows = order[starts[counts == 1]]
    if boundary_rows.size == 0:
        return []

    nxt: dict[int, int] = {}
    for u, v in de[boundary_rows]:
        if int(u) in nxt:
            raise NumericError("self-intersecting boundary loop (vertex on multiple loops)")
        nxt[int(u)] = int(v)

    loops = []
    seen: set[int] = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        cur = nxt[start]
        while cur != start:
            if cur in seen or cur not in nxt:
                raise NumericError("open boundary chain; cannot close mesh")
            loop.append(cur)
            seen.add(cur)
            cur = nxt[cur]
        if len(loop) < 3:
            raise NumericError("degenerate boundary loop")
        loops.append(loop)
    return loops


def _triangulate_loop(points: np.ndarray, loop: list[int]) -> list[tuple[int, int, int]]:
    """Ear-clip one boundary loop; returns triangles closing the hole.

    The loop arrives in the direction induced by the existing triangles, so
    the filling triangles traverse it reversed to keep orientation coherent.
    """
    poly = loop[::-1]
    pts = points[np.asarray(poly)]

    # Newell normal of the (reversed) polygon
    nrm = np.zeros(3)
    for i in range(len(poly)):
        p, q = pts[i], pts[(i + 1) % len(poly)]
        nrm[0] += (p[1] - q[1]) * (p[2] + q[2])
        nrm[1] += (p[2] - q[2]) * (p[0] + q[0])
        nrm[2] += (p[0] - q[0]) * (p[1] + q[1])
    norm = np.linalg.norm(nrm)
    if norm == 0:
        raise NumericError("boundary loop has no well-defined plane")
    nrm /= norm
    u = np.cross(nrm, [1.0, 0.0, 0.0])
    if np.linalg.norm(u) < 1e-12:
        u = np.cross(nrm, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(nrm, u)
    p2 = np.stack([pts @ u, pts @ v], axis=1)

    area2 = 0.0
    for i in range(len(poly)):
        j = (i + 1) % len(poly)
        area2 += p2[i, 0] * p2[j, 1] - p2[j, 0] * p2[i, 1]
    if area2 < 0:  # make the chart right-handed w.r.t. the walk direction
        p2 = p2[:, ::-1]

    extent = p2.max(axis=0) - p2.min(axis=0)
    eps = 1e-12 * float(max(extent.max(), 1e-300)) ** 2

    active = list(range(len(poly)))
    out: list[tuple[int, int, int]] = []

    def cross2(o, a, b):
        return (p2[a, 0] - p2[o, 0]) * (p2[b, 1] - p2[o, 1]) - (
            p2[a, 1] - p2[o, 1]
        ) * (p2[b, 0] - p2[o, 0])

    while len(active) > 3:
        clipped = False
        for k in range(len(active)):
            ia = active[k - 1]
            ib = active[k]
            ic = active[(k + 1) % len(active)]
            if cross2(ia, ib, ic) <= eps:
                continue  # reflex or collinear corner
            ok = True
            for other in active:
                if other in (ia, ib, ic):
                    continue
                d1 = cross2(ia, ib, other)
                d2 = cross2(ib, ic, other)
                d3 = cross2(ic, ia, other)
                if d1 > -eps and d2 > -eps and d3 > -eps:
                    ok = False
                    break
            if ok:
                out.append((poly[ia], poly[ib], poly[ic]))
                active.pop(k)
                clipped = True
                break
        if not clipped:
            raise NumericError("cannot triangulate boundary loop (self-intersecting?)")
    out.append((poly[active[0]], poly[active[1]], poly[active[2]]))
    return out


def make_watertight(mesh: TriangleMesh) -> TriangleMesh:
    """Close every boundary loop by flat triangulation.

    Already-watertight meshes are returned unchanged. Non-orientable meshes
    and loops the ear clipper cannot handle are reported as errors.
    """
    if is_watertight(mesh):
        return mesh
    loops = _boundary_loops(mesh)
    new_tris = []
    for loop in loops:
        new_tris.extend(_triangulate_loop(mesh.vertices, loop))
    triangles = np.concatenate([mesh.triangles, np.asarray(new_tris, dtype=np.int64)])
    repaired = TriangleMesh(mesh.vertices.copy(), triangles, provenance=mesh.provenance)
    audit = watertight_audit(repaired)
    if not audit["watertight"]:
        raise NumericError(f"hole filling failed to close the mesh: {audit}")
    return repaired


# ---------------------------------------------------------------------------
# normalization


def normalize_unit_cube(mesh: TriangleMesh) -> tuple[TriangleMesh, NormalizationRecord]:
    """Scale isotropically into the origin-centered unit cube (longest side 1)."""
    lo, hi = mesh.bounds()
    extent = hi - lo
    largest = float(extent.max())
    if largest <= 0:
        raise ConfigError("cannot normalize a mesh with a zero-extent bounding box")
    center = (hi + lo) / 2.0
    record = NormalizationRecord(scale=1.0 / largest, translation=center)
    out = TriangleMesh(record.apply(mesh.vertices), mesh.triangles.copy(),
                       provenance=mesh.provenance)
    out._watertight = mesh._watertight
    return out, record


def denormalize(mesh: TriangleMesh, record: NormalizationRecord) -> TriangleMesh:
    out = TriangleMesh(record.invert(mesh.vertices), mesh.triangles.copy(),
                       provenance=mesh.provenance)
    out._watertight = mesh._watertight
    return out


# ---------------------------------------------------------------------------
# queries


def points_in_mesh(mesh: TriangleMesh, points: np.ndarray) -> np.ndarray:
    """Vectorized inside-or-on-surface test via +z ray parity.

    Rays grazing an edge or vertex are re-cast from deterministically
    perturbed positions, so results are reproducible.
    """
    _require_watertight(mesh, "points_in_mesh")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    diag = mesh.bbox_diagonal()
    if diag == 0:
        raise ConfigError("degenerate mesh")
    eps_z = 1e-9 * diag
    eps_area = 1e-12 * diag * diag
    eps_surf = 1e-9 * diag

    crossings, flags = kernels.ray_crossings(
        mesh.vertices, mesh.triangles, pts, eps_z, eps_area, eps_surf
    )
    inside = (crossings % 2 == 1)
    surface = (flags & kernels.FLAG_SURFACE) != 0
    inside |= surface
    todo = ((flags & kernels.FLAG_DEGENERATE) != 0) & ~surface
    eta = 3e-7 * diag
    for attempt, (dx, dy) in enumerate(_RECAST_DIRS, start=1):
        if not todo.any():
            break
        idx = np.flatnonzero(todo)
        shifted = pts[idx] + np.array([dx, dy, 0.0]) * (eta * attempt)
        c2, f2 = kernels.ray_crossings(
            mesh.vertices, mesh.triangles, shifted, eps_z, eps_area, eps_surf
        )
        resolved = (f2 & kernels.FLAG_DEGENERATE) == 0
        inside[idx[resolved]] = (c2[resolved] % 2 == 1)
        todo[idx[resolved]] = False
    return inside


def point_in_mesh(mesh: TriangleMesh, p) -> bool:
    """True iff ``p`` is strictly inside or on the surface."""
    return bool(points_in_mesh(mesh, np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


def _triangle_areas(mesh: TriangleMesh) -> np.ndarray:
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def _signed_volume(mesh: TriangleMesh) -> float:
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def surface_area(mesh: TriangleMesh, units: str = "um2") -> float:
    """Total triangle area; ``units`` is ``um2`` (vertices read as nm) or ``native``."""
    area = float(_triangle_areas(mesh).sum())
    if units == "um2":
        return area / NM2_PER_UM2
    if units == "native":
        return area
    raise ConfigError(f"unknown area units {units!r}")


def mesh_volume(mesh: TriangleMesh, units: str = "um3") -> float:
    """Signed enclosed volume (positive for outward orientation)."""
    _require_watertight(mesh, "mesh_volume")
    vol = _signed_volume(mesh)
    if units == "um3":
        return vol / NM3_PER_UM3
    if units == "native":
        return vol
    raise ConfigError(f"unknown volume units {units!r}")


# ---------------------------------------------------------------------------
# sampling and rotation


def sample_surface(mesh: TriangleMesh, density: float, seed: int) -> EmitterSet:
    """Poisson-distributed uniform surface sampling.

    ``density`` is molecules per square micron; the realized count is
    Poisson(area * density) and points are uniform over the surface
    (triangle by area, then uniform barycentric).
    """
    if not density > 0:
        raise ConfigError(f"density must be > 0, got {density}")
    areas = _triangle_areas(mesh)
    total = float(areas.sum())
    if total <= 0:
        raise ConfigError("cannot sample a mesh with zero surface area")
    rng = np.random.default_rng(seed)
    n = int(rng.poisson(surface_area(mesh, "um2") * density))
    if n == 0:
        return EmitterSet(np.zeros((0, 3)), density, seed)
    cum = np.cumsum(areas)
    tri = np.searchsorted(cum, rng.random(n) * total)
    tri = np.minimum(tri, len(areas) - 1)
    a = mesh.vertices[mesh.triangles[tri, 0]]
    b = mesh.vertices[mesh.triangles[tri, 1]]
    c = mesh.vertices[mesh.triangles[tri, 2]]
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    pts = (1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c
    return EmitterSet(pts, density, seed)


def rotation_matrix(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """Composition R_z(gamma) @ R_y(beta) @ R_x(alpha)."""
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotate(points: np.ndarray, alpha: float, beta: float, gamma: float,
           origin=None) -> np.ndarray:
    """Rotate points about ``origin`` (default: their centroid)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if origin is None:
        origin = pts.mean(axis=0) if len(pts) else np.zeros(3)
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    r = rotation_matrix(alpha, beta, gamma)
    return (pts - origin) @ r.T + origin


# ---------------------------------------------------------------------------
# I/O


def save_mesh(mesh: TriangleMesh, path: str) -> None:
    """Write OFF or ASCII OBJ depending on the file extension."""
    p = str(path)
    if p.lower().endswith(".off"):
        lines = ["OFF", f"{mesh.n_vertices} {mesh.n_triangles} 0"]
        lines += [f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}" for v in mesh.vertices]
        lines += [f"3 {t[0]} {t[1]} {t[2]}" for t in mesh.triangles]
    elif p.lower().endswith(".obj"):
        lines = [f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}" for v in mesh.vertices]
        lines += [f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}" for t in mesh.triangles]
    else:
        raise ConfigError(f"unsupported mesh format: {p} (use .off or .obj)")
    with open(p, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_mesh(path: str) -> TriangleMesh:
    p = str(path)
    try:
        with open(p) as f:
            raw = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    except OSError as exc:
        raise InputError(f"cannot read mesh {p}: {exc}") from exc
    try:
        if p.lower().endswith(".off"):
            if raw[0] != "OFF":
                raise InputError(f"not an OFF file: {p}")
            nv, nf, _ = (int(x) for x in raw[1].split())
            if len(raw) < 2 + nv + nf:
                raise InputError(f"truncated OFF file: {p}")
            verts = np.array([[float(x) for x in ln.split()[:3]] for ln in raw[2 : 2 + nv]])
            tris = []
            for ln in raw[2 + nv : 2 + nv + nf]:
                parts = [int(x) for x in ln.split()]
                if parts[0] != 3:
                    raise InputError("only triangle faces are supported")
                tris.append(parts[1:4])
        elif p.lower().endswith(".obj"):
            verts, tris = [], []
            for ln in raw:
                tag, *rest = ln.split()
                if tag == "v":
                    verts.append([float(x) for x in rest[:3]])
                elif tag == "f":
                    ids = [int(tok.split("/")[0]) - 1 for tok in rest]
                    if len(ids) != 3:
                        raise InputError("only triangle faces are supported")
                    tris.append(ids)
        else:
            raise ConfigError(f"unsupported mesh format: {p}")
    except (ValueError, IndexError) as exc:
        raise InputError(f"malformed mesh file {p}: {exc}") from exc
    return TriangleMesh(np.asarray(verts, dtype=np.float64),
                        np.asarray(tris, dtype=np.int64))


_EMITTER_MAGIC = b"MFEM"


def save_emitters(emitters: EmitterSet, path: str) -> None:
    """CSV for ``.csv`` paths, the binary triplet format otherwise."""
    p = str(path)
    if p.lower().endswith(".csv"):
        with open(p, "w") as f:
            f.write("x_nm,y_nm,z_nm\n")
            for x, y, z in emitters.positions:
                f.write(f"{x:.17g},{y:.17g},{z:.17g}\n")
        return
    seed = -1 if emitters.seed is None else int(emitters.seed)
    header = _EMITTER_MAGIC + struct.pack(
        "<HQdq", 1, len(emitters.positions), float(emitters.density), seed
    )
    body = emitters.positions.astype("<f8").tobytes()
    crc = zlib.crc32(header + body)
    with open(p, "wb") as f:
        f.write(header + body + struct.pack("<I", crc))


def load_emitters(path: str) -> EmitterSet:
    p = str(path)
    if p.lower().endswith(".csv"):
        try:
            with open(p) as f:
                lines = [ln.strip() for ln in f if ln.strip()]
        except OSError as exc:
            raise InputError(f"cannot read emitters {p}: {exc}") from exc
        if not lines or lines[0] != "x_nm,y_nm,z_nm":
            raise InputError(f"emitter CSV missing header: {p}")
        pts = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        return EmitterSet(pts.reshape(-1, 3), density=0.0, seed=None)
    try:
        blob = open(p, "rb").read()
    except OSError as exc:
        raise InputError(f"cannot read emitters {p}: {exc}") from exc
    head_size = len(_EMITTER_MAGIC) + struct.calcsize("<HQdq")
    if len(blob) < head_size + 4 or blob[:4] != _EMITTER_MAGIC:
        raise InputError(f"not an emitter file: {p}")
    version, n, density, seed = struct.unpack("<HQdq", blob[4:head_size])
    if version != 1:
        raise InputError(f"unsupported emitter file version {version}")
    expected = head_size + n * 24 + 4
    if len(blob) != expected:
        raise InputError(f"truncated emitter file {p}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if crc != zlib.crc32(blob[:-4]):
        raise InputError(f"emitter file checksum mismatch: {p}")
    pts = np.frombuffer(blob[head_size:-4], dtype="<f8").reshape(n, 3).astype(np.float64)
    return EmitterSet(pts, density=density, seed=None if seed < 0 else int(seed))
