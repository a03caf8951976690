"""Occupancy training pairs and dense occupancy grids for normalized meshes.

Sample sets live in the origin-centered unit cube. Points are stored as
float32 (matching the on-disk record format) so serialization round-trips
bit-exactly; labels use the surface-counts-as-inside convention.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .mesh import TriangleMesh, _mesh_from_grid, _require_watertight, points_in_mesh

DEFAULT_SAMPLE_COUNT = 10_000


@dataclass
class OccupancySampleSet:
    points: np.ndarray  # (n, 3) float32 in [-0.5, 0.5]^3
    labels: np.ndarray  # (n,) uint8 in {0, 1}
    source: str = ""
    seed: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ConfigError("points and labels length mismatch")
        if self.labels.size and self.labels.max() > 1:
            raise ConfigError("labels must be binary")
        if self.points.size and (np.abs(self.points) > 0.5 + 1e-6).any():
            raise ConfigError("points must lie in the centered unit cube")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class OccupancyGrid:
    """Hard 0/1 occupancy evaluated at cell centers of the unit cube."""

    values: np.ndarray  # (r, r, r) float64 in [0, 1]
    origin: np.ndarray  # coordinate of the first cell center
    spacing: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ConfigError("occupancy grid needs resolution >= 2 per axis")
        if not np.isfinite(self.values).all():
            raise ConfigError("occupancy grid values must be finite")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.values.shape

    def to_physical(self, indices: np.ndarray) -> np.ndarray:
        return np.asarray(indices, dtype=np.float64) * self.spacing + self.origin


def unit_cube_grid_coords(resolution: int) -> np.ndarray:
    """Cell-center coordinates of a resolution^3 partition of [-0.5, 0.5]^3."""
    axis = -0.5 + (np.arange(resolution) + 0.5) / resolution
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def sample_occupancy(mesh: TriangleMesh, n: int = DEFAULT_SAMPLE_COUNT,
                     seed: int = 0, source: str = "") -> OccupancySampleSet:
    """Draw uniform query points in the unit cube and label them by containment."""
    _require_watertight(mesh, "sample_occupancy")
    if n < 1:
        raise ConfigError(f"sample count must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.5, 0.5, size=(n, 3)).astype(np.float32)
    labels = points_in_mesh(mesh, pts.astype(np.float64)).astype(np.uint8)
    return OccupancySampleSet(pts, labels, source=source, seed=int(seed))


def occupancy_grid(mesh: TriangleMesh, resolution: int, seed=None) -> OccupancyGrid:
    """Dense hard-occupancy grid over the unit cube (``seed`` unused)."""
    del seed
    if resolution < 2:
        raise ConfigError(f"resolution must be >= 2, got {resolution}")
    coords = unit_cube_grid_coords(resolution)
    occ = points_in_mesh(mesh, coords).astype(np.float64)
    spacing = 1.0 / resolution
    origin = np.full(3, -0.5 + 0.5 * spacing)
    return OccupancyGrid(occ.reshape(resolution, resolution, resolution), origin, spacing)


def grid_to_mesh(grid: OccupancyGrid, iso: float = 0.5) -> TriangleMesh:
    """Extract the iso surface of an occupancy grid (zero-padded so it closes)."""
    if not 0.0 < iso < 1.0:
        raise ConfigError(f"iso must lie in (0, 1), got {iso}")
    values = np.pad(grid.values, 1)
    origin = grid.origin - grid.spacing
    return _mesh_from_grid(values, iso, origin, grid.spacing)


_SAMPLES_MAGIC = b"MFOC"


def write_samples(sample_set: OccupancySampleSet, path: str) -> None:
    """Fixed binary layout; byte-stable for a fixed set (golden-file friendly)."""
    prov = sample_set.source.encode("utf-8")
    if len(prov) > 0xFFFF:
        raise ConfigError("provenance string too long")
    header = _SAMPLES_MAGIC + struct.pack(
        "<HQQH", 1, len(sample_set), int(sample_set.seed), len(prov)
    ) + prov
    records = np.empty(len(sample_set), dtype=[("p", "<f4", 3), ("l", "u1")])
    records["p"] = sample_set.points
    records["l"] = sample_set.labels
    body = records.tobytes()
    crc = zlib.crc32(header + body)
    with open(path, "wb") as f:
        f.write(header + body + struct.pack("<I", crc))


def read_samples(path: str) -> OccupancySampleSet:
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise InputError(f"cannot read samples {path}: {exc}") from exc
    fixed = len(_SAMPLES_MAGIC) + struct.calcsize("<HQQH")
    if len(blob) < fixed + 4 or blob[:4] != _SAMPLES_MAGIC:
        raise InputError(f"not an occupancy sample file: {path}")
    version, n, seed, prov_len = struct.unpack("<HQQH", blob[4:fixed])
    if version != 1:
        raise InputError(f"unsupported sample file version {version}")
    expected = fixed + prov_len + n * 13 + 4
    if len(blob) != expected:
        raise InputError(f"truncated or oversized sample file: {path}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if crc != zlib.crc32(blob[:-4]):
        raise InputError(f"sample file checksum mismatch: {path}")
    prov = blob[fixed : fixed + prov_len].decode("utf-8")
    records = np.frombuffer(blob[fixed + prov_len : -4],
                            dtype=[("p", "<f4", 3), ("l", "u1")])
    return OccupancySampleSet(records["p"].copy(), records["l"].copy(),
                              source=prov, seed=int(seed))


def write_samples_csv(sample_set: OccupancySampleSet, path: str) -> None:
    with open(path, "w") as f:
        f.write("x,y,z,label\n")
        for (x, y, z), lab in zip(sample_set.points, sample_set.labels):
            f.write(f"{x:.9g},{y:.9g},{z:.9g},{int(lab)}\n")
