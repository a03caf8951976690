"""Evaluation measures: volumetric IoU, Chamfer-L1, and 2D mask scores."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, NumericError
from .mesh import TriangleMesh, _require_watertight, _triangle_areas, points_in_mesh

DEFAULT_IOU_SAMPLES = 100_000
DEFAULT_CHAMFER_POINTS = 10_000
BBOX_INFLATION = 1.05


@dataclass(frozen=True)
class MeshComparison:
    iou: float
    chamfer_l1: float
    n_samples: int
    seed: int


@dataclass(frozen=True)
class MaskScores:
    dice: float
    iou: float
    f1: float
    tp: int
    fp: int
    fn: int


def _joint_bbox(mesh_a: TriangleMesh, mesh_b: TriangleMesh):
    lo = np.minimum(mesh_a.bounds()[0], mesh_b.bounds()[0])
    hi = np.maximum(mesh_a.bounds()[1], mesh_b.bounds()[1])
    center = (lo + hi) / 2.0
    half = (hi - lo) / 2.0 * BBOX_INFLATION
    return center - half, center + half


def volumetric_iou(mesh_a: TriangleMesh, mesh_b: TriangleMesh,
                   n_samples: int = DEFAULT_IOU_SAMPLES, seed: int = 0) -> float:
    """Monte-Carlo IoU over the 5%-inflated joint bounding box.

    Containment uses the inside-or-on-surface convention shared with the
    occupancy sampler.
    """
    _require_watertight(mesh_a, "volumetric_iou")
    _require_watertight(mesh_b, "volumetric_iou")
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    lo, hi = _joint_bbox(mesh_a, mesh_b)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n_samples, 3))
    in_a = points_in_mesh(mesh_a, pts)
    in_b = points_in_mesh(mesh_b, pts)
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        raise NumericError("IoU undefined: no sample fell in either mesh")
    return float(np.count_nonzero(in_a & in_b) / union)


def _mesh_digest(mesh: TriangleMesh) -> int:
    crc = zlib.crc32(np.ascontiguousarray(mesh.vertices).tobytes())
    return zlib.crc32(np.ascontiguousarray(mesh.triangles).tobytes(), crc)


def surface_points(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly-n uniform surface points (triangle by area, then barycentric)."""
    areas = _triangle_areas(mesh)
    total = float(areas.sum())
    if total <= 0:
        raise ConfigError("cannot sample a zero-area mesh")
    cum = np.cumsum(areas)
    tri = np.minimum(np.searchsorted(cum, rng.random(n) * total), len(areas) - 1)
    a = mesh.vertices[mesh.triangles[tri, 0]]
    b = mesh.vertices[mesh.triangles[tri, 1]]
    c = mesh.vertices[mesh.triangles[tri, 2]]
    r1 = np.sqrt(rng.random(n))[:, None]
    r2 = rng.random(n)[:, None]
    return (1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c


def chamfer_l1(mesh_a: TriangleMesh, mesh_b: TriangleMesh,
               n_points: int = DEFAULT_CHAMFER_POINTS, seed: int = 0) -> float:
    """Symmetric mean nearest-neighbor surface distance (both directions, half each).

    Each surface's sample set is seeded by (seed, content digest), so equal
    meshes share samples (self-distance is exactly 0) and the result does not
    depend on argument order. Nearest neighbors are exact via a k-d tree.
    """
    if n_points < 1:
        raise ConfigError("n_points must be >= 1")
    pts_a = surface_points(mesh_a, n_points,
                           np.random.default_rng([seed, _mesh_digest(mesh_a)]))
    pts_b = surface_points(mesh_b, n_points,
                           np.random.default_rng([seed, _mesh_digest(mesh_b)]))
    d_ab = cKDTree(pts_b).query(pts_a)[0]
    d_ba = cKDTree(pts_a).query(pts_b)[0]
    return float(0.5 * d_ab.mean() + 0.5 * d_ba.mean())


def compare_meshes(mesh_a: TriangleMesh, mesh_b: TriangleMesh,
                   n_samples: int = DEFAULT_IOU_SAMPLES,
                   n_points: int = DEFAULT_CHAMFER_POINTS,
                   seed: int = 0) -> MeshComparison:
    return MeshComparison(
        iou=volumetric_iou(mesh_a, mesh_b, n_samples, seed),
        chamfer_l1=chamfer_l1(mesh_a, mesh_b, n_points, seed),
        n_samples=n_samples,
        seed=seed,
    )


def mask_scores(pred: np.ndarray, gt: np.ndarray,
                foreground_only: bool = True) -> MaskScores:
    """Dice/IoU/F1 from pixel counts.

    ``foreground_only`` mirrors the evaluation note that pixels background in
    both masks are never compared; tp/fp/fn are unaffected either way since
    true negatives enter none of the three scores. Both-empty masks score 1.
    """
    p = np.asarray(pred) != 0
    g = np.asarray(gt) != 0
    if p.shape != g.shape:
        raise ConfigError(f"mask shape mismatch: {p.shape} vs {g.shape}")
    del foreground_only
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    if tp + fp + fn == 0:
        return MaskScores(1.0, 1.0, 1.0, 0, 0, 0)
    dice = 2.0 * tp / (2.0 * tp + fp + fn)
    iou = tp / (tp + fp + fn)
    return MaskScores(dice, iou, dice, tp, fp, fn)
