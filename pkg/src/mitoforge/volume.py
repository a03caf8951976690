"""Segmented 3D volumes: raw I/O, downsampling, and instance decomposition.

Volumes are isotropic rasters indexed ``data[ix, iy, iz]`` with the physical
position of a voxel center at ``origin + index * voxel_size`` (nanometers).
On disk a volume is a little-endian unsigned raw array in C order plus a
``<file>.hdr`` sidecar with the geometry.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, InputError

_ELEMENT_DTYPES = {8: np.uint8, 16: np.uint16, 32: np.uint32}

DEFAULT_CONNECTIVITY = 26
# ~one (72 nm)^3 cube at 24 nm voxels; speck filter used by the CLI pipeline
DEFAULT_MIN_VOXELS = 27


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    voxel_size_nm: float
    element_bits: int
    origin_nm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self) -> "VolumeHeader":
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise InputError(f"dims must be three counts >= 1, got {self.dims}")
        if not self.voxel_size_nm > 0:
            raise InputError(f"voxel_size_nm must be > 0, got {self.voxel_size_nm}")
        if self.element_bits not in _ELEMENT_DTYPES:
            raise InputError(f"element_bits must be 8, 16 or 32, got {self.element_bits}")
        return self

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return int(nx) * int(ny) * int(nz)

    @property
    def n_bytes(self) -> int:
        return self.n_voxels * (self.element_bits // 8)


@dataclass
class VoxelVolume:
    """In-memory volume; ``data`` has shape ``dims`` and an unsigned dtype."""

    data: np.ndarray
    voxel_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ConfigError(f"volume data must be 3D non-empty, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.unsignedinteger):
            raise ConfigError(f"volume dtype must be unsigned integer, got {self.data.dtype}")
        if not self.voxel_size > 0:
            raise ConfigError(f"voxel_size must be > 0, got {self.voxel_size}")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def is_binary(self) -> bool:
        return bool(self.data.max(initial=0) <= 1)

    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass(frozen=True)
class InstanceIndex:
    """Catalog entry for one connected component."""

    instance_id: int
    voxel_count: int
    bounding_box: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]


def _header_path(path: str) -> str:
    return str(path) + ".hdr"


def write_header(header: VolumeHeader, path: str) -> None:
    header.validate()
    lines = [
        "dims {} {} {}".format(*(int(d) for d in header.dims)),
        f"voxel_size_nm {float(header.voxel_size_nm)!r}",
        f"element_bits {int(header.element_bits)}",
        "origin_nm {!r} {!r} {!r}".format(*(float(v) for v in header.origin_nm)),
    ]
    with open(_header_path(path), "w") as f:
        f.write("\n".join(lines) + "\n")


def read_header(path: str) -> VolumeHeader:
    """Parse and validate the ``<path>.hdr`` sidecar (geometry check only)."""
    hpath = _header_path(path)
    if not os.path.exists(hpath):
        raise InputError(f"missing header sidecar: {hpath}")
    fields: dict[str, list[str]] = {}
    with open(hpath) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, *vals = line.split()
            if key in fields:
                raise InputError(f"duplicate header key {key!r} in {hpath}")
            fields[key] = vals
    required = {"dims", "voxel_size_nm", "element_bits", "origin_nm"}
    unknown = set(fields) - required
    if unknown:
        raise InputError(f"unknown header keys {sorted(unknown)} in {hpath}")
    missing = required - set(fields)
    if missing:
        raise InputError(f"missing header keys {sorted(missing)} in {hpath}")
    try:
        dims = tuple(int(v) for v in fields["dims"])
        header = VolumeHeader(
            dims=dims,  # type: ignore[arg-type]
            voxel_size_nm=float(fields["voxel_size_nm"][0]),
            element_bits=int(fields["element_bits"][0]),
            origin_nm=tuple(float(v) for v in fields["origin_nm"]),  # type: ignore[arg-type]
        )
    except (ValueError, IndexError) as exc:
        raise InputError(f"malformed header {hpath}: {exc}") from exc
    return header.validate()


def load_volume(path: str, header: VolumeHeader | None = None) -> VoxelVolume:
    """Load a raw volume; the file size must match the declared geometry."""
    if header is None:
        header = read_header(path)
    else:
        header.validate()
    if not os.path.exists(path):
        raise InputError(f"volume file not found: {path}")
    actual = os.path.getsize(path)
    if actual != header.n_bytes:
        raise InputError(
            f"size mismatch for {path}: header implies {header.n_bytes} bytes, file has {actual}"
        )
    dtype = np.dtype(_ELEMENT_DTYPES[header.element_bits]).newbyteorder("<")
    data = np.fromfile(path, dtype=dtype).astype(_ELEMENT_DTYPES[header.element_bits])
    data = data.reshape(header.dims)
    return VoxelVolume(data=data, voxel_size=header.voxel_size_nm, origin=np.array(header.origin_nm))


def save_volume(vol: VoxelVolume, path: str) -> None:
    bits = vol.data.dtype.itemsize * 8
    header = VolumeHeader(
        dims=vol.dims,
        voxel_size_nm=float(vol.voxel_size),
        element_bits=bits,
        origin_nm=tuple(float(v) for v in vol.origin),
    )
    write_header(header, path)
    vol.data.astype(vol.data.dtype.newbyteorder("<")).tofile(path)


def downsample(vol: VoxelVolume, factor: int) -> VoxelVolume:
    """Reduce a binary mask by an integer factor with per-block majority vote.

    Output dims are ``ceil(dims / factor)``; edge blocks vote over the voxels
    they actually cover. Ties count as foreground so thin structures survive.
    """
    if int(factor) != factor or factor < 1:
        raise ConfigError(f"downsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if not vol.is_binary():
        raise ConfigError("downsample requires a binary mask; extract or binarize first")
    if factor == 1:
        return VoxelVolume(vol.data.copy(), vol.voxel_size, vol.origin.copy())

    nx, ny, nz = vol.dims
    ox, oy, oz = (-(-d // factor) for d in (nx, ny, nz))
    pad = [(0, ox * factor - nx), (0, oy * factor - ny), (0, oz * factor - nz)]
    data = np.pad(vol.data.astype(np.int64), pad)
    cover = np.pad(np.ones(vol.dims, dtype=np.int64), pad)
    blocks = data.reshape(ox, factor, oy, factor, oz, factor)
    covered = cover.reshape(ox, factor, oy, factor, oz, factor)
    fg = blocks.sum(axis=(1, 3, 5))
    n_cov = covered.sum(axis=(1, 3, 5))
    out = (2 * fg >= n_cov).astype(np.uint8)
    return VoxelVolume(out, vol.voxel_size * factor, vol.origin.copy())


def connected_components(
    vol: VoxelVolume,
    connectivity: int = DEFAULT_CONNECTIVITY,
    min_voxels: int = 1,
) -> tuple[VoxelVolume, list[InstanceIndex]]:
    """Decompose a binary mask into instances.

    Labels are 1..K, contiguous, sorted by descending voxel count (ties by
    scan-order discovery). With ``min_voxels > 1`` smaller components are
    zeroed out of the labeling, which intentionally breaks the "labels cover
    all foreground" partition property; the default keeps everything.
    """
    if not vol.is_binary():
        raise ConfigError("connected_components requires a binary mask")
    if connectivity not in (6, 18, 26):
        raise ConfigError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    raw = kernels.label_components(vol.data, connectivity)
    n_raw = int(raw.max(initial=0))
    if n_raw == 0:
        return VoxelVolume(np.zeros(vol.dims, np.uint32), vol.voxel_size, vol.origin.copy()), []

    counts = np.bincount(raw.ravel(), minlength=n_raw + 1)[1:]
    # scan-order discovery rank equals the raw label, so sorting by
    # (-count, raw_label) is deterministic across backends
    order = np.lexsort((np.arange(1, n_raw + 1), -counts))
    remap = np.zeros(n_raw + 1, dtype=np.uint32)
    new_id = 0
    kept: list[int] = []
    for raw_label in order + 1:
        if counts[raw_label - 1] < min_voxels:
            continue
        new_id += 1
        remap[raw_label] = new_id
        kept.append(raw_label)
    labeled = remap[raw]

    coords = np.argwhere(raw > 0)
    labs = raw[raw > 0].astype(np.int64)
    mins = np.full((n_raw + 1, 3), np.iinfo(np.int64).max, dtype=np.int64)
    maxs = np.full((n_raw + 1, 3), -1, dtype=np.int64)
    np.minimum.at(mins, labs, coords)
    np.maximum.at(maxs, labs, coords)

    instances = []
    for new_id, raw_label in enumerate(kept, start=1):
        bbox = tuple(
            (int(mins[raw_label, ax]), int(maxs[raw_label, ax])) for ax in range(3)
        )
        instances.append(
            InstanceIndex(
                instance_id=new_id,
                voxel_count=int(counts[raw_label - 1]),
                bounding_box=bbox,  # type: ignore[arg-type]
            )
        )
    return VoxelVolume(labeled, vol.voxel_size, vol.origin.copy()), instances


def extract_instance(labeled: VoxelVolume, instance_id: int, pad: int = 1) -> VoxelVolume:
    """Crop one instance to its padded bounding box as a binary mask.

    The origin is shifted so the physical position of every voxel is
    preserved; padding beyond the source volume is background.
    """
    if pad < 0:
        raise ConfigError(f"pad must be >= 0, got {pad}")
    where = labeled.data == instance_id
    if instance_id <= 0 or not where.any():
        raise InputError(f"instance id {instance_id} not present in labeling")
    idx = np.nonzero(where)
    lo = np.array([int(a.min()) for a in idx]) - pad
    hi = np.array([int(a.max()) for a in idx]) + pad
    out_dims = hi - lo + 1
    out = np.zeros(out_dims, dtype=np.uint8)
    src_lo = np.maximum(lo, 0)
    src_hi = np.minimum(hi, np.array(labeled.dims) - 1)
    dst_lo = src_lo - lo
    dst_hi = dst_lo + (src_hi - src_lo)
    out[
        dst_lo[0] : dst_hi[0] + 1,
        dst_lo[1] : dst_hi[1] + 1,
        dst_lo[2] : dst_hi[2] + 1,
    ] = where[
        src_lo[0] : src_hi[0] + 1,
        src_lo[1] : src_hi[1] + 1,
        src_lo[2] : src_hi[2] + 1,
    ]
    origin = labeled.origin + lo * labeled.voxel_size
    return VoxelVolume(out, labeled.voxel_size, origin)
