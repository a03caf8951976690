"""End-to-end dataset production with reproducible per-item seeding.

Every item's random stream derives from (master seed, item indices) through
``numpy.random.SeedSequence`` spawn keys, so regeneration is byte-identical
regardless of worker count or execution order. The manifest lists every
written file with its SHA-256.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .mesh import (
    EmitterSet,
    TriangleMesh,
    NormalizationRecord,
    denormalize,
    normalize_unit_cube,
    rotate,
    sample_surface,
)
from .microscope import (
    FieldOfView,
    ImageStack,
    MicroscopeConfig,
    add_noise,
    add_noise_stack,
    get_preset,
    ground_truth_mask,
    psf_sigma,
    render_slice,
    render_zstack,
    write_pgm,
    write_stack,
)
from .implicit_fit import MlpOccupancy, extract_mesh
from .occupancy import sample_occupancy, write_samples

# axis-aligned and oblique viewing angles (alpha, beta, gamma)
DEFAULT_PERSPECTIVES: tuple[tuple[float, float, float], ...] = (
    (0.0, 0.0, 0.0),
    (np.pi / 2, 0.0, 0.0),
    (0.0, np.pi / 2, 0.0),
    (0.0, 0.0, np.pi / 2),
    (np.pi / 4, np.pi / 4, 0.0),
    (np.pi / 4, 0.0, np.pi / 4),
)

MANIFEST_NAME = "manifest.txt"


def derive_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Generator for one work item; a pure function of (master seed, key)."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=key))


def derive_seed(master_seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(master_seed, spawn_key=key).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0

    def validate(self) -> "SplitSpec":
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ConfigError("split fractions must be three positive values")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(self.fractions)}")
        return self


SPLIT_NAMES = ("train", "val", "test")


def split_shapes(shape_ids: list, spec: SplitSpec) -> dict:
    """Partition shapes (not images) so every view of a shape shares a split.

    Counts follow the largest-remainder rule, staying within one item of
    fraction * N.
    """
    spec.validate()
    n = len(shape_ids)
    if n < len(SPLIT_NAMES):
        raise ConfigError(f"need at least {len(SPLIT_NAMES)} shapes to split, got {n}")
    raw = [f * n for f in spec.fractions]
    counts = [int(np.floor(r)) for r in raw]
    remainders = [r - c for r, c in zip(raw, counts)]
    for _ in range(n - sum(counts)):
        k = int(np.argmax(remainders))
        counts[k] += 1
        remainders[k] = -1.0
    # n >= number of splits, so every split can and should get at least one
    for k, c in enumerate(counts):
        if c == 0:
            counts[int(np.argmax(counts))] -= 1
            counts[k] = 1
    perm = np.random.default_rng(spec.seed).permutation(n)
    assignment = {}
    pos = 0
    for name, cnt in zip(SPLIT_NAMES, counts):
        for idx in perm[pos : pos + cnt]:
            assignment[shape_ids[int(idx)]] = name
        pos += cnt
    return assignment


# ---------------------------------------------------------------------------
# manifest


@dataclass
class Manifest:
    kind: str
    master_seed: int
    params: dict = field(default_factory=dict)
    items: list = field(default_factory=list)  # list of dicts
    files: list = field(default_factory=list)  # (relpath, sha256)
    splits: dict = field(default_factory=dict)

    def add_file(self, base_dir: str, relpath: str) -> None:
        digest = hashlib.sha256(
            open(os.path.join(base_dir, relpath), "rb").read()
        ).hexdigest()
        self.files.append((relpath.replace(os.sep, "/"), digest))

    def write(self, base_dir: str) -> str:
        lines = [f"mitoforge_manifest 1", f"kind {self.kind}",
                 f"master_seed {self.master_seed}"]
        for key in sorted(self.params):
            lines.append(f"param {key} {self.params[key]}")
        for item in self.items:
            parts = " ".join(f"{k}={item[k]}" for k in sorted(item))
            lines.append(f"item {parts}")
        for shape_id in sorted(self.splits):
            lines.append(f"split {shape_id} {self.splits[shape_id]}")
        for relpath, digest in sorted(self.files):
            lines.append(f"file {relpath} {digest}")
        path = os.path.join(base_dir, MANIFEST_NAME)
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, base_dir: str) -> "Manifest":
        path = os.path.join(base_dir, MANIFEST_NAME)
        try:
            lines = [ln.rstrip("\n") for ln in open(path) if ln.strip()]
        except OSError as exc:
            raise InputError(f"cannot read manifest {path}: {exc}") from exc
        if not lines or not lines[0].startswith("mitoforge_manifest"):
            raise InputError(f"not a mitoforge manifest: {path}")
        man = cls(kind="", master_seed=0)
        for ln in lines[1:]:
            tag, _, rest = ln.partition(" ")
            if tag == "kind":
                man.kind = rest
            elif tag == "master_seed":
                man.master_seed = int(rest)
            elif tag == "param":
                key, _, val = rest.partition(" ")
                man.params[key] = val
            elif tag == "item":
                item = {}
                for kv in rest.split(" "):
                    k, _, v = kv.partition("=")
                    item[k] = v
                man.items.append(item)
            elif tag == "split":
                sid, _, name = rest.partition(" ")
                man.splits[sid] = name
            elif tag == "file":
                relpath, _, digest = rest.rpartition(" ")
                man.files.append((relpath, digest))
            else:
                raise InputError(f"unknown manifest line tag {tag!r}")
        return man

    def verify(self, base_dir: str) -> None:
        """Checksums must match and no unlisted files may exist."""
        listed = set()
        for relpath, digest in self.files:
            fpath = os.path.join(base_dir, relpath)
            if not os.path.exists(fpath):
                raise InputError(f"manifest lists missing file {relpath}")
            actual = hashlib.sha256(open(fpath, "rb").read()).hexdigest()
            if actual != digest:
                raise InputError(f"checksum mismatch for {relpath}")
            listed.add(os.path.normpath(relpath))
        for root, _dirs, names in os.walk(base_dir):
            for name in names:
                rel = os.path.normpath(
                    os.path.relpath(os.path.join(root, name), base_dir)
                )
                if rel == MANIFEST_NAME:
                    continue
                if rel not in listed:
                    raise InputError(f"orphan file not in manifest: {rel}")


def apply_split(manifest: Manifest, spec: SplitSpec) -> Manifest:
    shape_ids = sorted({str(item["shape"]) for item in manifest.items if "shape" in item})
    if not shape_ids:
        shape_ids = sorted({
            sid
            for item in manifest.items
            for sid in str(item.get("shapes", "")).split(",")
            if sid
        })
    manifest.splits = split_shapes(shape_ids, spec)
    manifest.params["split_fractions"] = ",".join(str(f) for f in spec.fractions)
    manifest.params["split_seed"] = str(spec.seed)
    return manifest


# ---------------------------------------------------------------------------
# 2D segmentation dataset


@dataclass(frozen=True)
class SegDatasetOptions:
    preset: str = "Epi2"
    density: float = 30.0
    photons: float = 1000.0
    tile_px: int = 128
    tiles_per_image: int = 4  # montaged 2x2
    shapes_per_tile: int = 2
    gt_dilation_nm: float | None = None
    max_place_attempts: int = 100


_SEG_STATE: dict = {}


def _seg_init(shapes, options, config, master_seed, out_dir):
    _SEG_STATE.update(shapes=shapes, options=options, config=config,
                      master_seed=master_seed, out_dir=out_dir)


def _place_shape(rng, positions, config, half_tile_nm, max_attempts):
    """Center the cloud, then rejection-sample a lateral offset so the in-DOF
    projection fits the tile. Returns placed positions or None."""
    centered = positions - positions.mean(axis=0)
    in_dof = np.abs(centered[:, 2]) <= config.dof / 2.0
    if not in_dof.any():
        return None, None
    proj = centered[in_dof][:, :2]
    for _ in range(max_attempts):
        offset = rng.uniform(-half_tile_nm, half_tile_nm, size=2)
        shifted = proj + offset
        if (np.abs(shifted) <= half_tile_nm).all():
            placed = centered.copy()
            placed[:, :2] += offset
            return placed, offset
    return None, None


def _seg_render_item(i: int):
    shapes = _SEG_STATE["shapes"]
    opt: SegDatasetOptions = _SEG_STATE["options"]
    config: MicroscopeConfig = _SEG_STATE["config"]
    master_seed = _SEG_STATE["master_seed"]
    out_dir = _SEG_STATE["out_dir"]

    fov = FieldOfView(opt.tile_px, opt.tile_px)
    half_tile_nm = opt.tile_px * config.pixel_size / 2.0
    tiles, masks, tile_meta = [], [], []
    for t in range(opt.tiles_per_image):
        rng = derive_rng(master_seed, i, t)
        chosen = rng.integers(0, len(shapes), size=opt.shapes_per_tile)
        placed_all, used, skipped = [], [], []
        for k, s_idx in enumerate(chosen):
            angles = rng.uniform(0.0, 2.0 * np.pi, size=3)
            emit_seed = int(rng.integers(2**63))
            emitters = sample_surface(shapes[int(s_idx)], opt.density, emit_seed)
            if len(emitters) == 0:
                skipped.append(int(s_idx))
                continue
            pos = rotate(emitters.positions, *angles)
            placed, _offset = _place_shape(rng, pos, config, half_tile_nm,
                                           opt.max_place_attempts)
            if placed is None:
                skipped.append(int(s_idx))
                continue
            placed_all.append(placed)
            used.append(int(s_idx))
        noise_seed = int(rng.integers(2**63))
        if placed_all:
            emitters_all = EmitterSet(np.concatenate(placed_all), opt.density)
            img = render_slice(emitters_all, config, fov,
                               photons_per_emitter=opt.photons)
            noisy = add_noise(img, config, "sample", seed=noise_seed)
            mask = ground_truth_mask(emitters_all, config, fov,
                                     dilation_radius=opt.gt_dilation_nm)
        else:
            noisy = np.random.default_rng(noise_seed).poisson(
                config.background, size=(opt.tile_px, opt.tile_px)
            ).astype(np.int64)
            mask = np.zeros((opt.tile_px, opt.tile_px), dtype=np.uint8)
        tiles.append(noisy)
        masks.append(mask)
        tile_meta.append((used, skipped))

    top = np.concatenate(tiles[:2], axis=1)
    bottom = np.concatenate(tiles[2:], axis=1)
    image = np.concatenate([top, bottom], axis=0)
    mask = np.concatenate([
        np.concatenate(masks[:2], axis=1),
        np.concatenate(masks[2:], axis=1),
    ], axis=0)

    img_rel = f"images/seg_{i:05d}.pgm"
    mask_rel = f"masks/seg_{i:05d}.pgm"
    write_pgm(image, os.path.join(out_dir, img_rel))
    write_pgm(mask * 255, os.path.join(out_dir, mask_rel), maxval=255)
    used_ids = sorted({s for used, _ in tile_meta for s in used})
    skipped_ids = sorted({s for _, sk in tile_meta for s in sk})
    item = {
        "index": i,
        "shapes": ",".join(str(s) for s in used_ids),
        "skipped": ",".join(str(s) for s in skipped_ids),
        "image": img_rel,
        "mask": mask_rel,
        "seed": derive_seed(master_seed, i),
    }
    return item, [img_rel, mask_rel]


def gen_segmentation_dataset(shapes: list[TriangleMesh], out_dir: str, count: int,
                             master_seed: int,
                             options: SegDatasetOptions = SegDatasetOptions(),
                             jobs: int = 1) -> Manifest:
    """Image/mask pairs: four tiles of two placed mitochondria each, montaged.

    Each tile is rendered, noised, and paired with the in-DOF footprint mask;
    shapes whose in-DOF projection cannot be placed after the attempt budget
    are skipped and logged in the manifest.
    """
    if not shapes:
        raise ConfigError("shape corpus is empty")
    if count < 1:
        raise ConfigError("count must be >= 1")
    config = get_preset(options.preset)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)

    _seg_init(shapes, options, config, master_seed, out_dir)
    if jobs > 1:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_seg_init,
            initargs=(shapes, options, config, master_seed, out_dir),
        ) as pool:
            results = list(pool.map(_seg_render_item, range(count)))
    else:
        results = [_seg_render_item(i) for i in range(count)]

    manifest = Manifest(kind="seg", master_seed=master_seed)
    manifest.params.update({
        "preset": options.preset,
        "count": str(count),
        "density": repr(options.density),
        "photons": repr(options.photons),
        "tile_px": str(options.tile_px),
        "shapes_per_tile": str(options.shapes_per_tile),
        "n_shapes": str(len(shapes)),
    })
    for item, files in results:
        manifest.items.append(item)
        for rel in files:
            manifest.add_file(out_dir, rel)
    manifest.write(out_dir)
    return manifest


# ---------------------------------------------------------------------------
# stack-to-shape dataset


@dataclass(frozen=True)
class StackDatasetOptions:
    preset: str = "Epi1"
    density: float = 30.0
    photons: float = 1000.0
    n_samples: int = 10_000
    fov_px: int | None = None  # None: auto-size per stack
    perspectives: tuple[tuple[float, float, float], ...] = DEFAULT_PERSPECTIVES


def _auto_fov(positions: np.ndarray, config: MicroscopeConfig,
              fixed_px: int | None) -> FieldOfView:
    if fixed_px is not None:
        return FieldOfView(fixed_px, fixed_px)
    sigma_xy, _ = psf_sigma(config)
    margin = 3.0 * sigma_xy + 2.0 * config.pixel_size
    extent = np.abs(positions[:, :2]).max(initial=0.0) + margin
    px = max(8, int(np.ceil(2.0 * extent / config.pixel_size)))
    px += px % 2  # keep it even for tidy centering
    return FieldOfView(px, px)


def gen_stack2shape_dataset(shapes: list[TriangleMesh], out_dir: str,
                            master_seed: int,
                            options: StackDatasetOptions = StackDatasetOptions()) -> Manifest:
    """Per (shape, perspective): a noisy 3-slice stack plus the shape's
    occupancy samples and normalization record, cross-referenced in the manifest."""
    if not shapes:
        raise ConfigError("shape corpus is empty")
    if not options.perspectives:
        raise ConfigError("need at least one perspective")
    config = get_preset(options.preset)
    os.makedirs(os.path.join(out_dir, "occupancy"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "stacks"), exist_ok=True)

    manifest = Manifest(kind="stack2shape", master_seed=master_seed)
    manifest.params.update({
        "preset": options.preset,
        "density": repr(options.density),
        "photons": repr(options.photons),
        "n_samples": str(options.n_samples),
        "n_shapes": str(len(shapes)),
        "n_perspectives": str(len(options.perspectives)),
    })

    for s, shape in enumerate(shapes):
        norm_mesh, record = normalize_unit_cube(shape)
        occ_seed = derive_seed(master_seed, s, 0)
        samples = sample_occupancy(norm_mesh, options.n_samples, seed=occ_seed,
                                   source=f"shape_{s:04d}")
        occ_rel = f"occupancy/shape_{s:04d}.mfoc"
        write_samples(samples, os.path.join(out_dir, occ_rel))
        manifest.add_file(out_dir, occ_rel)
        manifest.items.append({
            "kind": "occupancy",
            "shape": s,
            "file": occ_rel,
            "seed": occ_seed,
            "scale": repr(record.scale),
            "translation": ",".join(repr(float(v)) for v in record.translation),
        })
        for p, angles in enumerate(options.perspectives):
            rng = derive_rng(master_seed, s, p + 1)
            emit_seed = int(rng.integers(2**63))
            emitters = sample_surface(shape, options.density, emit_seed)
            if len(emitters) == 0:
                manifest.items.append({"kind": "skip", "shape": s, "perspective": p,
                                       "reason": "no_emitters"})
                continue
            pos = rotate(emitters.positions, *angles)
            pos = pos - pos.mean(axis=0)
            fov = _auto_fov(pos, config, options.fov_px)
            stack = render_zstack(EmitterSet(pos, options.density), config, fov,
                                  photons_per_emitter=options.photons)
            noisy = add_noise_stack(stack, config, "sample",
                                    seed=int(rng.integers(2**63)))
            stack_dir = os.path.join(out_dir, "stacks")
            prefix = f"shape_{s:04d}_persp_{p}"
            written = write_stack(noisy, stack_dir, prefix=prefix)
            for name in written:
                manifest.add_file(out_dir, os.path.join("stacks", name))
            manifest.items.append({
                "kind": "stack",
                "shape": s,
                "perspective": p,
                "alpha": repr(angles[0]),
                "beta": repr(angles[1]),
                "gamma": repr(angles[2]),
                "prefix": f"stacks/{prefix}",
                "occupancy": occ_rel,
            })
    manifest.write(out_dir)
    return manifest


# ---------------------------------------------------------------------------
# microscope-to-microscope


@dataclass(frozen=True)
class M2MDatasetOptions:
    from_preset: str = "Epi1"
    to_preset: str = "Con1"
    density: float = 30.0
    photons: float = 1000.0
    fov_px: int | None = None
    perspectives: tuple[tuple[float, float, float], ...] = ((0.0, 0.0, 0.0),)


def gen_m2m_dataset(shapes: list[TriangleMesh], out_dir: str, master_seed: int,
                    options: M2MDatasetOptions = M2MDatasetOptions()) -> Manifest:
    """Paired renders of each shape under the source and target microscopes."""
    if not shapes:
        raise ConfigError("shape corpus is empty")
    from_cfg = get_preset(options.from_preset)
    to_cfg = get_preset(options.to_preset)
    manifest = Manifest(kind="m2m", master_seed=master_seed)
    manifest.params.update({
        "from_preset": options.from_preset,
        "to_preset": options.to_preset,
        "density": repr(options.density),
        "photons": repr(options.photons),
        "n_shapes": str(len(shapes)),
    })
    for s, shape in enumerate(shapes):
        norm_mesh, record = normalize_unit_cube(shape)
        for p, angles in enumerate(options.perspectives):
            pair_seed = derive_seed(master_seed, s, p)
            stack_from, stack_to = microscope_transform(
                norm_mesh, record, from_cfg, to_cfg, perspective=angles,
                seed=pair_seed, density=options.density, photons=options.photons,
                fov_px=options.fov_px,
            )
            pair_dir = os.path.join(out_dir, f"pair_{s:04d}_{p}")
            written_from = write_stack(stack_from, pair_dir, prefix="from")
            written_to = write_stack(stack_to, pair_dir, prefix="to")
            for name in written_from + written_to:
                manifest.add_file(out_dir, os.path.join(f"pair_{s:04d}_{p}", name))
            manifest.items.append({
                "kind": "pair",
                "shape": s,
                "perspective": p,
                "seed": pair_seed,
                "dir": f"pair_{s:04d}_{p}",
                "scale": repr(record.scale),
            })
    manifest.write(out_dir)
    return manifest


def microscope_transform(shape, record: NormalizationRecord,
                         from_cfg: MicroscopeConfig, to_cfg: MicroscopeConfig,
                         perspective=(0.0, 0.0, 0.0), seed: int = 0,
                         density: float = 30.0, photons: float = 1000.0,
                         n_list=(0,), fov_px: int | None = None,
                         extract_resolution: int = 128) -> tuple[ImageStack, ImageStack]:
    """Re-render one known shape under a second microscope.

    The shape (a normalized mesh, or a fitted occupancy model whose surface
    is extracted first) is rescaled to physical units; emitters are sampled
    once and rendered under both configurations on each one's pixel grid.
    """
    if isinstance(shape, MlpOccupancy):
        mesh_norm = extract_mesh(shape, resolution=extract_resolution)
    elif isinstance(shape, TriangleMesh):
        mesh_norm = shape
    else:
        raise ConfigError("shape must be a TriangleMesh or MlpOccupancy")
    mesh_phys = denormalize(mesh_norm, record)
    emitters = sample_surface(mesh_phys, density, seed)
    if len(emitters) == 0:
        raise ConfigError("no emitters sampled; raise the density")
    pos = rotate(emitters.positions, *perspective)
    pos = pos - pos.mean(axis=0)
    placed = EmitterSet(pos, density, seed)
    stacks = []
    for cfg in (from_cfg, to_cfg):
        fov = _auto_fov(pos, cfg, fov_px)
        stacks.append(render_zstack(placed, cfg, fov, n_list=n_list,
                                    photons_per_emitter=photons))
    return stacks[0], stacks[1]
