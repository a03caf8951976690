"""Single executable exposing the pipeline.

Exit codes: 0 ok, 2 config error, 3 input error, 4 numeric failure.
Structured key=value log records go to stderr; results go to stdout.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .errors import ConfigError, InputError, MitoforgeError, NumericError
from . import datasetgen, implicit_fit, metrics, microscope, occupancy, volume
from . import mesh as meshmod

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4


def log_event(**kv) -> None:
    parts = []
    for key, val in kv.items():
        text = str(val)
        if " " in text:
            text = f'"{text}"'
        parts.append(f"{key}={text}")
    print(" ".join(parts), file=sys.stderr)


def _parse_kv_file(path: str, schema: dict):
    """key-value config file; unknown keys are hard errors."""
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    values = {}
    for line in open(path):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition(" ")
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} in {path}")
        if key in values:
            raise ConfigError(f"duplicate config key {key!r} in {path}")
        values[key] = val.strip()
    out = {}
    for key, (conv, default) in schema.items():
        if key in values:
            try:
                out[key] = conv(values[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r} in {path}: {exc}") from exc
        elif default is REQUIRED:
            raise ConfigError(f"missing required config key {key!r} in {path}")
        else:
            out[key] = default
    return out


REQUIRED = object()


def _load_shapes(shapes_dir: str) -> list:
    if not os.path.isdir(shapes_dir):
        raise InputError(f"shapes_dir is not a directory: {shapes_dir}")
    names = sorted(
        n for n in os.listdir(shapes_dir) if n.lower().endswith((".off", ".obj"))
    )
    if not names:
        raise InputError(f"no .off/.obj meshes found in {shapes_dir}")
    shapes = []
    for name in names:
        m = meshmod.load_mesh(os.path.join(shapes_dir, name))
        m.provenance = name
        shapes.append(m)
    return shapes


def _out_path(out_dir: str, name: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_presets(args) -> int:
    if args.action == "list":
        for name in sorted(microscope.PRESETS):
            cfg = microscope.PRESETS[name]
            r = microscope.lateral_resolution(cfg)
            print(f"{name} kind={cfg.kind} wavelength_nm={cfg.emission_wavelength:g} "
                  f"na={cfg.numerical_aperture:g} magnification={cfg.magnification:g} "
                  f"pixel_nm={cfg.pixel_size:g} dof_nm={cfg.dof:g} resolution_nm={r:.1f}")
    else:
        cfg = microscope.get_preset(args.name)
        print(microscope.format_config(cfg), end="")
    return EXIT_OK


def cmd_volume_cc(args) -> int:
    vol = volume.load_volume(args.input)
    labeled, instances = volume.connected_components(
        vol, connectivity=args.connectivity, min_voxels=args.min_voxels
    )
    log_event(event="cc", input=args.input, connectivity=args.connectivity,
              min_voxels=args.min_voxels, components=len(instances))
    print(f"components {len(instances)}")
    for inst in instances:
        bb = inst.bounding_box
        print(f"instance {inst.instance_id} voxels {inst.voxel_count} "
              f"bbox {bb[0][0]}:{bb[0][1]} {bb[1][0]}:{bb[1][1]} {bb[2][0]}:{bb[2][1]}")
    if args.out:
        labeled32 = volume.VoxelVolume(
            labeled.data.astype(np.uint32), labeled.voxel_size, labeled.origin
        )
        volume.save_volume(labeled32, _out_path(args.out, "labeled.raw"))
    return EXIT_OK


def cmd_volume_downsample(args) -> int:
    vol = volume.load_volume(args.input)
    out = volume.downsample(vol, args.factor)
    volume.save_volume(out, _out_path(args.out, "downsampled.raw"))
    log_event(event="downsample", factor=args.factor, dims=out.dims,
              voxel_size_nm=out.voxel_size)
    return EXIT_OK


def cmd_volume_extract(args) -> int:
    vol = volume.load_volume(args.input)
    inst = volume.extract_instance(vol, args.id, pad=args.pad)
    volume.save_volume(inst, _out_path(args.out, f"instance_{args.id:04d}.raw"))
    log_event(event="extract", id=args.id, dims=inst.dims)
    return EXIT_OK


def cmd_mesh_from_volume(args) -> int:
    vol = volume.load_volume(args.input)
    m = meshmod.marching_cubes(vol, iso=args.iso)
    m = meshmod.make_watertight(m)
    meshmod.save_mesh(m, args.out)
    log_event(event="mesh", vertices=m.n_vertices, triangles=m.n_triangles,
              watertight=meshmod.is_watertight(m))
    return EXIT_OK


def cmd_mesh_normalize(args) -> int:
    m = meshmod.load_mesh(args.input)
    norm, record = meshmod.normalize_unit_cube(m)
    meshmod.save_mesh(norm, _out_path(args.out, "normalized.off"))
    with open(_out_path(args.out, "normalization.txt"), "w") as f:
        f.write(f"scale {float(record.scale)!r}\n")
        f.write("translation {!r} {!r} {!r}\n".format(*(float(v) for v in record.translation)))
    log_event(event="normalize", scale=record.scale)
    return EXIT_OK


def cmd_sample_occupancy(args) -> int:
    m = meshmod.load_mesh(args.mesh)
    samples = occupancy.sample_occupancy(m, n=args.n, seed=args.seed,
                                         source=os.path.basename(args.mesh))
    occupancy.write_samples(samples, args.out)
    log_event(event="sample_occupancy", n=args.n, seed=args.seed,
              positive_fraction=float(samples.labels.mean()))
    return EXIT_OK


def cmd_sample_emitters(args) -> int:
    m = meshmod.load_mesh(args.mesh)
    emitters = meshmod.sample_surface(m, density=args.density, seed=args.seed)
    meshmod.save_emitters(emitters, args.out)
    log_event(event="sample_emitters", density=args.density, seed=args.seed,
              count=len(emitters))
    return EXIT_OK


def cmd_fit_train(args) -> int:
    samples = occupancy.read_samples(args.samples)
    config = implicit_fit.FitConfig(
        seed=args.seed, epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.learning_rate, hidden=args.hidden, n_blocks=args.blocks,
    )
    log_event(event="fit_start", samples=len(samples), **vars(config))

    def progress(epoch, mean_loss):
        if (epoch + 1) % max(1, args.epochs // 10) == 0:
            log_event(event="fit_epoch", epoch=epoch, loss=f"{mean_loss:.6f}")

    model = implicit_fit.fit(samples, config, callback=progress)
    implicit_fit.save_model(model, args.out)
    log_event(event="fit_done", out=args.out, n_params=model.n_params)
    return EXIT_OK


def cmd_fit_eval(args) -> int:
    model = implicit_fit.load_model(args.model)
    if args.samples:
        samples = occupancy.read_samples(args.samples)
        bce = implicit_fit.loss(model, samples.points.astype(np.float64),
                                samples.labels.astype(np.float64))
        probs = model.forward(samples.points.astype(np.float64))
        acc = float(((probs > 0.5).astype(int) == samples.labels).mean())
        print(f"loss {bce:.6f} accuracy {acc:.4f} n {len(samples)}")
    for triple in args.point or []:
        p = [float(v) for v in triple.split(",")]
        if len(p) != 3:
            raise ConfigError(f"--point expects x,y,z, got {triple!r}")
        print(f"point {triple} occupancy {model.forward([p])[0]:.6f}")
    return EXIT_OK


def cmd_fit_extract(args) -> int:
    model = implicit_fit.load_model(args.model)
    m = implicit_fit.extract_mesh(model, resolution=args.resolution,
                                  threshold=args.threshold)
    meshmod.save_mesh(m, args.out)
    log_event(event="extract", vertices=m.n_vertices, triangles=m.n_triangles)
    return EXIT_OK


def _load_emitters_arg(path: str) -> meshmod.EmitterSet:
    if path.lower().endswith((".off", ".obj")):
        raise ConfigError("render expects an emitter file; sample emitters first")
    return meshmod.load_emitters(path)


def cmd_render(args) -> int:
    cfg = microscope.get_preset(args.preset)
    emitters = _load_emitters_arg(args.emitters)
    fov = microscope.FieldOfView(args.width, args.height)
    if args.mode == "slice":
        stack = microscope.render_zstack(emitters, cfg, fov, n_list=(0,),
                                         photons_per_emitter=args.photons)
    else:
        stack = microscope.render_zstack(emitters, cfg, fov,
                                         photons_per_emitter=args.photons)
    if args.noise:
        if args.seed is None:
            raise ConfigError("--seed is required when adding noise")
        stack = microscope.add_noise_stack(stack, cfg, args.sbr, seed=args.seed)
    written = microscope.write_stack(stack, args.out, prefix=args.mode)
    log_event(event="render", mode=args.mode, preset=args.preset,
              slices=len(stack.slices), files=len(written))
    return EXIT_OK


def cmd_metrics_iou(args) -> int:
    a = meshmod.load_mesh(args.mesh_a)
    b = meshmod.load_mesh(args.mesh_b)
    value = metrics.volumetric_iou(a, b, n_samples=args.n, seed=args.seed)
    print(f"pair {os.path.basename(args.mesh_a)}:{os.path.basename(args.mesh_b)} "
          f"iou {value:.6f} n {args.n} seed {args.seed}")
    return EXIT_OK


def cmd_metrics_chamfer(args) -> int:
    a = meshmod.load_mesh(args.mesh_a)
    b = meshmod.load_mesh(args.mesh_b)
    value = metrics.chamfer_l1(a, b, n_points=args.n, seed=args.seed)
    print(f"pair {os.path.basename(args.mesh_a)}:{os.path.basename(args.mesh_b)} "
          f"chamfer_l1 {value:.6g} n {args.n} seed {args.seed}")
    return EXIT_OK


def cmd_metrics_masks(args) -> int:
    pred = microscope.read_pgm(args.pred)
    gt = microscope.read_pgm(args.gt)
    scores = metrics.mask_scores(pred, gt)
    print(f"dice {scores.dice:.6f} iou {scores.iou:.6f} f1 {scores.f1:.6f} "
          f"tp {scores.tp} fp {scores.fp} fn {scores.fn}")
    return EXIT_OK


_SEG_SCHEMA = {
    "shapes_dir": (str, REQUIRED),
    "count": (int, REQUIRED),
    "preset": (str, "Epi2"),
    "density": (float, 30.0),
    "photons": (float, 1000.0),
    "tile_px": (int, 128),
    "gt_dilation_nm": (float, None),
}

_STACK_SCHEMA = {
    "shapes_dir": (str, REQUIRED),
    "preset": (str, "Epi1"),
    "density": (float, 30.0),
    "photons": (float, 1000.0),
    "n_samples": (int, 10_000),
    "fov_px": (int, None),
}

_M2M_SCHEMA = {
    "shapes_dir": (str, REQUIRED),
    "from_preset": (str, "Epi1"),
    "to_preset": (str, "Con1"),
    "density": (float, 30.0),
    "photons": (float, 1000.0),
    "fov_px": (int, None),
}


def cmd_dataset(args) -> int:
    if args.dataset_kind == "verify":
        manifest = datasetgen.Manifest.read(args.dir)
        manifest.verify(args.dir)
        print(f"manifest ok: {len(manifest.files)} files, {len(manifest.items)} items")
        return EXIT_OK
    if args.dataset_kind == "split":
        manifest = datasetgen.Manifest.read(args.dir)
        fracs = tuple(float(v) for v in args.fractions.split(","))
        spec = datasetgen.SplitSpec(fractions=fracs, seed=args.seed)
        datasetgen.apply_split(manifest, spec)
        manifest.write(args.dir)
        counts = {}
        for name in manifest.splits.values():
            counts[name] = counts.get(name, 0) + 1
        print("split " + " ".join(f"{k}={v}" for k, v in sorted(counts.items())))
        return EXIT_OK

    schema = {"seg": _SEG_SCHEMA, "stack2shape": _STACK_SCHEMA, "m2m": _M2M_SCHEMA}[
        args.dataset_kind
    ]
    cfg = _parse_kv_file(args.config, schema)
    for key in ("preset", "from_preset", "to_preset"):
        if key in cfg:
            microscope.get_preset(cfg[key])
    log_event(event="dataset_config", kind=args.dataset_kind, seed=args.seed,
              **{k: v for k, v in cfg.items()})
    if args.dry_run:
        if not os.path.isdir(cfg["shapes_dir"]):
            raise InputError(f"shapes_dir is not a directory: {cfg['shapes_dir']}")
        print("dry-run ok")
        return EXIT_OK
    shapes = _load_shapes(cfg["shapes_dir"])
    os.makedirs(args.out, exist_ok=True)
    if args.dataset_kind == "seg":
        options = datasetgen.SegDatasetOptions(
            preset=cfg["preset"], density=cfg["density"], photons=cfg["photons"],
            tile_px=cfg["tile_px"], gt_dilation_nm=cfg["gt_dilation_nm"],
        )
        manifest = datasetgen.gen_segmentation_dataset(
            shapes, args.out, cfg["count"], args.seed, options=options, jobs=args.jobs
        )
    elif args.dataset_kind == "stack2shape":
        options = datasetgen.StackDatasetOptions(
            preset=cfg["preset"], density=cfg["density"], photons=cfg["photons"],
            n_samples=cfg["n_samples"], fov_px=cfg["fov_px"],
        )
        manifest = datasetgen.gen_stack2shape_dataset(shapes, args.out, args.seed,
                                                      options=options)
    else:
        options = datasetgen.M2MDatasetOptions(
            from_preset=cfg["from_preset"], to_preset=cfg["to_preset"],
            density=cfg["density"], photons=cfg["photons"], fov_px=cfg["fov_px"],
        )
        manifest = datasetgen.gen_m2m_dataset(shapes, args.out, args.seed,
                                              options=options)
    print(f"dataset {args.dataset_kind} items {len(manifest.items)} "
          f"files {len(manifest.files)} out {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mitoforge",
        description="Mitochondria shape extraction, occupancy fitting, and "
                    "fluorescence microscopy simulation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("presets", help="microscope presets")
    ps = p.add_subparsers(dest="action", required=True)
    ps.add_parser("list", help="list presets").set_defaults(func=cmd_presets)
    show = ps.add_parser("show", help="show one preset as config text")
    show.add_argument("name")
    show.set_defaults(func=cmd_presets)

    p = sub.add_parser("volume", help="volume operations")
    vs = p.add_subparsers(dest="action", required=True)
    cc = vs.add_parser("cc", help="connected components")
    cc.add_argument("input")
    cc.add_argument("--connectivity", type=int, default=volume.DEFAULT_CONNECTIVITY,
                    choices=(6, 18, 26))
    cc.add_argument("--min-voxels", type=int, default=volume.DEFAULT_MIN_VOXELS)
    cc.add_argument("--out", default=None)
    cc.set_defaults(func=cmd_volume_cc)
    ds = vs.add_parser("downsample", help="majority-vote downsample")
    ds.add_argument("input")
    ds.add_argument("--factor", type=int, required=True)
    ds.add_argument("--out", required=True)
    ds.set_defaults(func=cmd_volume_downsample)
    ex = vs.add_parser("extract", help="extract one instance as a padded mask")
    ex.add_argument("input")
    ex.add_argument("--id", type=int, required=True)
    ex.add_argument("--pad", type=int, default=1)
    ex.add_argument("--out", required=True)
    ex.set_defaults(func=cmd_volume_extract)

    p = sub.add_parser("mesh", help="mesh operations")
    ms = p.add_subparsers(dest="action", required=True)
    fv = ms.add_parser("from-volume", help="marching cubes + watertight repair")
    fv.add_argument("input")
    fv.add_argument("--iso", type=float, default=0.5)
    fv.add_argument("--out", required=True)
    fv.set_defaults(func=cmd_mesh_from_volume)
    nm = ms.add_parser("normalize", help="normalize into the unit cube")
    nm.add_argument("input")
    nm.add_argument("--out", required=True)
    nm.set_defaults(func=cmd_mesh_normalize)

    p = sub.add_parser("sample", help="sampling operations")
    ss = p.add_subparsers(dest="action", required=True)
    so = ss.add_parser("occupancy", help="occupancy training pairs")
    so.add_argument("mesh")
    so.add_argument("--n", type=int, default=occupancy.DEFAULT_SAMPLE_COUNT)
    so.add_argument("--seed", type=int, required=True)
    so.add_argument("--out", required=True)
    so.set_defaults(func=cmd_sample_occupancy)
    se = ss.add_parser("emitters", help="surface fluorophore positions")
    se.add_argument("mesh")
    se.add_argument("--density", type=float, default=30.0)
    se.add_argument("--seed", type=int, required=True)
    se.add_argument("--out", required=True)
    se.set_defaults(func=cmd_sample_emitters)

    p = sub.add_parser("fit", help="implicit occupancy model")
    fs = p.add_subparsers(dest="action", required=True)
    ft = fs.add_parser("train", help="fit the MLP to a sample set")
    ft.add_argument("samples")
    ft.add_argument("--seed", type=int, required=True)
    ft.add_argument("--epochs", type=int, default=2000)
    ft.add_argument("--batch-size", type=int, default=512)
    ft.add_argument("--learning-rate", type=float, default=1e-3)
    ft.add_argument("--hidden", type=int, default=64)
    ft.add_argument("--blocks", type=int, default=5)
    ft.add_argument("--out", required=True)
    ft.set_defaults(func=cmd_fit_train)
    fe = fs.add_parser("eval", help="evaluate a checkpoint")
    fe.add_argument("model")
    fe.add_argument("--samples", default=None)
    fe.add_argument("--point", action="append", metavar="X,Y,Z")
    fe.set_defaults(func=cmd_fit_eval)
    fx = fs.add_parser("extract", help="extract the learned surface")
    fx.add_argument("model")
    fx.add_argument("--resolution", type=int, default=128)
    fx.add_argument("--threshold", type=float, default=0.5)
    fx.add_argument("--out", required=True)
    fx.set_defaults(func=cmd_fit_extract)

    p = sub.add_parser("render", help="render emitter sets")
    p.add_argument("mode", choices=("slice", "zstack"))
    p.add_argument("emitters")
    p.add_argument("--preset", required=True)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--photons", type=float, default=1000.0)
    p.add_argument("--noise", action="store_true")
    p.add_argument("--sbr", default="sample")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", help="evaluation measures")
    mts = p.add_subparsers(dest="action", required=True)
    mi = mts.add_parser("iou", help="Monte-Carlo volumetric IoU")
    mi.add_argument("mesh_a")
    mi.add_argument("mesh_b")
    mi.add_argument("--n", type=int, default=metrics.DEFAULT_IOU_SAMPLES)
    mi.add_argument("--seed", type=int, required=True)
    mi.set_defaults(func=cmd_metrics_iou)
    mc = mts.add_parser("chamfer", help="Chamfer-L1 surface distance")
    mc.add_argument("mesh_a")
    mc.add_argument("mesh_b")
    mc.add_argument("--n", type=int, default=metrics.DEFAULT_CHAMFER_POINTS)
    mc.add_argument("--seed", type=int, required=True)
    mc.set_defaults(func=cmd_metrics_chamfer)
    mm = mts.add_parser("masks", help="2D mask scores")
    mm.add_argument("pred")
    mm.add_argument("gt")
    mm.set_defaults(func=cmd_metrics_masks)

    p = sub.add_parser("dataset", help="dataset generation")
    dsub = p.add_subparsers(dest="dataset_kind", required=True)
    for kind in ("seg", "stack2shape", "m2m"):
        dp = dsub.add_parser(kind, help=f"generate a {kind} dataset")
        dp.add_argument("--config", required=True)
        dp.add_argument("--seed", type=int, required=True)
        dp.add_argument("--out", required=True)
        dp.add_argument("--jobs", type=int, default=1)
        dp.add_argument("--dry-run", action="store_true")
        dp.set_defaults(func=cmd_dataset)
    dv = dsub.add_parser("verify", help="validate a dataset manifest")
    dv.add_argument("dir")
    dv.set_defaults(func=cmd_dataset)
    dsp = dsub.add_parser("split", help="assign shape-level splits in a manifest")
    dsp.add_argument("dir")
    dsp.add_argument("--fractions", default="0.7,0.1,0.2")
    dsp.add_argument("--seed", type=int, required=True)
    dsp.set_defaults(func=cmd_dataset)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    resolved = {k: v for k, v in vars(args).items() if k != "func" and v is not None}
    log_event(event="run", **resolved)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error code={EXIT_CONFIG} type=config msg=\"{exc}\"", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"error code={EXIT_INPUT} type=input msg=\"{exc}\"", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, MitoforgeError) as exc:
        print(f"error code={EXIT_NUMERIC} type=numeric msg=\"{exc}\"", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error code={EXIT_INPUT} type=io msg=\"{exc}\"", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
