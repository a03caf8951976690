"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion lines.
"""

import hashlib
import os
import time

import numpy as np
from scipy import ndimage

from geomfix import ball_mask, blob_mask, cube_mesh, icosphere
from oracles import flood_fill_labels, mask_scores_pixel_loop, sphere_volume

from mitoforge.cli import main as cli_main
from mitoforge.datasetgen import SegDatasetOptions, gen_segmentation_dataset
from mitoforge.implicit_fit import FitConfig, extract_mesh, fit, init_model, loss, loss_and_gradient
from mitoforge.mesh import (
    EmitterSet,
    marching_cubes,
    mesh_volume,
    points_in_mesh,
    save_mesh,
    watertight_audit,
)
from mitoforge.metrics import chamfer_l1, mask_scores, volumetric_iou
from mitoforge.microscope import (
    FieldOfView,
    add_noise,
    get_preset,
    read_pgm,
    lateral_resolution,
    render_slice,
    render_zstack,
)
from mitoforge.occupancy import sample_occupancy
from mitoforge.volume import VoxelVolume, connected_components


def report(criterion: int, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    print(f"criterion {criterion:02d} {status}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def measure_fwhm_nm(image: np.ndarray, pixel_size: float) -> float:
    r, c = np.unravel_index(image.argmax(), image.shape)
    row = image[r].astype(float)
    half = row[c] / 2.0

    def cross(direction):
        i = c
        while 0 <= i + direction < len(row) and row[i + direction] >= half:
            i += direction
        j = i + direction
        if j < 0 or j >= len(row):
            return float(i)
        # linear interpolation between the last-above and first-below samples
        t = (row[i] - half) / (row[i] - row[j])
        return i + direction * t

    return (cross(+1) - cross(-1)) * pixel_size


def test_criterion_1_optical_resolution():
    published = {"Con1": 152.0, "Epi1": 245.0, "Epi2": 217.0}
    computed = {name: lateral_resolution(get_preset(name)) for name in published}
    deltas = {name: abs(computed[name] - published[name]) for name in published}
    ok = all(d <= 3.0 for d in deltas.values())
    report(1, ok, "lateral resolutions "
           + ", ".join(f"{n}={computed[n]:.1f}nm (table {published[n]:.0f})" for n in sorted(published)))


def test_criterion_2_connected_components_oracle():
    t0 = time.time()
    rng = np.random.default_rng(20240811)
    checked = 0
    for trial in range(200):
        if trial % 2 == 0:
            p = rng.uniform(0.03, 0.45)
            data = (rng.random((64, 64, 64)) < p).astype(np.uint8)
        else:
            field = ndimage.gaussian_filter(rng.random((64, 64, 64)), rng.uniform(1.5, 4.0))
            data = (field > np.quantile(field, rng.uniform(0.6, 0.9))).astype(np.uint8)
        vol = VoxelVolume(data, 24.0)
        connectivity = 26 if trial % 2 == 0 else 6
        labeled, _ = connected_components(vol, connectivity=connectivity)
        oracle = flood_fill_labels(data, connectivity)
        np.testing.assert_array_equal(labeled.data.astype(np.int64), oracle)
        checked += 1
    elapsed = time.time() - t0
    report(2, checked == 200,
           f"200 randomized 64^3 volumes match the flood-fill oracle exactly "
           f"under 6- and 26-connectivity ({elapsed:.1f}s)")


def test_criterion_3_mesh_pipeline_fidelity():
    vol = ball_mask(radius_vox=10, voxel_size=24.0, margin=3)
    mesh = marching_cubes(vol)
    audit = watertight_audit(mesh)

    analytic = sphere_volume(10 * 24.0)
    measured = mesh_volume(mesh, "native")
    vol_err = abs(measured - analytic) / analytic

    rng = np.random.default_rng(42)
    lo = vol.origin - vol.voxel_size / 2
    hi = vol.origin + (np.array(vol.dims) - 0.5) * vol.voxel_size
    pts = rng.uniform(lo, hi, size=(10_000, 3))
    inside = points_in_mesh(mesh, pts)
    idx = np.rint((pts - vol.origin) / vol.voxel_size).astype(int)
    ok_idx = (idx >= 0).all(axis=1) & (idx < np.array(vol.dims)).all(axis=1)
    voxel = np.zeros(len(pts), dtype=bool)
    voxel[ok_idx] = vol.data[idx[ok_idx, 0], idx[ok_idx, 1], idx[ok_idx, 2]] > 0
    agreement = float((inside == voxel).mean())

    center = vol.origin + (np.array(vol.dims) - 1) / 2 * vol.voxel_size
    bad = inside != voxel
    radial = np.abs(np.linalg.norm(pts[bad] - center, axis=1) - 10 * vol.voxel_size)
    confined = bool((radial <= 1.5 * vol.voxel_size).all())

    ok = audit["watertight"] and vol_err < 0.05 and agreement >= 0.99 and confined
    report(3, ok, f"ball mesh watertight={audit['watertight']}, volume err {vol_err:.3%}, "
           f"voxel-lookup agreement {agreement:.2%} (disagreements within 1.5 voxels of surface)")


def test_criterion_4_occupancy_statistics():
    half_cube = cube_mesh(side=0.5)
    samples = sample_occupancy(half_cube, n=10_000, seed=2)
    frac = float(samples.labels.mean())
    sigma = np.sqrt(0.125 * 0.875 / 10_000)
    ok = abs(frac - 0.125) <= 3 * sigma
    report(4, ok, f"half-cube positive fraction {frac:.4f} vs 0.125 "
           f"(tolerance 3 sigma = {3 * sigma:.4f}, n = 10000)")


def test_criterion_5_implicit_fit_quality():
    t0 = time.time()
    sphere = icosphere(radius=0.35, subdivisions=3)
    samples = sample_occupancy(sphere, n=10_000, seed=11, source="sphere-accept")
    model = fit(samples, FitConfig(seed=7, epochs=600))
    reconstructed = extract_mesh(model, resolution=96)
    iou = volumetric_iou(sphere, reconstructed, n_samples=100_000, seed=3)
    elapsed = time.time() - t0

    # gradient vs central differences over 100 random parameters
    rng = np.random.default_rng(5)
    check_model = init_model(seed=5)
    check_model.params["W_out"][:] = rng.normal(0, 0.5, (64, 1))
    check_model.params["b_out"][:] = rng.normal(0, 0.5, 1)
    pts = rng.uniform(-0.5, 0.5, (128, 3))
    labels = (rng.random(128) < 0.35).astype(float)
    _, grads = loss_and_gradient(check_model, pts, labels)
    vec = check_model.to_vector()
    gvec = np.concatenate([grads[n].ravel() for n in check_model.param_names()])
    h = 1e-6
    max_rel = 0.0
    for i in rng.choice(len(vec), 100, replace=False):
        v0 = vec[i]
        vec[i] = v0 + h
        check_model.from_vector(vec)
        lp = loss(check_model, pts, labels)
        vec[i] = v0 - h
        check_model.from_vector(vec)
        lm = loss(check_model, pts, labels)
        vec[i] = v0
        check_model.from_vector(vec)
        fd = (lp - lm) / (2 * h)
        max_rel = max(max_rel, abs(fd - gvec[i]) / max(abs(gvec[i]), abs(fd), 1e-8))

    ok = iou >= 0.90 and elapsed < 300.0 and max_rel <= 1e-5
    report(5, ok, f"sphere fit IoU {iou:.3f} in {elapsed:.0f}s (< 300s); "
           f"gradient FD max rel err {max_rel:.2e} (<= 1e-5)")


def test_criterion_6_zstack_geometry():
    cfg = get_preset("Epi1")
    em = EmitterSet(np.array([[0.0, 0.0, 250.0]]), density=30.0)
    stack = render_zstack(em, cfg, FieldOfView(33, 33))
    offsets_exact = stack.z_offsets.tolist() == [-250.0, 0.0, 250.0]
    peak_slice = int(stack.slices.max(axis=(1, 2)).argmax())
    ok = offsets_exact and peak_slice == 2
    report(6, ok, f"Epi1 default offsets {stack.z_offsets.tolist()} nm; "
           f"emitter at +250nm peaks in slice n=+1 (index {peak_slice})")


def test_criterion_7_noise_model():
    cfg = get_preset("Epi1")
    img = np.zeros((256, 256))
    img[128, 128] = 1.0
    counts = add_noise(img, cfg, target_sbr=3.0, seed=5)
    bg_mean = float(counts[img == 0].mean())
    bg_ok = abs(bg_mean - 100.0) / 100.0 < 0.02

    spot = render_slice(EmitterSet(np.array([[0.0, 0.0, 0.0]]), 30.0), cfg,
                        FieldOfView(65, 65))
    peak = spot >= 0.999 * spot.max()
    bg = spot < 1e-9 * spot.max()
    ratios = []
    sampled = []
    for seed in range(100):
        noisy = add_noise(spot, cfg, target_sbr=3.0, seed=seed)
        ratios.append(noisy[peak].mean() / noisy[bg].mean())
        _, sbr = add_noise(spot, cfg, "sample", seed=seed, return_sbr=True)
        sampled.append(sbr)
    measured = float(np.mean(ratios))
    sbr_ok = abs(measured - 3.0) <= 0.3
    range_ok = all(2.0 <= s <= 4.0 for s in sampled)
    ok = bg_ok and sbr_ok and range_ok
    report(7, ok, f"background mean {bg_mean:.1f} (b=100 +-2%); measured SBR "
           f"{measured:.2f} for target 3 (+-10% over 100 seeds); sampled SBRs in "
           f"[{min(sampled):.2f}, {max(sampled):.2f}] within [2, 4]")


def test_criterion_8_metrics_calibration():
    sphere = icosphere(radius=0.35, subdivisions=3)
    iou_same = volumetric_iou(sphere, sphere, n_samples=50_000, seed=1)

    a = cube_mesh(side=1.0)
    b = cube_mesh(side=1.0, center=(0.5, 0.0, 0.0))
    iou_offset = volumetric_iou(a, b, n_samples=100_000, seed=2)

    chamfer_self = chamfer_l1(sphere, sphere, n_points=5_000, seed=3)

    rng = np.random.default_rng(4)
    identities_ok = True
    for _ in range(100):
        pred = (rng.random((16, 16)) < rng.uniform(0, 1)).astype(np.uint8)
        gt = (rng.random((16, 16)) < rng.uniform(0, 1)).astype(np.uint8)
        s = mask_scores(pred, gt)
        dice_o, iou_o, tp_o, fp_o, fn_o = mask_scores_pixel_loop(pred, gt)
        if (s.tp, s.fp, s.fn) != (tp_o, fp_o, fn_o):
            identities_ok = False
        if abs(s.dice - dice_o) > 1e-12 or abs(s.iou - iou_o) > 1e-12:
            identities_ok = False

    ok = (iou_same >= 0.999 and abs(iou_offset - 1.0 / 3.0) <= 0.02
          and chamfer_self == 0.0 and identities_ok)
    report(8, ok, f"identical IoU {iou_same:.4f}; half-offset cubes IoU "
           f"{iou_offset:.4f} (1/3 +- 0.02); chamfer self {chamfer_self}; "
           f"mask identities exact on 100 random masks")


def test_criterion_9_end_to_end_determinism(tmp_path):
    t0 = time.time()
    shapes_dir = tmp_path / "shapes"
    shapes_dir.mkdir()
    for i, seed in enumerate((3, 5, 9)):
        vol = blob_mask(shape=(24, 24, 24), fill=0.25, smooth=2.2, seed=seed)
        save_mesh(marching_cubes(vol), shapes_dir / f"blob_{i}.off")

    def digest_tree(root):
        out = {}
        for dirpath, _dirs, names in os.walk(root):
            for name in names:
                p = os.path.join(dirpath, name)
                rel = os.path.relpath(p, root)
                out[rel] = hashlib.sha256(open(p, "rb").read()).hexdigest()
        return out

    shapes = [marching_cubes(blob_mask(shape=(24, 24, 24), fill=0.25, smooth=2.2, seed=s))
              for s in (3, 5, 9)]
    opts = SegDatasetOptions()  # 128px tiles montaged to 256x256, per the spec
    d1, d2 = tmp_path / "run1", tmp_path / "run2"
    gen_segmentation_dataset(shapes, str(d1), 20, 20240811, options=opts, jobs=1)
    gen_segmentation_dataset(shapes, str(d2), 20, 20240811, options=opts, jobs=1)

    cfg = tmp_path / "seg.cfg"
    cfg.write_text(f"shapes_dir {shapes_dir}\ncount 20\n")
    d3 = tmp_path / "run3"
    code = cli_main(["dataset", "seg", "--config", str(cfg), "--seed", "20240811",
                     "--out", str(d3), "--jobs", "8"])

    h1, h2, h3 = digest_tree(d1), digest_tree(d2), digest_tree(d3)
    img = read_pgm(d1 / "images" / "seg_00000.pgm")
    elapsed = time.time() - t0
    ok = code == 0 and h1 == h2 == h3 and img.shape == (256, 256) and len(h1) == 41
    report(9, ok, f"20-item seg dataset ({img.shape[0]}x{img.shape[1]} montages) "
           f"byte-identical across two runs and a --jobs 8 CLI run ({elapsed:.0f}s)")


def test_criterion_10_microscope_to_microscope():
    emitters = EmitterSet(np.array([[0.0, 0.0, 0.0]]), density=30.0)
    fwhms = {}
    for name in ("Epi1", "Con1"):
        cfg = get_preset(name)
        img = render_slice(emitters, cfg, FieldOfView(65, 65))
        fwhms[name] = measure_fwhm_nm(img, cfg.pixel_size)
    ratio = fwhms["Con1"] / fwhms["Epi1"]
    preset_ratio = lateral_resolution(get_preset("Con1")) / lateral_resolution(get_preset("Epi1"))
    ok = fwhms["Con1"] < fwhms["Epi1"] and abs(ratio - preset_ratio) / preset_ratio <= 0.10
    report(10, ok, f"measured FWHM Con1 {fwhms['Con1']:.0f}nm < Epi1 "
           f"{fwhms['Epi1']:.0f}nm; ratio {ratio:.3f} within 10% of preset "
           f"ratio {preset_ratio:.3f}")
