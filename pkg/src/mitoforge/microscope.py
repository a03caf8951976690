"""Fluorescence image formation: Gaussian PSF rendering, z-stacks, and noise.

The PSF is a separable 3D Gaussian whose lateral FWHM equals the microscope's
optical resolution and whose axial FWHM equals the depth of field. Lateral
weights are integrated over each pixel (difference of error functions) so an
in-focus emitter deposits its photon budget accurately; the axial weight
peaks at 1 in focus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, InputError, NumericError
from .mesh import EmitterSet

FWHM_FACTOR = 2.3548200450309493  # 2 * sqrt(2 * ln 2)
AXIAL_WEIGHT_CUTOFF = 1e-6
DEFAULT_PHOTONS = 1000.0


@dataclass(frozen=True)
class MicroscopeConfig:
    kind: str  # "widefield" or "confocal"
    emission_wavelength: float  # nm
    numerical_aperture: float
    magnification: float
    pixel_size: float  # nm, sample plane
    dof: float  # nm
    background: float = 100.0
    sbr_range: tuple[float, float] = (2.0, 4.0)

    def validate(self) -> "MicroscopeConfig":
        if self.kind not in ("widefield", "confocal"):
            raise ConfigError(f"kind must be widefield or confocal, got {self.kind!r}")
        for name in ("emission_wavelength", "pixel_size", "dof"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0 < self.numerical_aperture < 2:
            raise ConfigError(f"numerical_aperture must lie in (0, 2), got {self.numerical_aperture}")
        lo, hi = self.sbr_range
        if not (lo >= 1 and lo <= hi):
            raise ConfigError(f"sbr_range must satisfy 1 <= low <= high, got {self.sbr_range}")
        if self.background < 0:
            raise ConfigError("background must be >= 0")
        return self


PRESETS: dict[str, MicroscopeConfig] = {
    "Con1": MicroscopeConfig("confocal", 600.0, 1.4, 63.0, 70.0, 250.0),
    "Epi1": MicroscopeConfig("widefield", 688.0, 1.42, 60.0, 109.0, 500.0),
    "Epi2": MicroscopeConfig("widefield", 608.0, 1.4, 60.0, 80.0, 500.0),
}


def get_preset(name: str) -> MicroscopeConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        ) from None


def lateral_resolution(config: MicroscopeConfig) -> float:
    """Optical resolution in nm: lambda/(2 NA), confocal gains a sqrt(2)."""
    config.validate()
    r = config.emission_wavelength / (2.0 * config.numerical_aperture)
    if config.kind == "confocal":
        r /= np.sqrt(2.0)
    return float(r)


def psf_sigma(config: MicroscopeConfig) -> tuple[float, float]:
    """(sigma_xy, sigma_z) in nm under the FWHM convention."""
    return lateral_resolution(config) / FWHM_FACTOR, config.dof / FWHM_FACTOR


@dataclass(frozen=True)
class FieldOfView:
    width_px: int
    height_px: int
    center_nm: tuple[float, float] = (0.0, 0.0)

    def validate(self) -> "FieldOfView":
        if self.width_px < 1 or self.height_px < 1:
            raise ConfigError("field of view must be at least 1x1 pixels")
        return self

    def pixel_centers(self, pixel_size: float) -> tuple[np.ndarray, np.ndarray]:
        cx, cy = self.center_nm
        xs = cx + (np.arange(self.width_px) - (self.width_px - 1) / 2.0) * pixel_size
        ys = cy + (np.arange(self.height_px) - (self.height_px - 1) / 2.0) * pixel_size
        return xs, ys


@dataclass
class ImageStack:
    pixel_size: float
    z_offsets: np.ndarray
    slices: np.ndarray  # (k, height, width)
    noisy: bool = False
    seed: int | None = None

    def __post_init__(self):
        self.slices = np.asarray(self.slices)
        self.z_offsets = np.asarray(self.z_offsets, dtype=np.float64).reshape(-1)
        if self.slices.ndim != 3 or len(self.slices) != len(self.z_offsets):
            raise ConfigError("stack needs one z offset per slice")
        if (np.asarray(self.slices) < 0).any():
            raise ConfigError("stack intensities must be >= 0")

    @property
    def height(self) -> int:
        return self.slices.shape[1]

    @property
    def width(self) -> int:
        return self.slices.shape[2]


def _pixel_weights(centers: np.ndarray, pos: float, pixel_size: float,
                   sigma: float) -> np.ndarray:
    s = np.sqrt(2.0) * sigma
    return 0.5 * (
        erf((centers + pixel_size / 2.0 - pos) / s)
        - erf((centers - pixel_size / 2.0 - pos) / s)
    )


def render_slice(emitters: EmitterSet, config: MicroscopeConfig, fov: FieldOfView,
                 z_focal: float = 0.0,
                 photons_per_emitter: float = DEFAULT_PHOTONS) -> np.ndarray:
    """Noise-free image of the emitter set at one focal plane.

    Pixel (row, col) accumulates photons * G_z(z_e - z_focal) times the
    pixel-integrated lateral Gaussian; emitters with axial weight below
    1e-6 are skipped.
    """
    config.validate()
    fov.validate()
    sigma_xy, sigma_z = psf_sigma(config)
    xs, ys = fov.pixel_centers(config.pixel_size)
    image = np.zeros((fov.height_px, fov.width_px))
    if len(emitters) == 0:
        return image
    pos = emitters.positions
    gz = np.exp(-((pos[:, 2] - z_focal) ** 2) / (2.0 * sigma_z**2))
    keep = gz >= AXIAL_WEIGHT_CUTOFF
    win = int(np.ceil(6.0 * sigma_xy / config.pixel_size)) + 1
    for (ex, ey, _), w_axial in zip(pos[keep], gz[keep]):
        ci = int(round((ex - xs[0]) / config.pixel_size))
        ri = int(round((ey - ys[0]) / config.pixel_size))
        c0, c1 = max(ci - win, 0), min(ci + win + 1, fov.width_px)
        r0, r1 = max(ri - win, 0), min(ri + win + 1, fov.height_px)
        if c0 >= c1 or r0 >= r1:
            continue
        wx = _pixel_weights(xs[c0:c1], ex, config.pixel_size, sigma_xy)
        wy = _pixel_weights(ys[r0:r1], ey, config.pixel_size, sigma_xy)
        image[r0:r1, c0:c1] += photons_per_emitter * w_axial * np.outer(wy, wx)
    return image


def render_zstack(emitters: EmitterSet, config: MicroscopeConfig, fov: FieldOfView,
                  dz: float | None = None, n_list=(-1, 0, 1),
                  photons_per_emitter: float = DEFAULT_PHOTONS) -> ImageStack:
    """Stack of slices at focal offsets n*dz; dz defaults to DOF/2."""
    if dz is None:
        dz = config.dof / 2.0
    if not dz > 0:
        raise ConfigError(f"dz must be > 0, got {dz}")
    n_list = list(n_list)
    if not n_list:
        raise ConfigError("n_list must not be empty")
    offsets = np.array([n * dz for n in n_list], dtype=np.float64)
    slices = np.stack([
        render_slice(emitters, config, fov, z_focal=z, photons_per_emitter=photons_per_emitter)
        for z in offsets
    ])
    return ImageStack(pixel_size=config.pixel_size, z_offsets=offsets, slices=slices)


def _resolve_sbr(config: MicroscopeConfig, target_sbr, rng: np.random.Generator) -> float:
    if isinstance(target_sbr, str):
        if target_sbr != "sample":
            raise ConfigError(f"target_sbr must be a number or 'sample', got {target_sbr!r}")
        lo, hi = config.sbr_range
        return float(rng.uniform(lo, hi))
    t = float(target_sbr)
    if t < 1.0:
        raise ConfigError(f"target SBR must be >= 1, got {t}")
    return t


def add_noise(image: np.ndarray, config: MicroscopeConfig, target_sbr="sample",
              seed: int = 0, return_sbr: bool = False):
    """Scale the signal to the target SBR and draw Poisson counts plus background.

    SBR is (peak_signal + b) / b. The sampled target is drawn before the
    Poisson stream so one seed fixes the whole image.
    """
    config.validate()
    img = np.asarray(image, dtype=np.float64)
    if (img < 0).any():
        raise ConfigError("noise model requires a non-negative image")
    rng = np.random.default_rng(seed)
    target = _resolve_sbr(config, target_sbr, rng)
    peak = float(img.max(initial=0.0))
    if peak <= 0.0:
        raise NumericError("cannot scale an all-zero image to a target SBR")
    scale = (target - 1.0) * config.background / peak
    counts = rng.poisson(scale * img + config.background).astype(np.int64)
    if return_sbr:
        return counts, target
    return counts


def add_noise_stack(stack: ImageStack, config: MicroscopeConfig, target_sbr="sample",
                    seed: int = 0) -> ImageStack:
    """Noise over a whole stack: one sampled SBR, scaling by the stack peak."""
    rng = np.random.default_rng(seed)
    target = _resolve_sbr(config, target_sbr, rng)
    peak = float(stack.slices.max(initial=0.0))
    if peak <= 0.0:
        raise NumericError("cannot scale an all-zero stack to a target SBR")
    scale = (target - 1.0) * config.background / peak
    noisy = np.stack([
        rng.poisson(scale * sl + config.background).astype(np.int64)
        for sl in stack.slices
    ])
    return ImageStack(pixel_size=stack.pixel_size, z_offsets=stack.z_offsets.copy(),
                      slices=noisy, noisy=True, seed=seed)


def dof_mask(emitters: EmitterSet, config: MicroscopeConfig,
             z_focal: float = 0.0) -> EmitterSet:
    """Emitters within half a depth of field of the focal plane."""
    keep = np.abs(emitters.positions[:, 2] - z_focal) <= config.dof / 2.0
    return EmitterSet(emitters.positions[keep], emitters.density, emitters.seed)


def ground_truth_mask(emitters: EmitterSet, config: MicroscopeConfig, fov: FieldOfView,
                      z_focal: float = 0.0,
                      dilation_radius: float | None = None) -> np.ndarray:
    """Binary footprint: pixels within the radius of an in-DOF emitter's projection.

    The default radius is 0.75x the lateral resolution, wide enough that the
    half-maximum region of an in-focus spot is always covered.
    """
    config.validate()
    fov.validate()
    if dilation_radius is None:
        dilation_radius = 0.75 * lateral_resolution(config)
    if dilation_radius < 0:
        raise ConfigError("dilation_radius must be >= 0")
    xs, ys = fov.pixel_centers(config.pixel_size)
    mask = np.zeros((fov.height_px, fov.width_px), dtype=np.uint8)
    in_dof = dof_mask(emitters, config, z_focal)
    win = int(np.ceil(dilation_radius / config.pixel_size)) + 1
    r2 = dilation_radius**2
    for ex, ey, _ in in_dof.positions:
        ci = int(round((ex - xs[0]) / config.pixel_size))
        ri = int(round((ey - ys[0]) / config.pixel_size))
        c0, c1 = max(ci - win, 0), min(ci + win + 1, fov.width_px)
        r0, r1 = max(ri - win, 0), min(ri + win + 1, fov.height_px)
        if c0 >= c1 or r0 >= r1:
            continue
        dx = xs[c0:c1] - ex
        dy = ys[r0:r1] - ey
        mask[r0:r1, c0:c1] |= (dy[:, None] ** 2 + dx[None, :] ** 2 <= r2).astype(np.uint8)
    return mask


# ---------------------------------------------------------------------------
# config file I/O

_CONFIG_KEYS = {
    "kind": str,
    "emission_wavelength_nm": float,
    "numerical_aperture": float,
    "magnification": float,
    "pixel_size_nm": float,
    "dof_nm": float,
    "background": float,
    "sbr_low": float,
    "sbr_high": float,
}


def format_config(config: MicroscopeConfig) -> str:
    lines = [
        f"kind {config.kind}",
        f"emission_wavelength_nm {config.emission_wavelength!r}",
        f"numerical_aperture {config.numerical_aperture!r}",
        f"magnification {config.magnification!r}",
        f"pixel_size_nm {config.pixel_size!r}",
        f"dof_nm {config.dof!r}",
        f"background {config.background!r}",
        f"sbr_low {config.sbr_range[0]!r}",
        f"sbr_high {config.sbr_range[1]!r}",
    ]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> MicroscopeConfig:
    values: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition(" ")
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown microscope config key {key!r}")
        if key in values:
            raise ConfigError(f"duplicate microscope config key {key!r}")
        values[key] = val.strip()
    missing = set(_CONFIG_KEYS) - set(values)
    if missing:
        raise ConfigError(f"missing microscope config keys: {sorted(missing)}")
    try:
        cfg = MicroscopeConfig(
            kind=values["kind"],
            emission_wavelength=float(values["emission_wavelength_nm"]),
            numerical_aperture=float(values["numerical_aperture"]),
            magnification=float(values["magnification"]),
            pixel_size=float(values["pixel_size_nm"]),
            dof=float(values["dof_nm"]),
            background=float(values["background"]),
            sbr_range=(float(values["sbr_low"]), float(values["sbr_high"])),
        )
    except ValueError as exc:
        raise ConfigError(f"malformed microscope config: {exc}") from exc
    return cfg.validate()


def load_config(path: str) -> MicroscopeConfig:
    try:
        text = open(path).read()
    except OSError as exc:
        raise InputError(f"cannot read microscope config {path}: {exc}") from exc
    return parse_config(text)


# ---------------------------------------------------------------------------
# image I/O


def write_pgm(image: np.ndarray, path: str, maxval: int = 65535) -> None:
    """16-bit (or 8-bit) binary PGM; values are clipped into [0, maxval]."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ConfigError("PGM writer expects a 2D image")
    if maxval not in (1, 255, 65535):
        raise ConfigError("maxval must be 1, 255 or 65535")
    data = np.clip(np.rint(img), 0, maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode())
        f.write(data.astype(dtype).tobytes())


def read_pgm(path: str) -> np.ndarray:
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise InputError(f"cannot read PGM {path}: {exc}") from exc
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise InputError(f"not a binary PGM: {path}")
    try:
        width, height = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError as exc:
        raise InputError(f"malformed PGM header: {path}") from exc
    dtype = ">u2" if maxval > 255 else "u1"
    expected = width * height * (2 if maxval > 255 else 1)
    body = parts[3]
    if len(body) != expected:
        raise InputError(f"PGM payload size mismatch: {path}")
    return np.frombuffer(body, dtype=dtype).reshape(height, width).astype(np.int64)


def write_float_image(image: np.ndarray, path: str, pixel_size: float) -> None:
    """Noise-free image as float32 raw plus a text sidecar."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise ConfigError("float image writer expects a 2D image")
    with open(str(path) + ".hdr", "w") as f:
        f.write(f"width {img.shape[1]}\nheight {img.shape[0]}\n"
                f"pixel_size_nm {float(pixel_size)!r}\n")
    img.tofile(path)


def read_float_image(path: str) -> tuple[np.ndarray, float]:
    hdr = {}
    try:
        for line in open(str(path) + ".hdr"):
            key, _, val = line.strip().partition(" ")
            hdr[key] = val
        width, height = int(hdr["width"]), int(hdr["height"])
        pixel_size = float(hdr["pixel_size_nm"])
        data = np.fromfile(path, dtype="<f4")
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read float image {path}: {exc}") from exc
    if data.size != width * height:
        raise InputError(f"float image payload mismatch: {path}")
    return data.reshape(height, width).astype(np.float64), pixel_size


def write_stack(stack: ImageStack, out_dir, prefix: str = "slice") -> list[str]:
    """One file per slice plus a manifest listing z offsets. Returns rel paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    names = []
    for k, (z, sl) in enumerate(zip(stack.z_offsets, stack.slices)):
        if stack.noisy:
            name = f"{prefix}_{k:02d}.pgm"
            write_pgm(sl, os.path.join(out_dir, name))
        else:
            name = f"{prefix}_{k:02d}.f32"
            write_float_image(sl, os.path.join(out_dir, name), stack.pixel_size)
        names.append(name)
    manifest = [f"pixel_size_nm {float(stack.pixel_size)!r}",
                f"noisy {int(stack.noisy)}",
                f"seed {-1 if stack.seed is None else stack.seed}"]
    manifest += [f"slice {n} {float(z)!r}" for n, z in zip(names, stack.z_offsets)]
    mpath = os.path.join(out_dir, f"{prefix}_stack.txt")
    with open(mpath, "w") as f:
        f.write("\n".join(manifest) + "\n")
    written = names + [f"{prefix}_stack.txt"]
    if not stack.noisy:
        written += [n + ".hdr" for n in names]
    return written


def read_stack(out_dir, prefix: str = "slice") -> ImageStack:
    import os

    mpath = os.path.join(out_dir, f"{prefix}_stack.txt")
    try:
        lines = [ln.strip() for ln in open(mpath) if ln.strip()]
    except OSError as exc:
        raise InputError(f"cannot read stack manifest {mpath}: {exc}") from exc
    meta = {}
    slices, offsets = [], []
    for ln in lines:
        key, _, rest = ln.partition(" ")
        if key == "slice":
            name, z = rest.rsplit(" ", 1)
            offsets.append(float(z))
            fpath = os.path.join(out_dir, name)
            if name.endswith(".pgm"):
                slices.append(read_pgm(fpath))
            else:
                slices.append(read_float_image(fpath)[0])
        else:
            meta[key] = rest
    if not slices:
        raise InputError(f"stack manifest lists no slices: {mpath}")
    noisy = meta.get("noisy") == "1"
    seed = int(meta.get("seed", "-1"))
    return ImageStack(
        pixel_size=float(meta["pixel_size_nm"]),
        z_offsets=np.array(offsets),
        slices=np.stack(slices),
        noisy=noisy,
        seed=None if seed < 0 else seed,
    )
