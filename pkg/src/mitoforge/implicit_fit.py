"""Per-shape occupancy fit: a small residual MLP trained by Adam on BCE.

The network maps a 3D query point to an occupancy probability through a
stack of residual fully connected blocks. All math is float64 so the
analytic gradient can be checked tightly against central differences.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, NumericError
from .mesh import TriangleMesh, _mesh_from_grid
from .occupancy import OccupancySampleSet, unit_cube_grid_coords

PROB_CLIP = 1e-7
_ACTIVATIONS = {"tanh": 0}


_PROB_LO = 5e-324  # smallest subnormal
_PROB_HI = float(np.nextafter(1.0, 0.0))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable logistic via tanh; clamped to the open interval because float64
    # rounds the tails to exactly 0/1 past |x| ~ 37
    return np.clip(0.5 * (np.tanh(0.5 * x) + 1.0), _PROB_LO, _PROB_HI)


@dataclass
class FitConfig:
    seed: int
    epochs: int = 2000
    batch_size: int = 512
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: int = 64
    n_blocks: int = 5

    def validate(self) -> "FitConfig":
        for name in ("epochs", "batch_size", "learning_rate", "beta1", "beta2",
                     "adam_eps", "hidden", "n_blocks"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"FitConfig.{name} must be positive")
        if self.seed < 0:
            raise ConfigError("FitConfig.seed must be >= 0")
        return self


@dataclass
class MlpOccupancy:
    hidden: int
    n_blocks: int
    params: dict[str, np.ndarray]
    activation: str = "tanh"

    def param_names(self) -> list[str]:
        names = ["W_in", "b_in"]
        for k in range(self.n_blocks):
            names += [f"W1_{k}", f"b1_{k}", f"W2_{k}", f"b2_{k}"]
        return names + ["W_out", "b_out"]

    @property
    def n_params(self) -> int:
        return sum(self.params[n].size for n in self.param_names())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.param_names()])

    def from_vector(self, vec: np.ndarray) -> None:
        pos = 0
        for name in self.param_names():
            p = self.params[name]
            p[...] = vec[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    def forward(self, points: np.ndarray) -> np.ndarray:
        """Occupancy probability in (0, 1) for each query point."""
        return self._forward_cached(np.asarray(points, dtype=np.float64).reshape(-1, 3))[0]

    def _forward_cached(self, x: np.ndarray):
        p = self.params
        cache = {"x": x}
        h = np.tanh(x @ p["W_in"] + p["b_in"])
        cache["t0"] = h
        hs = [h]
        for k in range(self.n_blocks):
            u = np.tanh(h @ p[f"W1_{k}"] + p[f"b1_{k}"])
            h = h + u @ p[f"W2_{k}"] + p[f"b2_{k}"]
            cache[f"u_{k}"] = u
            hs.append(h)
        cache["hs"] = hs
        logit = (h @ p["W_out"] + p["b_out"]).ravel()
        cache["logit"] = logit
        return _sigmoid(logit), cache


def init_model(hidden: int = 64, n_blocks: int = 5, seed=0) -> MlpOccupancy:
    """Fan-in-scaled uniform init; the output layer starts at zero so the
    initial field is exactly 0.5 everywhere."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def linear(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        return w, b

    params["W_in"], params["b_in"] = linear(3, hidden)
    for k in range(n_blocks):
        params[f"W1_{k}"], params[f"b1_{k}"] = linear(hidden, hidden)
        params[f"W2_{k}"], params[f"b2_{k}"] = linear(hidden, hidden)
    params["W_out"] = np.zeros((hidden, 1))
    params["b_out"] = np.zeros(1)
    return MlpOccupancy(hidden=hidden, n_blocks=n_blocks, params=params)


def _bce(probs: np.ndarray, labels: np.ndarray) -> float:
    pc = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    return float(-np.mean(labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc)))


def loss(model: MlpOccupancy, points: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy with probabilities clipped for safety."""
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if labels.size == 0:
        raise ConfigError("loss requires a nonempty batch")
    return _bce(model.forward(points), labels)


def loss_and_gradient(model: MlpOccupancy, points: np.ndarray, labels: np.ndarray):
    """Loss plus its exact reverse-mode gradient w.r.t. every parameter.

    The clip is part of the objective: probabilities outside the clip window
    contribute zero gradient, matching what finite differences see.
    """
    x = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ConfigError("gradient requires a nonempty batch")
    probs, cache = model._forward_cached(x)
    n = y.size
    pc = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    total = _bce(probs, y)

    interior = (probs > PROB_CLIP) & (probs < 1.0 - PROB_CLIP)
    dpc = (-y / pc + (1.0 - y) / (1.0 - pc)) / n
    dlogit = np.where(interior, dpc * probs * (1.0 - probs), 0.0)[:, None]

    p = model.params
    grads: dict[str, np.ndarray] = {}
    h_last = cache["hs"][-1]
    grads["W_out"] = h_last.T @ dlogit
    grads["b_out"] = dlogit.sum(axis=0)
    dh = dlogit @ p["W_out"].T
    for k in range(model.n_blocks - 1, -1, -1):
        u = cache[f"u_{k}"]
        h_in = cache["hs"][k]
        grads[f"b2_{k}"] = dh.sum(axis=0)
        grads[f"W2_{k}"] = u.T @ dh
        dpre1 = (dh @ p[f"W2_{k}"].T) * (1.0 - u * u)
        grads[f"b1_{k}"] = dpre1.sum(axis=0)
        grads[f"W1_{k}"] = h_in.T @ dpre1
        dh = dh + dpre1 @ p[f"W1_{k}"].T
    t0 = cache["t0"]
    dpre0 = dh * (1.0 - t0 * t0)
    grads["W_in"] = cache["x"].T @ dpre0
    grads["b_in"] = dpre0.sum(axis=0)
    return total, grads


def fit(samples: OccupancySampleSet, config: FitConfig, callback=None) -> MlpOccupancy:
    """Train on the sample set for the scheduled epochs.

    Initialization and epoch shuffling draw from separate streams derived
    from the seed, so (seed, config, samples) fully determine the weights.
    ``callback(epoch, mean_loss)`` is invoked after every epoch when given.
    """
    config.validate()
    if len(samples) == 0:
        raise ConfigError("fit requires a nonempty sample set")
    x = samples.points.astype(np.float64)
    y = samples.labels.astype(np.float64)
    model = init_model(config.hidden, config.n_blocks, seed=[config.seed, 0])
    shuffle_rng = np.random.default_rng([config.seed, 1])

    names = model.param_names()
    m_state = {nm: np.zeros_like(model.params[nm]) for nm in names}
    v_state = {nm: np.zeros_like(model.params[nm]) for nm in names}
    step = 0
    n = len(y)
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            batch_loss, grads = loss_and_gradient(model, x[idx], y[idx])
            epoch_loss += batch_loss
            n_batches += 1
            step += 1
            bc1 = 1.0 - config.beta1**step
            bc2 = 1.0 - config.beta2**step
            scale = config.learning_rate / bc1
            rbc2 = 1.0 / np.sqrt(bc2)
            for nm in names:
                g = grads[nm].reshape(model.params[nm].shape)
                m = m_state[nm]
                v = v_state[nm]
                m *= config.beta1
                m += (1.0 - config.beta1) * g
                v *= config.beta2
                v += (1.0 - config.beta2) * (g * g)
                model.params[nm] -= scale * m / (np.sqrt(v) * rbc2 + config.adam_eps)
        mean_loss = epoch_loss / max(n_batches, 1)
        if not np.isfinite(mean_loss):
            raise NumericError(
                f"fit diverged at epoch {epoch}: loss={mean_loss} "
                f"(seed={config.seed}, lr={config.learning_rate})"
            )
        if callback is not None:
            callback(epoch, mean_loss)
    return model


def evaluate_grid(model: MlpOccupancy, resolution: int,
                  chunk: int = 65536) -> np.ndarray:
    coords = unit_cube_grid_coords(resolution)
    out = np.empty(len(coords))
    for start in range(0, len(coords), chunk):
        out[start : start + chunk] = model.forward(coords[start : start + chunk])
    return out.reshape(resolution, resolution, resolution)


def extract_mesh(model: MlpOccupancy, resolution: int = 128,
                 threshold: float = 0.5) -> TriangleMesh:
    """Marching cubes over the model's occupancy grid at the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    if resolution < 2:
        raise ConfigError(f"resolution must be >= 2, got {resolution}")
    values = np.pad(evaluate_grid(model, resolution), 1)
    spacing = 1.0 / resolution
    origin = np.full(3, -0.5 - 0.5 * spacing)
    return _mesh_from_grid(values, threshold, origin, spacing, provenance="mlp")


_CKPT_MAGIC = b"MFCK"


def save_model(model: MlpOccupancy, path: str) -> None:
    header = _CKPT_MAGIC + struct.pack(
        "<HIIBQ", 1, model.hidden, model.n_blocks,
        _ACTIVATIONS[model.activation], model.n_params,
    )
    body = model.to_vector().astype("<f8").tobytes()
    crc = zlib.crc32(header + body)
    with open(path, "wb") as f:
        f.write(header + body + struct.pack("<I", crc))


def load_model(path: str) -> MlpOccupancy:
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    fixed = len(_CKPT_MAGIC) + struct.calcsize("<HIIBQ")
    if len(blob) < fixed + 4 or blob[:4] != _CKPT_MAGIC:
        raise InputError(f"not a model checkpoint: {path}")
    version, hidden, n_blocks, act, n_params = struct.unpack("<HIIBQ", blob[4:fixed])
    if version != 1:
        raise InputError(f"unsupported checkpoint version {version}")
    if act not in _ACTIVATIONS.values():
        raise InputError(f"unknown activation code {act}")
    if len(blob) != fixed + n_params * 8 + 4:
        raise InputError(f"truncated checkpoint: {path}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if crc != zlib.crc32(blob[:-4]):
        raise InputError(f"checkpoint checksum mismatch: {path}")
    model = init_model(hidden, n_blocks, seed=0)
    vec = np.frombuffer(blob[fixed:-4], dtype="<f8").astype(np.float64)
    if vec.size != model.n_params:
        raise InputError("checkpoint parameter count does not match architecture")
    model.from_vector(vec)
    return model
