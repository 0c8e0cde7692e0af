"""A small point-cloud encoder trained end to end through the fitting losses.

Architecture: a shared per-point MLP (3 -> h1 -> h2, ReLU), max-pooling over
points, and a trunk layer that also sees the cloud centroid. Heads predict a
position offset (added to the centroid), shape coefficients, and one bounded
yaw residual per orientation bin. The auxiliary position head reads the
pooled feature through a gradient barrier, so chamfer gradients never reach
the shared layers.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .fitting import Adam, InstanceProblem
from .geometry import TWO_PI, EmptyObject, ObjectPose
from .losses import FitState, LossBreakdown, LossWeights, hindsight

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "Wp", "bp", "Wz", "bz", "Wy", "by",
               "Wa1", "ba1", "Wa2", "ba2")
AUX_PARAMS = ("Wa1", "ba1", "Wa2", "ba2")
HIDDEN_BIAS = 0.01


@dataclass(frozen=True)
class EncoderShape:
    h1: int = 64
    h2: int = 128
    trunk: int = 128
    aux_hidden: int = 64
    n_bins: int = 8
    n_bases: int = 3
    centroid_scale: float = 20.0  # centroid is fed to the trunk divided by this


def _layer_shapes(s: EncoderShape) -> dict:
    u = s.h2 + 3
    return {
        "W1": (3, s.h1), "b1": (s.h1,), "W2": (s.h1, s.h2), "b2": (s.h2,),
        "W3": (u, s.trunk), "b3": (s.trunk,),
        "Wp": (s.trunk, 3), "bp": (3,), "Wz": (s.trunk, s.n_bases), "bz": (s.n_bases,),
        "Wy": (s.trunk, s.n_bins), "by": (s.n_bins,),
        "Wa1": (u, s.aux_hidden), "ba1": (s.aux_hidden,), "Wa2": (s.aux_hidden, 3), "ba2": (3,),
    }


@dataclass
class EncoderParams:
    shape: EncoderShape
    arrays: dict

    @classmethod
    def init(cls, shape: EncoderShape = EncoderShape(), seed: int = 0, head_scale: float = 0.01):
        """He-initialized hidden layers, small random heads.

        Hidden biases start slightly positive so that no unit sits exactly
        on the ReLU kink; head biases start at zero.
        """
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shp in _layer_shapes(shape).items():
            if name in ("b1", "b2", "b3", "ba1"):
                arrays[name] = np.full(shp, HIDDEN_BIAS)
            elif name.startswith("b"):
                arrays[name] = np.zeros(shp)
            elif name in ("W1", "W2", "W3", "Wa1"):
                arrays[name] = rng.normal(0.0, math.sqrt(2.0 / shp[0]), shp)
            else:
                arrays[name] = rng.normal(0.0, head_scale, shp)
        return cls(shape, arrays)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.shape, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].reshape(-1) for k in PARAM_NAMES])

    def set_flat(self, vec: np.ndarray) -> None:
        off = 0
        for k in PARAM_NAMES:
            a = self.arrays[k]
            self.arrays[k] = np.asarray(vec[off:off + a.size], dtype=np.float64).reshape(a.shape).copy()
            off += a.size
        if off != len(vec):
            raise ValueError("flat parameter vector has the wrong length")

    def finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())

    def save(self, path, extra: dict | None = None) -> None:
        """Write ``path`` (raw little-endian float64) and ``path + '.json'`` (manifest)."""
        path = Path(path)
        manifest = {"version": CHECKPOINT_VERSION, "dtype": "<f8", "shape": asdict(self.shape), "arrays": []}
        off = 0
        for k in PARAM_NAMES:
            a = self.arrays[k]
            manifest["arrays"].append({"name": k, "shape": list(a.shape), "offset": off})
            off += a.size
        manifest["count"] = off
        if extra:
            manifest["extra"] = extra
        path.write_bytes(self.flat().astype("<f8").tobytes())
        Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "EncoderParams":
        path = Path(path)
        manifest = json.loads(Path(str(path) + ".json").read_text())
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
        shape = EncoderShape(**manifest["shape"])
        data = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
        if len(data) != manifest["count"]:
            raise ValueError(f"{path}: expected {manifest['count']} floats, found {len(data)}")
        expected = _layer_shapes(shape)
        arrays = {}
        for entry in manifest["arrays"]:
            name, shp, off = entry["name"], tuple(entry["shape"]), entry["offset"]
            if expected.get(name) != shp:
                raise ValueError(f"{path}: array {name} has shape {shp}, expected {expected.get(name)}")
            arrays[name] = data[off:off + int(np.prod(shp))].reshape(shp).copy()
        if set(arrays) != set(PARAM_NAMES):
            raise ValueError(f"{path}: checkpoint is missing arrays")
        return cls(shape, arrays)


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    points: np.ndarray
    centroid: np.ndarray
    A1: np.ndarray
    H1: np.ndarray
    A2: np.ndarray
    pool_arg: np.ndarray
    u: np.ndarray
    A3: np.ndarray
    T: np.ndarray
    tanh_y: np.ndarray
    A4: np.ndarray
    H4: np.ndarray


@dataclass
class EncoderOutput:
    x: np.ndarray
    z: np.ndarray
    yaws: np.ndarray
    residuals: np.ndarray
    x_aux: np.ndarray
    cache: ForwardCache = field(repr=False)

    def hypotheses(self) -> list[FitState]:
        return [FitState(ObjectPose(self.x, y), self.z, self.x_aux) for y in self.yaws]


def _relu(a):
    return np.maximum(a, 0.0)


def forward(params: EncoderParams, points) -> EncoderOutput:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0 or not np.all(np.isfinite(pts)):
        raise EmptyObject("the encoder needs a non-empty, finite point cloud")
    p, s = params.arrays, params.shape
    c = pts.mean(axis=0)
    local = pts - c
    A1 = local @ p["W1"] + p["b1"]
    H1 = _relu(A1)
    A2 = H1 @ p["W2"] + p["b2"]
    H2 = _relu(A2)
    arg = np.argmax(H2, axis=0)
    g = H2[arg, np.arange(H2.shape[1])]
    u = np.concatenate([g, c / s.centroid_scale])
    A3 = u @ p["W3"] + p["b3"]
    T = _relu(A3)
    x = c + T @ p["Wp"] + p["bp"]
    z = T @ p["Wz"] + p["bz"]
    th = np.tanh(T @ p["Wy"] + p["by"])
    res = (np.pi / s.n_bins) * th
    yaws = TWO_PI * np.arange(s.n_bins) / s.n_bins + res
    # the auxiliary head sees a detached copy of u
    A4 = u @ p["Wa1"] + p["ba1"]
    H4 = _relu(A4)
    x_aux = c + H4 @ p["Wa2"] + p["ba2"]
    cache = ForwardCache(local, c, A1, H1, A2, arg, u, A3, T, th, A4, H4)
    return EncoderOutput(x, z, yaws, res, x_aux, cache)


def backward(params: EncoderParams, out: EncoderOutput, g_x, g_yaw, g_z, g_aux) -> dict:
    """Parameter gradients given dL/dx (3), dL/dyaw (per bin), dL/dz and dL/dx_aux."""
    p, s, c = params.arrays, params.shape, out.cache
    g_x = np.asarray(g_x, dtype=np.float64)
    g_yaw = np.asarray(g_yaw, dtype=np.float64)
    g_z = np.asarray(g_z, dtype=np.float64)
    g_aux = np.asarray(g_aux, dtype=np.float64)
    grads = {}
    T = c.T
    grads["Wp"] = np.outer(T, g_x)
    grads["bp"] = g_x.copy()
    grads["Wz"] = np.outer(T, g_z)
    grads["bz"] = g_z.copy()
    d_ry = g_yaw * (np.pi / s.n_bins) * (1.0 - c.tanh_y ** 2)
    grads["Wy"] = np.outer(T, d_ry)
    grads["by"] = d_ry
    dT = p["Wp"] @ g_x + p["Wz"] @ g_z + p["Wy"] @ d_ry
    dA3 = dT * (c.A3 > 0)
    grads["W3"] = np.outer(c.u, dA3)
    grads["b3"] = dA3
    dg = (p["W3"] @ dA3)[:s.h2]
    dA2 = np.zeros_like(c.A2)
    cols = np.arange(s.h2)
    dA2[c.pool_arg, cols] = dg * (c.A2[c.pool_arg, cols] > 0)
    grads["W2"] = c.H1.T @ dA2
    grads["b2"] = dA2.sum(axis=0)
    dA1 = (dA2 @ p["W2"].T) * (c.A1 > 0)
    grads["W1"] = c.points.T @ dA1
    grads["b1"] = dA1.sum(axis=0)
    # auxiliary head: stops at its own input
    grads["Wa2"] = np.outer(c.H4, g_aux)
    grads["ba2"] = g_aux.copy()
    dA4 = (p["Wa2"] @ g_aux) * (c.A4 > 0)
    grads["Wa1"] = np.outer(c.u, dA4)
    grads["ba1"] = dA4
    return grads


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    n_bins: int = 8
    learn_shape: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    shape: EncoderShape | None = None
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be non-negative and batch_size positive")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.n_bins < 1 or self.threads < 1:
            raise ValueError("n_bins and threads must be positive")

    def encoder_shape(self, n_bases: int) -> EncoderShape:
        if self.shape is not None:
            return self.shape
        return EncoderShape(n_bins=self.n_bins, n_bases=n_bases)


@dataclass
class SampleResult:
    breakdown: LossBreakdown | None
    best_bin: int
    grads: dict | None
    error: str | None = None


def decode(params: EncoderParams, problem: InstanceProblem, learn_shape: bool = False,
           out: EncoderOutput | None = None):
    """Evaluate all hypotheses; returns (output, per-bin losses, winning bin, winner evaluation)."""
    out = forward(params, problem.points) if out is None else out
    if not learn_shape:
        out.z = np.zeros_like(out.z)
    states = out.hypotheses()
    losses = []
    for st in states:
        ev = problem.evaluate(st, with_grad=False)
        losses.append(ev.breakdown.total if np.isfinite(ev.breakdown.total) else math.inf)
    _, b = hindsight(losses)
    return out, losses, b, states[b]


def sample_gradient(params: EncoderParams, problem: InstanceProblem, learn_shape: bool = False) -> SampleResult:
    """Hindsight loss of one instance and its gradient w.r.t. every parameter."""
    try:
        out, losses, b, state = decode(params, problem, learn_shape)
        if not np.isfinite(losses[b]):
            return SampleResult(None, b, None, "non-finite loss in every bin")
        ev = problem.evaluate(state, with_grad=True)
        if not ev.finite():
            return SampleResult(None, b, None, "non-finite gradient")
    except (EmptyObject, FloatingPointError, ValueError) as exc:
        return SampleResult(None, -1, None, str(exc))
    g_yaw = np.zeros(params.shape.n_bins)
    g_yaw[b] = ev.grad_yaw
    g_z = ev.grad_z if learn_shape else np.zeros_like(ev.grad_z)
    grads = backward(params, out, ev.grad_x, g_yaw, g_z, ev.grad_x_aux)
    return SampleResult(ev.breakdown, b, grads)


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)  # (epoch, mean loss, n_used, n_skipped)

    def to_csv(self) -> str:
        lines = ["epoch,mean_total,n_used,n_skipped"]
        lines += [f"{e},{m!r},{u},{k}" for e, m, u, k in self.rows]
        return "\n".join(lines) + "\n"

    @property
    def final_loss(self) -> float:
        return self.rows[-1][1] if self.rows else math.nan


def train(problems, cfg: TrainConfig = TrainConfig(), params: EncoderParams | None = None,
          callback=None) -> tuple[EncoderParams, TrainHistory]:
    """Minibatch Adam on the mean hindsight loss.

    Samples are visited in a seeded permutation per epoch; per-sample
    gradients may be computed on several threads but are always summed in
    sample order.
    """
    problems = list(problems)
    if not problems:
        raise ValueError("training needs at least one instance")
    if any(p.cfg.pose_cd is False for p in problems):
        log.info("training with plain chamfer on the main position")
    n_bases = problems[0].n_bases
    params = EncoderParams.init(cfg.encoder_shape(n_bases), cfg.seed) if params is None else params.copy()
    rng = np.random.default_rng(cfg.seed)
    flat = params.flat()
    opt = Adam(np.full(flat.shape, cfg.lr))
    history = TrainHistory()
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(problems))
            total, used, skipped = 0.0, 0, 0
            for start in range(0, len(order), cfg.batch_size):
                batch = [problems[i] for i in order[start:start + cfg.batch_size]]
                snapshot = params.copy()
                if pool is None:
                    results = [sample_gradient(snapshot, pb, cfg.learn_shape) for pb in batch]
                else:
                    results = list(pool.map(lambda pb: sample_gradient(snapshot, pb, cfg.learn_shape), batch))
                acc, n_ok = None, 0
                for res in results:
                    if res.grads is None:
                        skipped += 1
                        log.warning("epoch %d: skipped a sample (%s)", epoch, res.error)
                        continue
                    g = np.concatenate([res.grads[k].reshape(-1) for k in PARAM_NAMES])
                    acc = g if acc is None else acc + g
                    n_ok += 1
                    total += res.breakdown.total
                if n_ok == 0:
                    continue
                used += n_ok
                if cfg.lr > 0:
                    flat = opt.step(flat, acc / n_ok)
                    params.set_flat(flat)
            history.rows.append((epoch, total / used if used else math.nan, used, skipped))
            if callback is not None:
                callback(epoch, params, history)
    finally:
        if pool is not None:
            pool.shutdown()
    return params, history


@dataclass
class Prediction:
    state: FitState
    breakdown: LossBreakdown
    per_bin_losses: list
    best_bin: int


def predict_instance(params: EncoderParams, problem: InstanceProblem, learn_shape: bool = False) -> Prediction:
    """Encoder hypotheses for one instance, resolved by the hindsight minimum."""
    out, losses, b, state = decode(params, problem, learn_shape)
    bd = problem.evaluate(state, with_grad=False).breakdown
    return Prediction(state, bd, losses, b)


class PoseEncoder(BaseEstimator):
    """Estimator wrapper around :func:`train` and :func:`predict_instance`.

    ``X`` is a list of :class:`InstanceProblem` objects (the losses need the
    mask, depth and frames, not only the point cloud).
    """

    def __init__(self, epochs: int = 30, batch_size: int = 8, lr: float = 1e-3, n_bins: int = 8,
                 learn_shape: bool = False, seed: int = 0, threads: int = 1):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.n_bins = n_bins
        self.learn_shape = learn_shape
        self.seed = seed
        self.threads = threads

    def _config(self, weights: LossWeights) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.seed, self.n_bins, self.learn_shape,
                           weights, None, self.threads)

    def fit(self, X, y=None):
        X = list(X)
        if not X:
            raise ValueError("PoseEncoder.fit needs at least one instance")
        self.params_, self.history_ = train(X, self._config(X[0].weights))
        return self

    def predict(self, X) -> list[Prediction]:
        if not hasattr(self, "params_"):
            raise RuntimeError("PoseEncoder is not fitted")
        return [predict_instance(self.params_, pb, self.learn_shape) for pb in X]

