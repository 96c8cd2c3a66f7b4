"""Training: masked reprojection loss, Adam, and iterative scale correction."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import load_params, save_params
from .diffmath import Tape, Tensor, mean, mul
from .errors import ConfigError, DegenerateSpectrum, NonFiniteLoss
from .geometry import Camera, as_camera
from .metrics import bone_lengths
from .model import ModelConfig, ModelParams, forward
from .normalization import ObservationBatch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.95
    decay_every: int = 50_000
    batch_size: int = 128
    iterations: int = 400_000
    seed: int = 0
    camera: str = "ortho"
    dict_sizes: tuple = (512, 256, 128, 64, 32, 16, 8)
    lam_init: float = 1e-3
    train_lambda: bool = True
    relu_encoder: bool = False
    code_level: str = "phi1"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scale_correct: int = 0
    scale_correct_iters: int | None = None
    cold_start: bool = False
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        self.dict_sizes = tuple(int(k) for k in self.dict_sizes)
        for name in ("lr", "lr_decay", "decay_every", "batch_size", "beta2", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.iterations < 0 or self.scale_correct < 0:
            raise ConfigError("iterations and scale_correct must be nonnegative")
        as_camera(self.camera)

    def model_config(self, P: int) -> ModelConfig:
        return ModelConfig(P, self.dict_sizes, self.camera, self.relu_encoder, self.code_level)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dict_sizes"] = list(self.dict_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def learning_rate(config: TrainConfig, iteration: int) -> float:
    return config.lr * config.lr_decay ** (iteration // config.decay_every)


@dataclass
class TrainState:
    params: ModelParams
    m: list
    v: list
    iteration: int = 0
    history: list = field(default_factory=list)      # (iteration, loss, lr)
    zero_codes: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainState":
        return cls(params, [np.zeros_like(t.data) for t in params.tensors()],
                   [np.zeros_like(t.data) for t in params.tensors()])

    def save(self, path, config: TrainConfig) -> None:
        extra = {}
        for name, m, v in zip(self.params.names(), self.m, self.v):
            extra[f"adam_m/{name}"] = m
            extra[f"adam_v/{name}"] = v
        meta = {"iteration": self.iteration, "zero_codes": self.zero_codes,
                "train_config": config.to_dict()}
        if self.history:
            extra["history"] = np.asarray(self.history, dtype=np.float64)
        save_params(path, self.params, meta, extra)

    @classmethod
    def load(cls, path) -> tuple["TrainState", TrainConfig | None]:
        params, manifest, arrays = load_params(path)
        names = params.names()
        m = [arrays.get(f"adam_m/{n}", np.zeros_like(t.data)) for n, t in zip(names, params.tensors())]
        v = [arrays.get(f"adam_v/{n}", np.zeros_like(t.data)) for n, t in zip(names, params.tensors())]
        meta = manifest.get("meta", {})
        hist = [tuple(row) for row in arrays["history"].tolist()] if "history" in arrays else []
        hist = [(int(i), l, r) for i, l, r in hist]
        cfg = TrainConfig.from_dict(meta["train_config"]) if "train_config" in meta else None
        return cls(params, m, v, int(meta.get("iteration", 0)), hist,
                   int(meta.get("zero_codes", 0))), cfg


def loss(batch: ObservationBatch, params: ModelParams, return_stats: bool = False):
    """Mean over samples of ``|M W~ - M D~ Psi~|_F``.

    Fully occluded samples are dropped before normalisation and, like samples
    whose code vanishes, contribute zero to the mean.
    """
    n = len(batch)
    if n == 0:
        raise ConfigError("empty batch")
    seen = batch.vis.sum(axis=1) > 0
    stats = {"occluded": int(n - seen.sum()), "zero_codes": 0}
    if not np.any(seen):
        warnings.warn("every sample in the batch is fully occluded; loss is zero", RuntimeWarning)
        out = Tensor(0.0)
        return (out, stats) if return_stats else out
    sub_batch = batch if np.all(seen) else batch[np.flatnonzero(seen)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateSpectrum)
        warnings.simplefilter("ignore", RuntimeWarning)
        res = forward(sub_batch, params)
    stats["zero_codes"] = int((~res.valid).sum())
    per_sample = res.sample_loss
    if not np.all(res.valid):
        per_sample = mul(per_sample, res.valid.astype(np.float64))
    total = mean(per_sample)
    if sub_batch is not batch:
        total = total * (len(sub_batch) / n)
    return (total, stats) if return_stats else total


class _Shuffler:
    """Epoch permutations derived from ``(seed, epoch)``; independent of resume point."""

    def __init__(self, n: int, seed: int):
        self.n, self.seed = n, seed
        self._cache = {}

    def perm(self, epoch: int) -> np.ndarray:
        p = self._cache.get(epoch)
        if p is None:
            if len(self._cache) > 4:
                self._cache.clear()
            p = np.random.default_rng([self.seed, epoch]).permutation(self.n)
            self._cache[epoch] = p
        return p

    def batch(self, iteration: int, size: int) -> np.ndarray:
        size = min(size, self.n)
        pos = iteration * size + np.arange(size)
        epochs, offs = np.divmod(pos, self.n)
        return np.array([self.perm(e)[o] for e, o in zip(epochs, offs)]) if epochs[0] != epochs[-1] \
            else self.perm(int(epochs[0]))[offs]


def adam_update(state: TrainState, grads, lr: float, config: TrainConfig) -> ModelParams:
    t = state.iteration + 1
    b1, b2 = config.beta1, config.beta2
    new = []
    for i, (p, g) in enumerate(zip(state.params.tensors(), grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / (1 - b1 ** t)
        vhat = state.v[i] / (1 - b2 ** t)
        new.append(p.data - lr * mhat / (np.sqrt(vhat) + config.eps))
    return state.params.replace(new)


def train_step(state: TrainState, batch: ObservationBatch, config: TrainConfig) -> float:
    params = state.params
    try:
        with Tape() as tape:
            total, stats = loss(batch, params, return_stats=True)
    except np.linalg.LinAlgError as exc:
        # eigen/SVD solvers fail on inf or nan entries
        raise NonFiniteLoss(f"decomposition failed at iteration {state.iteration}: {exc}") from exc
    value = float(total.data)
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss became {value} at iteration {state.iteration}")
    grads = tape.gradient(total, params.tensors())
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteLoss(f"non-finite gradient at iteration {state.iteration}")
    if not config.train_lambda:
        grads = [np.zeros_like(g) if n.startswith("lambda") else g
                 for n, g in zip(params.names(), grads)]
    lr = learning_rate(config, state.iteration)
    state.params = adam_update(state, grads, lr, config)
    state.iteration += 1
    state.zero_codes += stats["zero_codes"]
    return value


def train(data: ObservationBatch, config: TrainConfig, state: TrainState | None = None,
          checkpoint_path=None, until: int | None = None, progress=None) -> TrainState:
    """Run Adam until ``until`` (default ``config.iterations``) total iterations.

    Passing a previously saved ``state`` resumes the same trajectory. On a
    non-finite loss the last good state is written to ``checkpoint_path`` (if
    given) and :class:`NonFiniteLoss` is raised.
    """
    if len(data) == 0:
        raise ConfigError("dataset is empty")
    P = data.W.shape[1]
    if state is None:
        params = ModelParams.initialize(config.model_config(P), config.seed, config.lam_init)
        state = TrainState.fresh(params)
    if state.params.config.camera is not as_camera(config.camera):
        raise ConfigError("state and config disagree on the camera model")
    stop = config.iterations if until is None else until
    shuffler = _Shuffler(len(data), config.seed)
    running, count = 0.0, 0
    while state.iteration < stop:
        it = state.iteration
        idx = shuffler.batch(it, config.batch_size)
        try:
            value = train_step(state, data[idx], config)
        except NonFiniteLoss:
            if checkpoint_path is not None:
                state.save(checkpoint_path, config)
            raise
        running += value
        count += 1
        if state.iteration % config.log_every == 0 or state.iteration == stop:
            avg = running / count
            state.history.append((state.iteration, avg, learning_rate(config, it)))
            running, count = 0.0, 0
            if progress is not None:
                progress(state)
            log.debug("iter %d loss %.6g", state.iteration, avg)
        if checkpoint_path is not None and config.checkpoint_every and \
                state.iteration % config.checkpoint_every == 0:
            state.save(checkpoint_path, config)
    if checkpoint_path is not None:
        state.save(checkpoint_path, config)
    return state


def write_loss_csv(state: TrainState, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "lr"])
        for it, l, lr in state.history:
            w.writerow([int(it), repr(float(l)), repr(float(lr))])


def reconstruct(data: ObservationBatch, params: ModelParams, chunk: int = 512):
    """Rotated shapes ``S R`` (``(N, P, 3)``, camera axes, no translation) and a
    validity mask that is False where the code vanished."""
    shapes, valid = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateSpectrum)
        warnings.simplefilter("ignore", RuntimeWarning)
        for start in range(0, len(data), chunk):
            part = data[np.arange(start, min(start + chunk, len(data)))]
            seen = part.vis.sum(axis=1) > 0
            S = np.zeros((len(part), params.config.P, 3))
            ok = np.zeros(len(part), dtype=bool)
            if np.any(seen):
                res = forward(part[np.flatnonzero(seen)], params)
                S[seen] = res.S.data @ res.fact.R
                ok[seen] = res.valid
            shapes.append(S)
            valid.append(ok)
    return np.concatenate(shapes), np.concatenate(valid)


def scale_statistic(shapes, skeleton=None) -> np.ndarray:
    if skeleton:
        return np.array([np.mean(bone_lengths(s, skeleton)) for s in shapes])
    centred = shapes - shapes.mean(axis=1, keepdims=True)
    return np.linalg.norm(centred, axis=(1, 2))


def scale_correct(data: ObservationBatch, state: TrainState, config: TrainConfig,
                  rounds: int | None = None, iterations: int | None = None,
                  skeleton=None, checkpoint_path=None):
    """Alternate between rescaling every sample's ``t_z`` and retraining.

    Each round reconstructs all samples, multiplies each ``t_z`` by
    ``median(stat) / stat`` (stat = Frobenius norm of the centred shape, or
    mean bone length when ``skeleton`` is given), then continues training
    for ``iterations`` more steps (from scratch if ``config.cold_start``).
    Returns the corrected batch and the final state.
    """
    if as_camera(config.camera) is not Camera.PERSPECTIVE:
        raise ConfigError("scale correction applies to the perspective camera only")
    rounds = config.scale_correct if rounds is None else rounds
    if iterations is None:
        iterations = config.scale_correct_iters or config.iterations
    tz = np.array(data.t_z, dtype=np.float64)
    for r in range(rounds):
        shapes, valid = reconstruct(ObservationBatch(data.W, data.vis, tz), state.params)
        stat = scale_statistic(shapes, skeleton)
        ok = valid & (stat > 0)
        if not np.any(ok):
            log.warning("scale correction round %d: no usable reconstruction", r + 1)
            break
        target = np.median(stat[ok])
        tz = np.where(ok, tz * target / np.where(ok, stat, 1.0), tz)
        data = ObservationBatch(data.W, data.vis, tz)
        if config.cold_start:
            params = ModelParams.initialize(state.params.config, config.seed, config.lam_init)
            state = TrainState.fresh(params)
            state = train(data, config, state, checkpoint_path, until=iterations)
        else:
            state = train(data, config, state, checkpoint_path, until=state.iteration + iterations)
        log.info("scale correction round %d done", r + 1)
    return data, state
