"""Rectified flow: interpolation, flow-matching loss and the Euler sampler

Time runs from data to noise: ``x_t = (1 - t)*x0 + t*x1`` with data x0 at t=0
and standard normal noise x1 at t=1. Sampling therefore integrates from t=1
down to t=0. Many references use the opposite convention.

A velocity field is any callable ``field(x, t, y, dropped)`` returning an
array shaped like x, with a ``sample_dim`` attribute. :class:`VelocityNet`
is the trainable one; :mod:`flowalign.analytic` holds closed-form ones.
"""

import dataclasses
import logging

import numpy

from . import ConfigurationError, DomainError, InputError, NumericError, ShapeError
from .io import read_jsonl, write_jsonl
from .netcore import NetSpec, fit, load_checkpoint, net_grads, net_init, save_checkpoint
from .toyworld import condition_embedding

logger = logging.getLogger(__name__)

TIME_FREQUENCIES = numpy.pi*numpy.array([1.0, 2.0, 4.0, 8.0])
TIME_FEATURES = 2*TIME_FREQUENCIES.size


@dataclasses.dataclass(frozen=True)
class FlowSchedule:
    """Uniform sampling grid from t=1 (noise) to t=0 (data)"""
    n_steps: int = 50

    def __post_init__(self):
        if int(self.n_steps) < 2:
            raise ConfigurationError(f"n_steps must be at least 2, got {self.n_steps}")

    @property
    def grid(self):
        return numpy.linspace(1.0, 0.0, self.n_steps + 1)

    def alpha(self, t):
        return 1 - numpy.asarray(t)

    def sigma(self, t):
        return numpy.asarray(t)


def time_embedding(t, n=None):
    """Sinusoidal features of t, shape (n, 8)"""
    t = numpy.asarray(t, dtype=numpy.float64)
    if t.ndim == 0:
        t = numpy.full(1 if n is None else n, float(t))
    angles = t[:, None]*TIME_FREQUENCIES
    return numpy.hstack([numpy.sin(angles), numpy.cos(angles)])


def _check_same_shape(a, b, what):
    a = numpy.asarray(a, dtype=numpy.float64)
    b = numpy.asarray(b, dtype=numpy.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def _per_sample(t, x):
    """Broadcast a scalar or per-sample t against x"""
    t = numpy.asarray(t, dtype=numpy.float64)
    if t.ndim == 0 or x.ndim <= 1:
        return t
    if t.shape != x.shape[:1]:
        raise ShapeError(f"{x.shape[0]} samples but t has shape {t.shape}")
    return t.reshape((-1,) + (1,)*(x.ndim - 1))


def interpolate(x0, x1, t):
    x0, x1 = _check_same_shape(x0, x1, "interpolate")
    tb = _per_sample(t, x0)
    if ((tb < 0) | (tb > 1)).any():
        raise DomainError("interpolation time must lie in [0, 1]")
    return (1 - tb)*x0 + tb*x1


def target_velocity(x0, x1):
    x0, x1 = _check_same_shape(x0, x1, "target_velocity")
    return x1 - x0


def predict_terminal_noise(x_t, t, v_pred):
    """Noise implied by a velocity prediction: ``x_t + (1 - t)*v_pred``

    Squared noise error then equals ``(1 - t)**2`` times the squared velocity
    error, which is what makes noise-space and velocity-space losses
    interchangeable.
    """
    x_t, v_pred = _check_same_shape(x_t, v_pred, "predict_terminal_noise")
    tb = _per_sample(t, x_t)
    if (tb >= 1).any():
        raise DomainError("the noise prediction is undefined at t = 1")
    return x_t + (1 - tb)*v_pred


def cfg_velocity(v_cond, v_uncond, s):
    v_cond, v_uncond = _check_same_shape(v_cond, v_uncond, "cfg_velocity")
    return v_uncond + s*(v_cond - v_uncond)


@dataclasses.dataclass(frozen=True)
class FlowBatch:
    x0: numpy.ndarray
    x1: numpy.ndarray
    t: numpy.ndarray
    y: numpy.ndarray
    dropped: numpy.ndarray = None

    def __post_init__(self):
        x0, x1 = _check_same_shape(self.x0, self.x1, "FlowBatch")
        if x0.ndim != 2 or x0.shape[0] == 0:
            raise InputError("a flow batch needs a non-empty (n, dim) array of samples")
        n = x0.shape[0]
        t = numpy.broadcast_to(numpy.asarray(self.t, dtype=numpy.float64), (n,))
        y = numpy.broadcast_to(numpy.asarray(self.y, dtype=int), (n,))
        dropped = numpy.zeros(n, dtype=bool) if self.dropped is None else \
            numpy.broadcast_to(numpy.asarray(self.dropped, dtype=bool), (n,))
        for name, value in (("x0", x0), ("x1", x1), ("t", t), ("y", y), ("dropped", dropped)):
            object.__setattr__(self, name, value)

    @classmethod
    def draw(cls, x0, y, rng, drop_prob=0.0):
        """Batch with t ~ U(0, 1), fresh noise and condition dropout"""
        x0 = numpy.atleast_2d(numpy.asarray(x0, dtype=numpy.float64))
        n = x0.shape[0]
        t = rng.uniform(size=n)
        x1 = rng.standard_normal(x0.shape)
        dropped = rng.uniform(size=n) < drop_prob
        return cls(x0, x1, t, y, dropped)

    def __len__(self):
        return self.x0.shape[0]

    @property
    def x_t(self):
        return interpolate(self.x0, self.x1, self.t)

    @property
    def v_target(self):
        return target_velocity(self.x0, self.x1)


class VelocityNet:
    """Conditional velocity field on flattened trajectories

    The network input is ``[x_t, time features, condition features, uncond flag]``.
    """

    def __init__(self, net, sample_dim, n_classes):
        expected = sample_dim + TIME_FEATURES + n_classes + 3
        if net.spec.n_inputs != expected or net.spec.n_outputs != sample_dim:
            raise ShapeError(f"{net!r} does not map {expected} inputs to {sample_dim} outputs")
        self.net = net
        self.sample_dim = sample_dim
        self.n_classes = n_classes

    @property
    def params(self):
        return self.net.params

    def with_params(self, params):
        return VelocityNet(self.net.with_params(params), self.sample_dim, self.n_classes)

    def features(self, x, t, y, dropped=None):
        x = numpy.atleast_2d(numpy.asarray(x, dtype=numpy.float64))
        if x.shape[1] != self.sample_dim:
            raise ShapeError(f"samples of dimension {self.sample_dim} expected, got {x.shape}")
        n = x.shape[0]
        y = numpy.broadcast_to(numpy.asarray(y, dtype=int), (n,))
        return numpy.hstack([x, time_embedding(t, n), condition_embedding(y, self.n_classes, dropped)])

    def __call__(self, x, t, y, dropped=None):
        return self.net(self.features(x, t, y, dropped))

    def grads(self, x, t, y, upstream, dropped=None):
        """Parameter gradient and the gradient with respect to x only"""
        param_grad, input_grad = net_grads(self.net, self.features(x, t, y, dropped), upstream)
        return param_grad, input_grad[:, :self.sample_dim]

    def __repr__(self):
        return f"VelocityNet({self.net!r}, classes={self.n_classes})"


def velocity_net_init(sample_dim, n_classes, hidden=(128, 128), activation="silu", seed=0):
    widths = (sample_dim + TIME_FEATURES + n_classes + 3,) + tuple(hidden) + (sample_dim,)
    return VelocityNet(net_init(NetSpec(widths, activation, seed)), sample_dim, n_classes)


def save_velocity(path, model, **lineage):
    header = dict(lineage, role="velocity", sample_dim=model.sample_dim, n_classes=model.n_classes)
    return save_checkpoint(path, [model.net], header)


def load_velocity(path):
    """Load a velocity field saved by :func:`save_velocity`, returns ``(model, header)``"""
    nets, header = load_checkpoint(path)
    if header.get("role") != "velocity" or len(nets) != 1:
        raise InputError(f"'{path}' is not a velocity checkpoint")
    return VelocityNet(nets[0], header["sample_dim"], header["n_classes"]), header


def velocity_errors(model, x_t, t, y, v_target, dropped=None):
    """Per-sample squared velocity error and the residual"""
    residual = model(x_t, t, y, dropped) - v_target
    return numpy.sum(residual**2, axis=1), residual


def weighted_fm_loss(model, batch, weights):
    """``mean(weights * ||v_target - v(x_t)||^2)`` and its parameter gradient"""
    weights = numpy.broadcast_to(numpy.asarray(weights, dtype=numpy.float64), (len(batch),))
    errors, residual = velocity_errors(model, batch.x_t, batch.t, batch.y, batch.v_target, batch.dropped)
    loss = float(numpy.mean(weights*errors))
    if not numpy.isfinite(loss):
        raise NumericError(f"flow matching loss is {loss}")
    upstream = 2*weights[:, None]*residual/len(batch)
    param_grad, _ = model.grads(batch.x_t, batch.t, batch.y, upstream, batch.dropped)
    return loss, param_grad


def fm_loss(model, batch):
    """Flow matching loss: squared error summed over coordinates, averaged over the batch"""
    return weighted_fm_loss(model, batch, 1.0)


def sample_noise(conditions, seeds, dim):
    """Initial noise, one independent stream per (seed, condition) key"""
    conditions = numpy.atleast_1d(numpy.asarray(conditions, dtype=int))
    seeds = numpy.broadcast_to(numpy.asarray(seeds, dtype=numpy.int64), conditions.shape)
    x = numpy.empty((conditions.size, dim))
    for i, (seed, cond) in enumerate(zip(seeds, conditions)):
        x[i] = numpy.random.default_rng([int(seed), int(cond)]).standard_normal(dim)
    return x


def field_velocity(field, x, t, y, cfg_scale=1.0):
    """Velocity with classifier-free guidance applied when cfg_scale != 1"""
    if cfg_scale == 1:
        return field(x, t, y, False)
    return cfg_velocity(field(x, t, y, False), field(x, t, y, True), cfg_scale)


def euler_sample(field, y, schedule=FlowSchedule(), cfg_scale=1.0, seed=0, x1=None,
                 velocity_hook=None, progress=False):
    """Integrate from noise at t=1 to data at t=0 with explicit Euler steps

    :param field: velocity field, see the module docstring
    :param y: condition class per sample
    :param schedule: the time grid
    :param cfg_scale: classifier-free guidance scale, 1 disables the unconditional branch
    :param seed: int or per-sample seeds for the initial noise
    :param x1: explicit initial noise, overrides `seed`
    :param velocity_hook: optional ``hook(step, x, t, v) -> v`` applied after CFG
    :param progress: display progress bar
    """
    y = numpy.atleast_1d(numpy.asarray(y, dtype=int))
    if x1 is None:
        x = sample_noise(y, seed, field.sample_dim)
    else:
        x = numpy.array(x1, dtype=numpy.float64).reshape(y.size, field.sample_dim)
    grid = schedule.grid
    steps = range(len(grid) - 1)
    if progress:
        from tqdm.auto import tqdm
        steps = tqdm(steps, desc="sampling")
    for i in steps:
        t = grid[i]
        v = field_velocity(field, x, t, y, cfg_scale)
        if velocity_hook is not None:
            v = velocity_hook(i, x, t, v)
        x = x - (grid[i] - grid[i + 1])*v
        if not numpy.isfinite(x).all():
            raise NumericError(f"sampler state became non-finite at step {i} (t={t:.4g})")
    return x


@dataclasses.dataclass(frozen=True)
class FlowConfig:
    hidden: tuple = (128, 128)
    activation: str = "silu"
    lr: float = 1e-3
    steps: int = 3000
    batch_size: int = 128
    cond_dropout: float = 0.1
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not 0 <= self.cond_dropout < 1:
            raise ConfigurationError("cond_dropout must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigurationError("batch_size must be positive and steps non-negative")


def train_flow(samples, conditions, n_classes, cfg=FlowConfig(), model=None, progress=False):
    """Pretrain a velocity field by flow matching

    :param samples: array (n, sample_dim) of flattened trajectories
    :param conditions: condition class per sample
    :param n_classes: number of condition classes
    :param model: optional starting model; a fresh one is initialised from ``cfg.seed`` otherwise
    :return: the trained model and a DataFrame training curve (step, loss, grad_norm)
    """
    samples = numpy.asarray(samples, dtype=numpy.float64)
    samples = samples.reshape(samples.shape[0], -1)
    conditions = numpy.asarray(conditions, dtype=int)
    if samples.shape[0] == 0:
        raise InputError("cannot train a flow on an empty corpus")
    if model is None:
        model = velocity_net_init(samples.shape[1], n_classes, cfg.hidden, cfg.activation, cfg.seed)
    rng = numpy.random.default_rng([cfg.seed, 1])

    def batches():
        for _ in range(cfg.steps):
            idx = rng.integers(samples.shape[0], size=min(cfg.batch_size, samples.shape[0]))
            yield FlowBatch.draw(samples[idx], conditions[idx], rng, cfg.cond_dropout)

    return fit(model, fm_loss, batches(), cfg.lr, cfg.log_every, "flow matching", progress)


# Sample dumps

def sample_records(samples, conditions, seeds):
    samples = numpy.asarray(samples, dtype=numpy.float64)
    conditions = numpy.broadcast_to(numpy.asarray(conditions, dtype=int), samples.shape[:1])
    seeds = numpy.broadcast_to(numpy.asarray(seeds, dtype=numpy.int64), samples.shape[:1])
    return [{"condition": int(c), "frames": s.ravel().tolist(), "seed": int(seed)}
            for s, c, seed in zip(samples, conditions, seeds)]


def write_samples(path, samples, conditions, seeds):
    return write_jsonl(path, sample_records(samples, conditions, seeds))


def read_samples(path):
    """Inverse of :func:`write_samples`: ``(samples, conditions, seeds)``"""
    rows = read_jsonl(path)
    if not rows:
        raise InputError(f"'{path}' holds no samples")
    return (numpy.array([r["frames"] for r in rows]),
            numpy.array([r["condition"] for r in rows]),
            numpy.array([r["seed"] for r in rows]))
