"""Inference-time reward guidance

The velocity of a pretrained field is shifted along the gradient of a
noisy-latent reward::

    v_tilde = v - w*min(t/(1 - t), cap)*grad_r(x_t, t)

Guidance is applied inside :func:`flowalign.flow.euler_sample` after the CFG
combination and is skipped at t = 1, where the factor is undefined.
"""

import dataclasses
import logging

import numpy
import pandas

from . import ConfigurationError, DomainError, NumericError
from .flow import FlowSchedule, euler_sample
from .io import atomic_write_text
from .reward import RewardWeights

logger = logging.getLogger(__name__)

FORMS = ("shift", "mix")


@dataclasses.dataclass(frozen=True)
class GuidanceSpec:
    """How strongly and towards which reward dimensions to steer

    ``form="mix"`` selects the convex-combination field of
    :func:`guided_velocity_mix`; it is experimental.
    """
    weights: RewardWeights = RewardWeights()
    w_scale: float = 1.0
    cfg_scale: float = 1.0
    factor_cap: float = 20.0
    form: str = "shift"

    def __post_init__(self):
        if self.w_scale < 0:
            raise ConfigurationError(f"w_scale must be non-negative, got {self.w_scale}")
        if not self.factor_cap > 0:
            raise ConfigurationError(f"factor_cap must be positive, got {self.factor_cap}")
        if self.form not in FORMS:
            raise ConfigurationError(f"unknown guidance form '{self.form}', expected one of {FORMS}")


def _check_time(t):
    t = numpy.asarray(t, dtype=numpy.float64)
    if (t >= 1).any() or (t < 0).any():
        raise DomainError(f"guidance needs t in [0, 1), got {t}")
    return t


def guidance_factor(t, factor_cap=20.0):
    """``min(t/(1 - t), factor_cap)``"""
    t = _check_time(t)
    return numpy.minimum(t/(1 - t), factor_cap)


def guided_velocity(v, grad_r, t, w_scale, factor_cap=20.0):
    return numpy.asarray(v) - w_scale*guidance_factor(t, factor_cap)*numpy.asarray(grad_r)


def guided_velocity_mix(v, x_t, grad_r, t, w_scale):
    """``(1 - w)*v + w*(x_t/(t - 1) + t/(t - 1)*grad_r)``"""
    t = _check_time(t)
    reward_field = numpy.asarray(x_t)/(t - 1) + t/(t - 1)*numpy.asarray(grad_r)
    return (1 - w_scale)*numpy.asarray(v) + w_scale*reward_field


@dataclasses.dataclass
class GuidanceTrace:
    """Per-step diagnostics: batch-mean reward, mean gradient norm and the applied factor"""
    records: list = dataclasses.field(default_factory=list)

    def append(self, step, t, reward, grad_norm, factor):
        self.records.append({"step": int(step), "t": float(t), "reward": float(reward),
                             "grad_norm": float(grad_norm), "factor": float(factor)})

    def __len__(self):
        return len(self.records)

    def to_frame(self):
        return pandas.DataFrame(self.records, columns=["step", "t", "reward", "grad_norm", "factor"])

    def write_csv(self, path):
        return atomic_write_text(path, self.to_frame().to_csv(index=False))


def nrg_sample(policy, noisy_rm, spec, schedule=FlowSchedule(), y=0, seed=0, progress=False):
    """Euler sampling with reward guidance

    :param policy: velocity field
    :param noisy_rm: reward with ``weighted_reward(x, y, t, weights) -> (reward, grad)``
    :param spec: :class:`GuidanceSpec`
    :param schedule: the time grid
    :param y: condition class per sample
    :param seed: int or per-sample seeds, shared with :func:`~flowalign.flow.euler_sample`
    :return: ``(samples, trace)``
    """
    trace = GuidanceTrace()
    y = numpy.atleast_1d(numpy.asarray(y, dtype=int))

    def hook(step, x, t, v):
        if t == 1:
            return v
        reward, grad = noisy_rm.weighted_reward(x, y, t, spec.weights)
        if not numpy.isfinite(grad).all():
            raise NumericError(f"non-finite reward gradient at step {step} (t={t:.4g})")
        factor = guidance_factor(t, spec.factor_cap)
        trace.append(step, t, numpy.mean(reward), numpy.mean(numpy.linalg.norm(grad, axis=1)), factor)
        if spec.w_scale == 0:
            return v
        if spec.form == "mix":
            return guided_velocity_mix(v, x, grad, t, spec.w_scale)
        return guided_velocity(v, grad, t, spec.w_scale, spec.factor_cap)

    samples = euler_sample(policy, y, schedule, spec.cfg_scale, seed, velocity_hook=hook, progress=progress)
    return samples, trace
