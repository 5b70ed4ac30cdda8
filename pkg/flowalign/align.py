"""Training-time alignment of a velocity field from preference pairs

Three methods share one training loop:

* ``sft``: flow matching on the chosen samples only
* ``rwr``: flow matching on both samples weighted by ``exp(reward)``
* ``dpo``: preference optimisation against a frozen reference field

Each DPO pair uses one (t, noise) draw for both the chosen and the rejected
branch.
"""

import dataclasses
import itertools
import logging

import numpy
from scipy.special import expit, log_expit

from . import ConfigurationError, InputError, NumericError
from .flow import FlowBatch, fm_loss, interpolate, target_velocity, velocity_errors, weighted_fm_loss
from .io import read_jsonl, write_jsonl
from .netcore import fit, minibatches
from .toyworld import DIMENSIONS, Label

logger = logging.getLogger(__name__)

METHODS = ("sft", "rwr", "dpo")
SCHEDULES = ("constant", "quadratic")


@dataclasses.dataclass(frozen=True)
class DpoConfig:
    """Alignment settings; `beta` and `schedule` only affect DPO, `rwr_clip` only RWR

    ``steps=-1`` runs `epochs` full passes, otherwise training stops after `steps` updates.
    """
    beta: float = 500.0
    schedule: str = "constant"
    lr: float = 1e-4
    steps: int = -1
    epochs: int = 1
    batch_size: int = 64
    seed: int = 0
    rwr_clip: float = 20.0
    log_every: int = 50

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigurationError(f"beta must be positive, got {self.beta}")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"unknown beta schedule '{self.schedule}', expected one of {SCHEDULES}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be positive and epochs non-negative")
        if self.rwr_clip <= 0:
            raise ConfigurationError("rwr_clip must be positive")

    def beta_at(self, t):
        t = numpy.asarray(t, dtype=numpy.float64)
        if self.schedule == "quadratic":
            return self.beta*(1 - t)**2
        return numpy.full(t.shape, self.beta)


@dataclasses.dataclass(frozen=True)
class AlignBatch:
    x0_w: numpy.ndarray
    x0_l: numpy.ndarray
    y: numpy.ndarray
    t: numpy.ndarray
    eps: numpy.ndarray

    @classmethod
    def draw(cls, chosen, rejected, y, rng):
        chosen = numpy.atleast_2d(numpy.asarray(chosen, dtype=numpy.float64))
        rejected = numpy.atleast_2d(numpy.asarray(rejected, dtype=numpy.float64))
        if chosen.shape != rejected.shape or chosen.shape[0] == 0:
            raise InputError(f"chosen {chosen.shape} and rejected {rejected.shape} must be equal, non-empty")
        n = chosen.shape[0]
        return cls(chosen, rejected, numpy.broadcast_to(numpy.asarray(y, dtype=int), (n,)),
                   rng.uniform(size=n), rng.standard_normal(chosen.shape))

    def __len__(self):
        return self.x0_w.shape[0]

    @property
    def x_t_w(self):
        return interpolate(self.x0_w, self.eps, self.t)

    @property
    def x_t_l(self):
        return interpolate(self.x0_l, self.eps, self.t)

    @property
    def v_w(self):
        return target_velocity(self.x0_w, self.eps)

    @property
    def v_l(self):
        return target_velocity(self.x0_l, self.eps)


def dpo_inner(policy, ref, batch, cfg):
    """Per-pair argument of the log-sigmoid, with the policy residuals"""
    e_w, res_w = velocity_errors(policy, batch.x_t_w, batch.t, batch.y, batch.v_w)
    e_l, res_l = velocity_errors(policy, batch.x_t_l, batch.t, batch.y, batch.v_l)
    r_w, _ = velocity_errors(ref, batch.x_t_w, batch.t, batch.y, batch.v_w)
    r_l, _ = velocity_errors(ref, batch.x_t_l, batch.t, batch.y, batch.v_l)
    beta = cfg.beta_at(batch.t)
    inner = -(beta/2)*((e_w - r_w) - (e_l - r_l))
    bad = ~numpy.isfinite(inner)
    if bad.any():
        raise NumericError(f"non-finite DPO term for pair {int(numpy.flatnonzero(bad)[0])}")
    return inner, beta, res_w, res_l


def flow_dpo_loss(policy, ref, batch, cfg=DpoConfig()):
    """``mean(-log sigmoid(inner))`` and its gradient in the policy parameters

    The reference only enters as a constant.
    """
    inner, beta, res_w, res_l = dpo_inner(policy, ref, batch, cfg)
    n = len(batch)
    loss = float(-numpy.mean(log_expit(inner)))
    scale = (expit(-inner)*beta/n)[:, None]
    grad_w, _ = policy.grads(batch.x_t_w, batch.t, batch.y, scale*res_w)
    grad_l, _ = policy.grads(batch.x_t_l, batch.t, batch.y, -scale*res_l)
    return loss, grad_w + grad_l


def rwr_weights(rewards, clip=20.0):
    rewards = numpy.asarray(rewards, dtype=numpy.float64)
    if not numpy.isfinite(rewards).all():
        raise NumericError("rewards must be finite")
    return numpy.exp(numpy.clip(rewards, -clip, clip))


def flow_rwr_loss(policy, batch, rewards, clip=20.0):
    """Flow matching weighted by ``exp(reward)``, rewards clipped to ±clip"""
    return weighted_fm_loss(policy, batch, rwr_weights(rewards, clip))


def sft_loss(policy, batch):
    """Flow matching on a batch that holds only chosen samples"""
    return fm_loss(policy, batch)


@dataclasses.dataclass(frozen=True)
class RelabeledPair:
    """A preference pair oriented by a reward model

    :param scores: scalarised, normalised reward of (chosen, rejected)
    :param flipped: the orientation disagrees with the annotator labels
    :param provenance: the original annotator labels and Likert scores
    """
    cond: int
    chosen: numpy.ndarray
    rejected: numpy.ndarray
    scores: tuple = None
    flipped: bool = False
    provenance: dict = None

    def to_json(self):
        return {"cond": int(self.cond),
                "chosen": numpy.asarray(self.chosen).ravel().tolist(),
                "rejected": numpy.asarray(self.rejected).ravel().tolist(),
                "scores": None if self.scores is None else [float(s) for s in self.scores],
                "flipped": bool(self.flipped),
                "provenance": self.provenance or {}}

    @classmethod
    def from_json(cls, obj):
        scores = obj.get("scores")
        return cls(int(obj["cond"]), numpy.array(obj["chosen"]), numpy.array(obj["rejected"]),
                   None if scores is None else tuple(scores), bool(obj.get("flipped", False)),
                   obj.get("provenance"))


def write_relabeled(path, pairs):
    path = write_jsonl(path, [p.to_json() for p in pairs])
    logger.info("wrote %d relabelled pairs to %s", len(pairs), path)
    return path


def read_relabeled(path):
    return [RelabeledPair.from_json(obj) for obj in read_jsonl(path)]


def pairs_from_records(records):
    """Pairs oriented by the annotator: the side winning more dimensions is chosen

    Records without a majority winner are dropped.
    """
    pairs = []
    for r in records:
        votes = sum((r.label[d] == Label.AWins) - (r.label[d] == Label.BWins) for d in DIMENSIONS)
        if votes == 0:
            continue
        a, b = r.sample_a.flat, r.sample_b.flat
        chosen, rejected = (a, b) if votes > 0 else (b, a)
        pairs.append(RelabeledPair(r.condition_class, chosen, rejected))
    return pairs


def _pair_arrays(pairs):
    return (numpy.array([p.chosen for p in pairs], dtype=numpy.float64),
            numpy.array([p.rejected for p in pairs], dtype=numpy.float64),
            numpy.array([p.cond for p in pairs], dtype=int))


def align_train(method, pretrained, pairs, cfg=DpoConfig(), progress=False):
    """Align a pretrained velocity field on oriented preference pairs

    :param method: one of ``sft``, ``rwr``, ``dpo``
    :param pretrained: the starting :class:`~flowalign.flow.VelocityNet`, also the DPO reference
    :param pairs: :class:`RelabeledPair` list; ``rwr`` needs their scores
    :param cfg: :class:`DpoConfig`
    :return: the aligned model and a DataFrame training curve (step, loss, grad_norm)
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown alignment method '{method}', expected one of {METHODS}")
    if not pairs:
        raise InputError("no preference pairs to align on")
    if method == "rwr" and any(p.scores is None for p in pairs):
        raise InputError("rwr needs reward scores on every pair, relabel the dataset first")
    chosen, rejected, conds = _pair_arrays(pairs)
    rng = numpy.random.default_rng([cfg.seed, 4])
    indices = minibatches(len(pairs), cfg.batch_size, cfg.epochs, rng)
    if cfg.steps >= 0:
        indices = itertools.islice(indices, cfg.steps)

    if method == "dpo":
        ref = pretrained
        batches = (AlignBatch.draw(chosen[i], rejected[i], conds[i], rng) for i in indices)

        def loss_and_grad(model, batch):
            return flow_dpo_loss(model, ref, batch, cfg)
    elif method == "sft":
        batches = (FlowBatch.draw(chosen[i], conds[i], rng) for i in indices)
        loss_and_grad = sft_loss
    else:
        rewards = numpy.array([p.scores for p in pairs], dtype=numpy.float64)

        def rwr_batches():
            for i in indices:
                x0 = numpy.vstack([chosen[i], rejected[i]])
                yield (FlowBatch.draw(x0, numpy.concatenate([conds[i], conds[i]]), rng),
                       numpy.concatenate([rewards[i, 0], rewards[i, 1]]))
        batches = rwr_batches()

        def loss_and_grad(model, batch):
            return flow_rwr_loss(model, batch[0], batch[1], cfg.rwr_clip)

    return fit(pretrained, loss_and_grad, batches, cfg.lr, cfg.log_every, f"align[{method}]", progress)
