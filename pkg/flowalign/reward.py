"""Reward models learned from pairwise preferences

Three objectives are available: ``regression`` onto Likert scores, ``bt``
(Bradley-Terry, ties are not allowed) and ``btt`` (Bradley-Terry with ties).

The tie model is the normalised Rao-Kupper form. With ``d = rA - rB``::

    pA   = 1/(1 + theta*exp(-d)) = expit(d - log(theta))
    pB   = 1/(1 + theta*exp(d))  = expit(-d - log(theta))
    pTie = (theta**2 - 1)*pA*pB

which sums to one for every theta > 1.

:class:`RewardNet` keeps quality scores (vq, mq) on a network that never sees
the condition; only the alignment score (ta) reads it.
"""

import dataclasses
import logging

import numpy
import pandas
from scipy.special import expit, log_expit

from . import ConfigurationError, InputError, NumericError, ShapeError
from .flow import TIME_FEATURES, interpolate, time_embedding
from .netcore import (NetSpec, fit, flat_params, load_checkpoint, minibatches, net_grads, net_init,
                      save_checkpoint, split_params)
from .toyworld import DIMENSIONS, Label, condition_embedding

logger = logging.getLogger(__name__)

MODES = ("regression", "bt", "btt")
ACCURACY_MODES = ("with_ties", "without_ties")


@dataclasses.dataclass(frozen=True)
class BttConfig:
    theta: float = 5.0

    def __post_init__(self):
        if not self.theta > 1:
            raise ConfigurationError(f"theta must exceed 1, got {self.theta}")


def btt_prob(rA, rB, theta=5.0):
    """Win, loss and tie probabilities under the tie-aware preference model

    Each probability lies in (0, 1) in exact arithmetic. In float64 the larger
    win probability rounds to exactly 1.0 once |rA - rB| exceeds about 37,
    while the other two stay positive and tiny.
    """
    log_theta = numpy.log(BttConfig(theta).theta)
    d = numpy.asarray(rA, dtype=numpy.float64) - numpy.asarray(rB, dtype=numpy.float64)
    pA = expit(d - log_theta)
    pB = expit(-d - log_theta)
    return pA, pB, (theta**2 - 1)*pA*pB


@dataclasses.dataclass(frozen=True)
class RewardWeights:
    """Linear scalarisation weights on the simplex"""
    vq: float = 1/3
    mq: float = 1/3
    ta: float = 1/3

    def __post_init__(self):
        w = self.as_array()
        if (w < 0).any() or not numpy.isfinite(w).all():
            raise ConfigurationError(f"reward weights must be non-negative, got {self}")
        if abs(w.sum() - 1) > 1e-9:
            raise ConfigurationError(f"reward weights must sum to 1, got {self} (sum {w.sum():g})")

    def as_array(self):
        return numpy.array([self.vq, self.mq, self.ta], dtype=numpy.float64)

    @classmethod
    def parse(cls, text, normalise=False):
        """Read ``vq:mq:ta``, optionally rescaling onto the simplex"""
        try:
            values = [float(v) for v in str(text).split(":")]
        except ValueError:
            raise ConfigurationError(f"reward weights '{text}' are not numbers") from None
        if len(values) != 3:
            raise ConfigurationError(f"reward weights need three values vq:mq:ta, got '{text}'")
        if normalise:
            total = sum(values)
            if total <= 0:
                raise ConfigurationError(f"reward weights '{text}' cannot be normalised")
            values = [v/total for v in values]
        return cls(*values)

    def __str__(self):
        return ":".join(f"{v:.17g}" for v in self.as_array())


@dataclasses.dataclass(frozen=True)
class ScoreStats:
    """Per-dimension location and scale of reward scores"""
    mean: tuple
    std: tuple

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if len(self.mean) != len(self.std):
            raise ShapeError("mean and std must have the same length")
        if not all(s > 0 for s in self.std):
            raise ConfigurationError(f"score standard deviations must be positive, got {self.std}")

    @classmethod
    def measure(cls, scores):
        scores = numpy.atleast_2d(scores)
        return cls(scores.mean(axis=0), scores.std(axis=0))

    def to_json(self):
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["mean"], obj["std"])


def normalize_scores(raw, stats, weights=None):
    """z-scores per dimension and their scalarisation

    :param raw: scores of shape (n, 3) or (3,)
    :param stats: :class:`ScoreStats`
    :param weights: :class:`RewardWeights`, equal weights when None
    :return: ``(normalised, overall)``
    """
    raw = numpy.asarray(raw, dtype=numpy.float64)
    z = (raw - numpy.array(stats.mean))/numpy.array(stats.std)
    w = (weights or RewardWeights()).as_array()
    return z, z @ w


def condition_features(y, n_classes, n):
    y = numpy.broadcast_to(numpy.asarray(y, dtype=int), (n,))
    return condition_embedding(y, n_classes)[:, :-1]


class RewardNet:
    """Clean-sample reward with condition-free quality scores"""
    role = "clean"

    def __init__(self, free_net, aware_net, sample_dim, n_classes):
        if free_net.spec.n_inputs != sample_dim or free_net.spec.n_outputs != 2:
            raise ShapeError(f"{free_net!r} must map {sample_dim} inputs to the 2 quality scores")
        if aware_net.spec.n_inputs != sample_dim + n_classes + 2 or aware_net.spec.n_outputs != 1:
            raise ShapeError(f"{aware_net!r} must map {sample_dim + n_classes + 2} inputs to 1 score")
        self.free_net = free_net
        self.aware_net = aware_net
        self.sample_dim = sample_dim
        self.n_classes = n_classes

    @property
    def nets(self):
        return [self.free_net, self.aware_net]

    @property
    def params(self):
        return flat_params(self.nets)

    def with_params(self, params):
        return RewardNet(*split_params(self.nets, params), self.sample_dim, self.n_classes)

    def _inputs(self, x, y):
        x = numpy.atleast_2d(numpy.asarray(x, dtype=numpy.float64))
        if x.shape[1] != self.sample_dim:
            raise ShapeError(f"samples of dimension {self.sample_dim} expected, got {x.shape}")
        return x, numpy.hstack([x, condition_features(y, self.n_classes, x.shape[0])])

    def scores(self, x, y):
        """Raw (vq, mq, ta) scores, shape (n, 3)"""
        x, xc = self._inputs(x, y)
        return numpy.hstack([self.free_net(x), self.aware_net(xc)])

    def grads(self, x, y, upstream):
        x, xc = self._inputs(x, y)
        upstream = numpy.atleast_2d(upstream)
        free_grad, free_in = net_grads(self.free_net, x, upstream[:, :2])
        aware_grad, aware_in = net_grads(self.aware_net, xc, upstream[:, 2:])
        return numpy.concatenate([free_grad, aware_grad]), free_in + aware_in[:, :self.sample_dim]

    def __repr__(self):
        return f"RewardNet({self.free_net!r}, {self.aware_net!r})"


def reward_net_init(sample_dim, n_classes, hidden=(64, 64), activation="tanh", seed=0):
    free = NetSpec((sample_dim,) + tuple(hidden) + (2,), activation, seed)
    aware = NetSpec((sample_dim + n_classes + 2,) + tuple(hidden) + (1,), activation, seed + 1)
    return RewardNet(net_init(free), net_init(aware), sample_dim, n_classes)


class NoisyRewardNet:
    """Time-dependent reward on noisy interpolants ``x_t``

    `stats` are the clean-input (t=0) score statistics used to scalarise.
    """
    role = "noisy"

    def __init__(self, net, sample_dim, n_classes, stats=None):
        expected = sample_dim + TIME_FEATURES + n_classes + 2
        if net.spec.n_inputs != expected or net.spec.n_outputs != len(DIMENSIONS):
            raise ShapeError(f"{net!r} must map {expected} inputs to {len(DIMENSIONS)} scores")
        self.net = net
        self.sample_dim = sample_dim
        self.n_classes = n_classes
        self.stats = stats

    @property
    def nets(self):
        return [self.net]

    @property
    def params(self):
        return self.net.params

    def with_params(self, params):
        return NoisyRewardNet(self.net.with_params(params), self.sample_dim, self.n_classes, self.stats)

    def with_stats(self, stats):
        return NoisyRewardNet(self.net, self.sample_dim, self.n_classes, stats)

    def features(self, x, y, t):
        x = numpy.atleast_2d(numpy.asarray(x, dtype=numpy.float64))
        if x.shape[1] != self.sample_dim:
            raise ShapeError(f"samples of dimension {self.sample_dim} expected, got {x.shape}")
        n = x.shape[0]
        return numpy.hstack([x, time_embedding(t, n), condition_features(y, self.n_classes, n)])

    def scores(self, x, y, t):
        return self.net(self.features(x, y, t))

    def grads(self, x, y, upstream, t):
        param_grad, input_grad = net_grads(self.net, self.features(x, y, t), upstream)
        return param_grad, input_grad[:, :self.sample_dim]

    def weighted_reward(self, x, y, t, weights):
        """Weighted sum of raw scores per sample and its gradient with respect to x only

        Scores are used as trained, without the `stats` normalisation. Time and
        condition features are held fixed for the gradient.
        """
        w = weights.as_array() if isinstance(weights, RewardWeights) else numpy.asarray(weights, dtype=numpy.float64)
        raw = self.scores(x, y, t)
        r = raw @ w
        upstream = numpy.broadcast_to(w, raw.shape)
        _, grad = self.grads(x, y, upstream, t)
        return r, grad

    def __repr__(self):
        return f"NoisyRewardNet({self.net!r})"


def noisy_reward_net_init(sample_dim, n_classes, hidden=(128, 128), activation="tanh", seed=0):
    spec = NetSpec((sample_dim + TIME_FEATURES + n_classes + 2,) + tuple(hidden) + (len(DIMENSIONS),),
                   activation, seed)
    return NoisyRewardNet(net_init(spec), sample_dim, n_classes)


def save_reward(path, model, stats=None, **lineage):
    header = dict(lineage, role=model.role, sample_dim=model.sample_dim, n_classes=model.n_classes)
    stats = stats if stats is not None else getattr(model, "stats", None)
    if stats is not None:
        header["stats"] = stats.to_json()
    return save_checkpoint(path, model.nets, header)


def load_reward(path):
    """Load a clean or noisy reward model, returns ``(model, stats, header)``"""
    nets, header = load_checkpoint(path)
    stats = ScoreStats.from_json(header["stats"]) if "stats" in header else None
    role = header.get("role")
    if role == "clean" and len(nets) == 2:
        model = RewardNet(nets[0], nets[1], header["sample_dim"], header["n_classes"])
    elif role == "noisy" and len(nets) == 1:
        model = NoisyRewardNet(nets[0], header["sample_dim"], header["n_classes"], stats)
    else:
        raise InputError(f"'{path}' is not a reward checkpoint (role {role!r})")
    return model, stats, header


@dataclasses.dataclass(frozen=True)
class RewardBatch:
    """Preference pairs as arrays

    :param a, b: flattened samples, shape (n, sample_dim)
    :param y: condition per pair
    :param labels: :class:`Label` codes, shape (n, 3)
    :param likert: Likert scores, shape (n, 2, 3) for sides a and b
    :param mask: which (pair, dimension) entries enter the loss
    :param t: interpolation time per pair for noisy inputs, None for clean ones
    """
    a: numpy.ndarray
    b: numpy.ndarray
    y: numpy.ndarray
    labels: numpy.ndarray
    likert: numpy.ndarray = None
    mask: numpy.ndarray = None
    t: numpy.ndarray = None

    def __post_init__(self):
        if self.a.shape != self.b.shape or self.a.ndim != 2:
            raise ShapeError(f"paired samples must share an (n, dim) shape, got {self.a.shape}, {self.b.shape}")
        if self.mask is None:
            object.__setattr__(self, "mask", numpy.ones(self.labels.shape, dtype=bool))

    @classmethod
    def from_records(cls, records):
        if not records:
            raise InputError("no preference records")
        return cls(numpy.array([r.sample_a.flat for r in records]),
                   numpy.array([r.sample_b.flat for r in records]),
                   numpy.array([r.condition_class for r in records]),
                   numpy.array([r.label_array() for r in records]),
                   numpy.array([r.likert_array() for r in records], dtype=numpy.float64))

    def __len__(self):
        return self.a.shape[0]

    def subset(self, idx):
        pick = (lambda v: None if v is None else v[idx])
        return RewardBatch(self.a[idx], self.b[idx], self.y[idx], self.labels[idx],
                           pick(self.likert), self.mask[idx], pick(self.t))

    def without_ties(self):
        return dataclasses.replace(self, mask=self.mask & (self.labels != Label.Tie))

    def noised(self, rng, t=None):
        """Both sides moved to x_t with one shared (t, noise) draw per pair"""
        n = len(self)
        t = rng.uniform(size=n) if t is None else numpy.broadcast_to(numpy.asarray(t, dtype=float), (n,))
        eps = rng.standard_normal(self.a.shape)
        return dataclasses.replace(self, a=interpolate(self.a, eps, t), b=interpolate(self.b, eps, t), t=t)


def score_loss(mode, r_a, r_b, batch, theta=5.0):
    """Loss and its gradients with respect to the scores of both sides

    Entries outside ``batch.mask`` do not contribute. The loss is summed over
    dimensions and averaged over pairs.

    :return: ``(loss, grad_a, grad_b)``
    """
    n = len(batch)
    mask = batch.mask.astype(numpy.float64)
    if mode == "regression":
        if batch.likert is None:
            raise InputError("regression needs Likert scores")
        ea = r_a - batch.likert[:, 0]
        eb = r_b - batch.likert[:, 1]
        loss = numpy.sum(mask*(ea**2 + eb**2))/(2*n)
        grad_a, grad_b = mask*ea/n, mask*eb/n
    elif mode == "bt":
        if (batch.mask & (batch.labels == Label.Tie)).any():
            raise InputError("Bradley-Terry cannot fit Tie labels, drop them first")
        s = numpy.where(batch.labels == Label.AWins, 1.0, -1.0)
        d = r_a - r_b
        loss = -numpy.sum(mask*log_expit(s*d))/n
        grad_a = -mask*s*expit(-s*d)/n
        grad_b = -grad_a
    elif mode == "btt":
        log_theta = numpy.log(BttConfig(theta).theta)
        d = r_a - r_b
        log_pA = log_expit(d - log_theta)
        log_pB = log_expit(-d - log_theta)
        pA, pB = numpy.exp(log_pA), numpy.exp(log_pB)
        per = {Label.AWins: (-log_pA, -(1 - pA)),
               Label.BWins: (-log_pB, 1 - pB),
               Label.Tie: (-numpy.log(theta**2 - 1) - log_pA - log_pB, pA - pB)}
        nll = numpy.zeros_like(d)
        dd = numpy.zeros_like(d)
        for label, (value, slope) in per.items():
            hit = batch.labels == label
            nll = numpy.where(hit, value, nll)
            dd = numpy.where(hit, slope, dd)
        loss = numpy.sum(mask*nll)/n
        grad_a = mask*dd/n
        grad_b = -grad_a
    else:
        raise ConfigurationError(f"unknown reward objective '{mode}', expected one of {MODES}")
    if not numpy.isfinite(loss):
        raise NumericError(f"{mode} loss is {loss}")
    return float(loss), grad_a, grad_b


def _time_args(batch):
    return () if batch.t is None else (batch.t,)


def preference_loss(mode, model, batch, theta=5.0):
    """Preference loss of a reward model on a batch and its parameter gradient"""
    extra = _time_args(batch)
    r_a = model.scores(batch.a, batch.y, *extra)
    r_b = model.scores(batch.b, batch.y, *extra)
    loss, g_a, g_b = score_loss(mode, r_a, r_b, batch, theta)
    grad_a, _ = model.grads(batch.a, batch.y, g_a, *extra)
    grad_b, _ = model.grads(batch.b, batch.y, g_b, *extra)
    return loss, grad_a + grad_b


@dataclasses.dataclass(frozen=True)
class RewardConfig:
    mode: str = "btt"
    theta: float = 5.0
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    lr: float = 1e-3
    epochs: int = 2
    batch_size: int = 64
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown reward objective '{self.mode}', expected one of {MODES}")
        BttConfig(self.theta)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be non-negative and batch_size positive")


@dataclasses.dataclass(frozen=True)
class NoisyRewardConfig:
    hidden: tuple = (128, 128)
    activation: str = "tanh"
    lr: float = 1e-3
    epochs: int = 4
    batch_size: int = 64
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be non-negative and batch_size positive")


def _check_splits(train, val):
    if not train:
        raise InputError("the training split is empty")
    if not val:
        raise InputError("the validation split is empty")
    overlap = {r.condition_class for r in train} & {r.condition_class for r in val}
    if overlap:
        raise InputError(f"conditions {sorted(overlap)} appear in both training and validation")


def _sample_dim(records):
    return records[0].sample_a.flat.size


def train_reward(train, val, n_classes, cfg=RewardConfig(), progress=False):
    """Fit a :class:`RewardNet`

    :param train: preference records for training
    :param val: records with conditions disjoint from `train`, used for score statistics
    :return: ``(model, stats, curve)``
    """
    _check_splits(train, val)
    data = RewardBatch.from_records(train)
    if cfg.mode == "bt":
        data = data.without_ties()
        if not data.mask.any():
            raise InputError("every training label is a Tie, nothing to fit with Bradley-Terry")
    model = reward_net_init(_sample_dim(train), n_classes, cfg.hidden, cfg.activation, cfg.seed)
    rng = numpy.random.default_rng([cfg.seed, 2])
    batches = (data.subset(idx) for idx in minibatches(len(data), cfg.batch_size, cfg.epochs, rng))
    model, curve = fit(model, lambda m, b: preference_loss(cfg.mode, m, b, cfg.theta), batches,
                       cfg.lr, cfg.log_every, f"reward[{cfg.mode}]", progress)
    stats = ScoreStats.measure(score_records(model, val))
    logger.info("reward[%s] validation score mean %s std %s", cfg.mode, stats.mean, stats.std)
    return model, stats, curve


def train_noisy_reward(train, val, n_classes, cfg=NoisyRewardConfig(), progress=False):
    """Fit a :class:`NoisyRewardNet` by Bradley-Terry on identically noised pairs

    Every step draws t ~ U(0, 1) and one noise sample per pair, shared by both sides.
    Ties are dropped.

    :return: ``(model, curve)``; the model carries clean-input score statistics from `val`
    """
    _check_splits(train, val)
    data = RewardBatch.from_records(train).without_ties()
    if not data.mask.any():
        raise InputError("every training label is a Tie, nothing to fit")
    model = noisy_reward_net_init(_sample_dim(train), n_classes, cfg.hidden, cfg.activation, cfg.seed)
    rng = numpy.random.default_rng([cfg.seed, 3])
    batches = (data.subset(idx).noised(rng)
               for idx in minibatches(len(data), cfg.batch_size, cfg.epochs, rng))
    model, curve = fit(model, lambda m, b: preference_loss("bt", m, b), batches,
                       cfg.lr, cfg.log_every, "noisy reward", progress)
    stats = ScoreStats.measure(score_records(model, val, t=0.0))
    return model.with_stats(stats), curve


def score_records(model, records, t=None):
    """Scores of both sides of every record, stacked to shape (2n, 3)"""
    data = RewardBatch.from_records(records)
    extra = () if t is None else (t,)
    return numpy.vstack([model.scores(data.a, data.y, *extra), model.scores(data.b, data.y, *extra)])


def pair_deltas(model, records, stats=None, weights=None, t=None, seed=0):
    """Score differences a - b per dimension plus a scalarised column

    For a noisy model `t` selects the noise level; both sides share one noise
    draw per pair from `seed`.

    :return: array (n, 4): vq, mq, ta and overall
    """
    data = RewardBatch.from_records(records)
    if t is not None:
        data = data.noised(numpy.random.default_rng(seed), t)
    extra = _time_args(data)
    s_a = model.scores(data.a, data.y, *extra)
    s_b = model.scores(data.b, data.y, *extra)
    if stats is None:
        stats = ScoreStats((0.0,)*s_a.shape[1], (1.0,)*s_a.shape[1])
    _, o_a = normalize_scores(s_a, stats, weights)
    _, o_b = normalize_scores(s_b, stats, weights)
    return numpy.column_stack([s_a - s_b, o_a - o_b])


def _label_codes(labels):
    labels = numpy.ravel(numpy.asarray(labels))
    if labels.dtype.kind in "US":
        return numpy.array([Label.from_code(v) for v in labels], dtype=int)
    return labels.astype(int)


def tie_calibration(deltas, labels):
    """Tie threshold maximising three-class accuracy

    A pair is predicted Tie when ``|delta| <= tau`` and otherwise by the sign
    of delta. Candidate thresholds are 0, the midpoints between consecutive
    distinct ``|delta|`` and infinity; the smallest best threshold wins.

    :return: ``(tau, accuracy)``
    """
    deltas = numpy.ravel(numpy.asarray(deltas, dtype=numpy.float64))
    labels = _label_codes(labels)
    if deltas.size == 0 or deltas.size != labels.size:
        raise InputError(f"need equal, non-empty deltas and labels, got {deltas.size} and {labels.size}")
    size = numpy.abs(deltas)
    unique = numpy.unique(size)
    taus = numpy.concatenate([[0.0], (unique[:-1] + unique[1:])/2, [numpy.inf]])

    is_tie = labels == Label.Tie
    sign_right = ((labels == Label.AWins) & (deltas > 0)) | ((labels == Label.BWins) & (deltas < 0))
    tie_sizes = numpy.sort(size[is_tie])
    right_sizes = numpy.sort(size[sign_right])
    ties_caught = numpy.searchsorted(tie_sizes, taus, side="right")
    signs_kept = right_sizes.size - numpy.searchsorted(right_sizes, taus, side="right")
    correct = ties_caught + signs_kept
    best = int(numpy.argmax(correct))
    return float(taus[best]), correct[best]/deltas.size


def pairwise_accuracy(deltas, labels, mode="without_ties"):
    """Preference accuracy of score differences

    ``without_ties`` drops Tie labels and counts a zero difference as wrong;
    ``with_ties`` is the calibrated three-class accuracy.
    """
    deltas = numpy.ravel(numpy.asarray(deltas, dtype=numpy.float64))
    labels = _label_codes(labels)
    if deltas.size == 0:
        raise InputError("no pairs to score")
    if mode == "with_ties":
        return tie_calibration(deltas, labels)[1]
    elif mode == "without_ties":
        keep = labels != Label.Tie
        if not keep.any():
            raise InputError("every label is a Tie, ties-excluded accuracy is undefined")
        right = numpy.where(labels[keep] == Label.AWins, deltas[keep] > 0, deltas[keep] < 0)
        return float(right.mean())
    raise ConfigurationError(f"unknown accuracy mode '{mode}', expected one of {ACCURACY_MODES}")


def majority_labels(labels):
    """Most frequent label across dimensions per pair, Tie when all differ"""
    labels = numpy.atleast_2d(labels)
    counts = numpy.stack([(labels == k).sum(axis=1) for k in Label], axis=1)
    winner = counts.argmax(axis=1)
    return numpy.where(counts.max(axis=1) > 1, winner, int(Label.Tie))


def mean_abs_delta_on_ties(deltas, labels):
    deltas = numpy.ravel(deltas)
    ties = _label_codes(labels) == Label.Tie
    return float(numpy.abs(deltas[ties]).mean()) if ties.any() else float("nan")


def accuracy_table(deltas, labels):
    """Accuracy rows for the columns of `deltas` (vq, mq, ta, overall)

    :return: DataFrame with columns metric, dimension, mode, value
    """
    labels = numpy.asarray(labels)
    columns = list(zip(DIMENSIONS, labels.T)) + [("overall", majority_labels(labels))]
    rows = []
    for k, (dim, lab) in enumerate(columns):
        d = deltas[:, k]
        tau, acc3 = tie_calibration(d, lab)
        has_decisive = (lab != Label.Tie).any()
        rows.append(("accuracy", dim, "with_ties", acc3))
        rows.append(("accuracy", dim, "without_ties",
                     pairwise_accuracy(d, lab, "without_ties") if has_decisive else float("nan")))
        rows.append(("tie_threshold", dim, "with_ties", tau))
        rows.append(("mean_abs_delta_ties", dim, "ties", mean_abs_delta_on_ties(d, lab)))
    return pandas.DataFrame(rows, columns=["metric", "dimension", "mode", "value"])


def evaluate_reward(model, records, stats=None, t=None, seed=0):
    """Accuracy table of a reward model on held-out records"""
    stats = stats if stats is not None else getattr(model, "stats", None)
    labels = numpy.array([r.label_array() for r in records])
    return accuracy_table(pair_deltas(model, records, stats, t=t, seed=seed), labels)


def random_baseline_accuracy(records, seed=0):
    """Accuracy table for independent N(0, 1) scores"""
    rng = numpy.random.default_rng(seed)
    labels = numpy.array([r.label_array() for r in records])
    scores = rng.standard_normal((2, len(records), len(DIMENSIONS)))
    deltas = scores[0] - scores[1]
    return accuracy_table(numpy.column_stack([deltas, deltas.mean(axis=1)]), labels)
