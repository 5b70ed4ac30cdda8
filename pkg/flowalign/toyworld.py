"""Synthetic trajectory domain with analytic rewards and a synthetic annotator

A trajectory is T frames of D=2 coordinates tracing an arc on the unit circle
towards the target angle ``2*pi*c/K`` of its condition class c. Three closed
form rewards score it:

* vq: negative mean squared radial deviation of the frames from the unit circle
* mq: negative mean squared second difference across frames, averaged over
  the coordinates
* ta: negative squared wrapped error between the final-frame angle and the
  class target angle

Each is at most 0 and reaches 0 only for a perfect arc.
"""

import dataclasses
import enum
import logging
import pathlib

import numpy

from . import ConfigurationError, InputError, ShapeError, expectversion
from .io import atomic_write_text, canonical_json, read_jsonl

logger = logging.getLogger(__name__)

DIMENSIONS = ("vq", "mq", "ta")

SCHEMA_VERSION = "1.0"

# Likert scores are 1 + the number of breakpoints below the score
N_LIKERT = 5


class Label(enum.IntEnum):
    AWins = 0
    BWins = 1
    Tie = 2

    @property
    def code(self):
        return "ABT"[self.value]

    @classmethod
    def from_code(cls, code):
        return cls("ABT".index(code))


def target_angle(condition, n_classes):
    return 2*numpy.pi*numpy.asarray(condition)/n_classes


def wrap_angle(angle):
    """Wrap to (-pi, pi]"""
    wrapped = numpy.mod(numpy.asarray(angle, dtype=float) + numpy.pi, 2*numpy.pi) - numpy.pi
    return numpy.where(wrapped == -numpy.pi, numpy.pi, wrapped)


def condition_embedding(condition, n_classes, dropped=None):
    """Condition features: one-hot class, (cos, sin) of the target angle, unconditional flag

    Dropped conditions have all class features zeroed and the flag set.
    Returns an array of shape (n, n_classes + 3) for n conditions.
    """
    condition = numpy.atleast_1d(numpy.asarray(condition, dtype=int))
    n = condition.size
    if ((condition < 0) | (condition >= n_classes)).any():
        raise InputError(f"condition classes must lie in [0, {n_classes})")
    emb = numpy.zeros((n, n_classes + 3))
    emb[numpy.arange(n), condition] = 1.0
    angle = target_angle(condition, n_classes)
    emb[:, n_classes] = numpy.cos(angle)
    emb[:, n_classes + 1] = numpy.sin(angle)
    if dropped is not None:
        dropped = numpy.broadcast_to(numpy.asarray(dropped, dtype=bool), (n,))
        emb[dropped] = 0.0
        emb[dropped, -1] = 1.0
    return emb


@dataclasses.dataclass(frozen=True)
class Trajectory:
    frames: numpy.ndarray
    condition_class: int

    def __post_init__(self):
        frames = numpy.array(self.frames, dtype=numpy.float64)
        if frames.ndim != 2:
            raise ShapeError(f"frames must be a T x D array, got shape {frames.shape}")
        if frames.shape[0] < 3:
            raise ShapeError("a trajectory needs at least 3 frames for second differences")
        if not numpy.isfinite(frames).all():
            raise InputError("trajectory frames must be finite")
        frames.flags.writeable = False
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "condition_class", int(self.condition_class))

    @property
    def flat(self):
        return self.frames.ravel()


@dataclasses.dataclass(frozen=True)
class GtReward:
    vq: float
    mq: float
    ta: float

    def as_array(self):
        return numpy.array([self.vq, self.mq, self.ta])


@dataclasses.dataclass(frozen=True)
class QualityKnobs:
    radial_noise: float = 0.0
    jitter: float = 0.0
    angle_error: float = 0.0

    def __post_init__(self):
        if min(self.radial_noise, self.jitter, self.angle_error) < 0:
            raise ConfigurationError("quality knobs must be non-negative")


@dataclasses.dataclass(frozen=True)
class KnobDistribution:
    """Independent knob draws ``max*sqrt(u)``, u ~ U(0, 1)

    Squared knobs are then uniform on [0, max**2].
    """
    radial_noise_max: float = 0.55
    jitter_max: float = 0.1
    angle_error_max: float = 0.8

    def draw(self, rng):
        u = numpy.sqrt(rng.uniform(size=3))
        return QualityKnobs(u[0]*self.radial_noise_max,
                            u[1]*self.jitter_max,
                            u[2]*self.angle_error_max)


@dataclasses.dataclass(frozen=True)
class AnnotatorModel:
    tie_band: float = 0.05
    flip_temperature: float = 0.1

    def __post_init__(self):
        if self.tie_band < 0:
            raise ConfigurationError("tie band must be non-negative")
        if self.flip_temperature <= 0:
            raise ConfigurationError("flip temperature must be positive")


@dataclasses.dataclass(frozen=True)
class WorldConfig:
    n_frames: int = 16
    dim: int = 2
    n_classes: int = 8
    arc_span: float = 0.4

    def __post_init__(self):
        if self.n_frames < 3:
            raise ConfigurationError("n_frames must be at least 3")
        if self.dim != 2:
            raise ConfigurationError("the circular-arc world is two dimensional")
        if self.n_classes < 1:
            raise ConfigurationError("n_classes must be positive")

    @property
    def sample_dim(self):
        return self.n_frames*self.dim


def sample_trajectory(condition, knobs, rng, world=WorldConfig()):
    """Draw one arc ending near the target angle of `condition`

    The clean arc has uniform angular speed and spans ``world.arc_span``
    radians. ``angle_error`` rotates the whole arc by ±angle_error (random
    sign), ``radial_noise`` scales each frame's radius by an independent
    N(1, radial_noise**2) draw and ``jitter`` adds isotropic N(0, jitter**2)
    noise to every coordinate.
    """
    T = world.n_frames
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    end = target_angle(condition, world.n_classes) + sign*knobs.angle_error
    angles = end - world.arc_span*numpy.arange(T - 1, -1, -1)/(T - 1)
    radius = 1 + knobs.radial_noise*rng.standard_normal(T)
    frames = radius[:, None]*numpy.column_stack([numpy.cos(angles), numpy.sin(angles)])
    frames = frames + knobs.jitter*rng.standard_normal(frames.shape)
    return Trajectory(frames, condition)


def gt_reward_arrays(frames, condition, n_classes):
    """Vectorised ground truth for frames of shape (n, T, D), returns (n, 3)"""
    frames = numpy.asarray(frames, dtype=numpy.float64)
    radius = numpy.linalg.norm(frames, axis=-1)
    vq = -numpy.mean((radius - 1)**2, axis=-1)
    second = frames[:, 2:] - 2*frames[:, 1:-1] + frames[:, :-2]
    mq = -numpy.mean(second**2, axis=(-2, -1))
    final = numpy.arctan2(frames[:, -1, 1], frames[:, -1, 0])
    error = wrap_angle(final - target_angle(condition, n_classes))
    ta = -error**2
    return numpy.column_stack([vq, mq, ta])


def gt_rewards(traj, n_classes=WorldConfig.n_classes):
    r = gt_reward_arrays(traj.frames[None], [traj.condition_class], n_classes)[0]
    return GtReward(*r)


class GroundTruthReward:
    """Oracle scorer with the ``scores(x, y)`` interface of a reward network"""

    def __init__(self, world=WorldConfig()):
        self.world = world

    def scores(self, x, y):
        x = numpy.atleast_2d(numpy.asarray(x, dtype=numpy.float64))
        frames = x.reshape(x.shape[0], self.world.n_frames, self.world.dim)
        y = numpy.broadcast_to(numpy.asarray(y, dtype=int), (x.shape[0],))
        return gt_reward_arrays(frames, y, self.world.n_classes)


def _logistic(z):
    return 0.5*(1 + numpy.tanh(0.5*z))


def likert_scores(gt, breakpoints):
    """Quantise scores to 1..5; breakpoints is (3, 4), ascending per dimension"""
    gt = numpy.atleast_2d(gt)
    breakpoints = numpy.asarray(breakpoints, dtype=float)
    out = numpy.empty(gt.shape, dtype=int)
    for d in range(gt.shape[1]):
        out[:, d] = 1 + numpy.searchsorted(breakpoints[d], gt[:, d], side="right")
    return numpy.clip(out, 1, N_LIKERT)


def annotate_pair(gt_a, gt_b, annotator, rng, breakpoints=None):
    """Label one pair in every dimension

    Returns a tuple of three :class:`Label` values and, if `breakpoints` is
    given, the Likert scores as an int array of shape (2, 3) (side, dimension).
    """
    a = numpy.asarray(gt_a.as_array() if isinstance(gt_a, GtReward) else gt_a, dtype=float)
    b = numpy.asarray(gt_b.as_array() if isinstance(gt_b, GtReward) else gt_b, dtype=float)
    delta = a - b
    u = rng.uniform(size=delta.size)
    labels = []
    for d in range(delta.size):
        if abs(delta[d]) <= annotator.tie_band:
            labels.append(Label.Tie)
        elif u[d] < _logistic(delta[d]/annotator.flip_temperature):
            labels.append(Label.AWins)
        else:
            labels.append(Label.BWins)
    likert = None
    if breakpoints is not None:
        likert = likert_scores(numpy.vstack([a, b]), breakpoints)
    return tuple(labels), likert


@dataclasses.dataclass(frozen=True)
class PreferenceRecord:
    condition_class: int
    sample_a: Trajectory
    sample_b: Trajectory
    label: dict
    likert: dict
    gt: dict = None

    def label_array(self):
        return numpy.array([int(self.label[d]) for d in DIMENSIONS])

    def likert_array(self):
        """Likert scores as (2, 3): side a then side b"""
        return numpy.array([[self.likert[d][0] for d in DIMENSIONS],
                            [self.likert[d][1] for d in DIMENSIONS]])

    def to_json(self, emit_gt=False):
        obj = {"cond": self.condition_class,
               "a_frames": self.sample_a.frames.tolist(),
               "b_frames": self.sample_b.frames.tolist(),
               "labels": {d: self.label[d].code for d in DIMENSIONS},
               "likert": {d: list(self.likert[d]) for d in DIMENSIONS}}
        if emit_gt and self.gt is not None:
            obj["gt"] = {d: list(self.gt[d]) for d in DIMENSIONS}
        return obj

    @classmethod
    def from_json(cls, obj):
        cond = int(obj["cond"])
        gt = obj.get("gt")
        return cls(cond,
                   Trajectory(obj["a_frames"], cond),
                   Trajectory(obj["b_frames"], cond),
                   {d: Label.from_code(obj["labels"][d]) for d in DIMENSIONS},
                   {d: tuple(int(s) for s in obj["likert"][d]) for d in DIMENSIONS},
                   {d: tuple(gt[d]) for d in DIMENSIONS} if gt else None)


@dataclasses.dataclass(frozen=True)
class DatasetHeader:
    world: WorldConfig
    annotator: AnnotatorModel
    breakpoints: tuple
    seed: int
    schema_version: str = SCHEMA_VERSION

    def to_json(self):
        return {"schema_version": self.schema_version,
                "T": self.world.n_frames, "D": self.world.dim, "K": self.world.n_classes,
                "arc_span": self.world.arc_span,
                "delta": self.annotator.tie_band,
                "temperature": self.annotator.flip_temperature,
                "breakpoints": [list(b) for b in self.breakpoints],
                "seed": self.seed}

    @classmethod
    def from_json(cls, obj):
        expectversion(SCHEMA_VERSION, have=obj.get("schema_version", "0"), what="the dataset schema")
        return cls(WorldConfig(obj["T"], obj["D"], obj["K"], obj["arc_span"]),
                   AnnotatorModel(obj["delta"], obj["temperature"]),
                   tuple(tuple(b) for b in obj["breakpoints"]),
                   obj["seed"], obj["schema_version"])


def build_corpus(n, knob_distribution, seed, world=WorldConfig()):
    """Mixed-quality trajectories with uniformly drawn conditions

    :return frames: array (n, T, D)
    :return conditions: int array (n,)
    """
    if n < 1:
        raise InputError("corpus size must be at least 1")
    frames = numpy.empty((n, world.n_frames, world.dim))
    conditions = numpy.empty(n, dtype=int)
    for i in range(n):
        rng = numpy.random.default_rng([seed, i])
        cond = int(rng.integers(world.n_classes))
        traj = sample_trajectory(cond, knob_distribution.draw(rng), rng, world)
        frames[i] = traj.frames
        conditions[i] = cond
    return frames, conditions


def likert_breakpoints(frames, conditions, n_classes):
    """Per-dimension quintile boundaries of the corpus score distribution"""
    gt = gt_reward_arrays(frames, conditions, n_classes)
    qs = numpy.arange(1, N_LIKERT)/N_LIKERT
    return tuple(tuple(float(v) for v in numpy.quantile(gt[:, d], qs)) for d in range(gt.shape[1]))


def build_pref_dataset(n_pairs, knob_distribution, annotator, seed, world=WorldConfig(),
                       breakpoints=None, path=None, emit_gt=False, progress=False):
    """Generate a preference dataset

    Both sides of a pair share a condition and draw independent quality knobs.
    Each record uses its own random stream derived from ``(seed, index)``.
    If `breakpoints` is None they are measured on a pretraining corpus drawn
    from the same knob distribution.

    :return: ``(header, records)``; also written as JSON lines when `path` is given
    """
    if n_pairs < 1:
        raise InputError("n_pairs must be at least 1")
    if breakpoints is None:
        frames, conditions = build_corpus(2048, knob_distribution, seed + 1, world)
        breakpoints = likert_breakpoints(frames, conditions, world.n_classes)
    header = DatasetHeader(world, annotator, tuple(tuple(b) for b in breakpoints), int(seed))

    indices = range(n_pairs)
    if progress:
        from tqdm.auto import tqdm
        indices = tqdm(indices, desc="pairs")
    records = []
    for i in indices:
        rng = numpy.random.default_rng([seed, 1 << 20, i])
        cond = int(rng.integers(world.n_classes))
        a = sample_trajectory(cond, knob_distribution.draw(rng), rng, world)
        b = sample_trajectory(cond, knob_distribution.draw(rng), rng, world)
        gt_a = gt_rewards(a, world.n_classes)
        gt_b = gt_rewards(b, world.n_classes)
        labels, likert = annotate_pair(gt_a, gt_b, annotator, rng, breakpoints)
        records.append(PreferenceRecord(
            cond, a, b,
            dict(zip(DIMENSIONS, labels)),
            {d: (int(likert[0, k]), int(likert[1, k])) for k, d in enumerate(DIMENSIONS)},
            {d: (float(getattr(gt_a, d)), float(getattr(gt_b, d))) for d in DIMENSIONS}))

    if path is not None:
        write_pref_dataset(path, header, records, emit_gt=emit_gt)
    return header, records


def dumps_pref_dataset(header, records, emit_gt=False):
    lines = [canonical_json(header.to_json())]
    lines.extend(canonical_json(r.to_json(emit_gt)) for r in records)
    return "\n".join(lines) + "\n"


def write_pref_dataset(path, header, records, emit_gt=False):
    path = atomic_write_text(path, dumps_pref_dataset(header, records, emit_gt))
    logger.info("wrote %d preference records to %s", len(records), path)
    return path


def read_pref_dataset(path):
    rows = read_jsonl(path)
    if not rows:
        raise InputError(f"'{pathlib.Path(path)}' is empty")
    header = DatasetHeader.from_json(rows[0])
    return header, [PreferenceRecord.from_json(obj) for obj in rows[1:]]


def tie_fractions(records):
    labels = numpy.array([r.label_array() for r in records])
    return dict(zip(DIMENSIONS, (labels == Label.Tie).mean(axis=0)))


def split_by_condition(records, val_classes):
    """Split records into (train, validation) by condition class"""
    val_classes = set(int(c) for c in val_classes)
    train = [r for r in records if r.condition_class not in val_classes]
    val = [r for r in records if r.condition_class in val_classes]
    return train, val
