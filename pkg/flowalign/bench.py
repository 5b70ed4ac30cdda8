"""Evaluation and ablation harness

Models are compared through generators: callables ``(conditions, seeds) ->
samples``. A comparison always evaluates both generators on the same
(condition, seed) keys, so every win is a paired comparison.
"""

import dataclasses
import datetime
import json
import logging
import pathlib

import numpy
import pandas
from scipy import stats as scipy_stats

from . import ConfigurationError, InputError
from .align import DpoConfig, RelabeledPair, align_train
from .flow import FlowSchedule, euler_sample
from .guide import GuidanceSpec, nrg_sample
from .io import atomic_write_text, config_hash, derive_seed, dumps_jsonl, read_jsonl
from .reward import (RewardBatch, RewardConfig, RewardWeights, ScoreStats, evaluate_reward,
                     normalize_scores, train_reward)
from .toyworld import DIMENSIONS, GroundTruthReward, Label, WorldConfig

logger = logging.getLogger(__name__)

AXES = ("beta_schedule", "beta_value", "rm_mode", "data_fraction", "guidance_weights", "w_scale")
REPORT_COLUMNS = ["axis", "setting", "metric", "dimension", "seed", "value", "ci_low", "ci_high"]


def wilson_interval(successes, n, confidence=0.95):
    """Wilson score interval; `successes` may be fractional"""
    if n <= 0:
        raise InputError("an interval needs at least one trial")
    z = scipy_stats.norm.ppf(0.5 + confidence/2)
    p = successes/n
    denominator = 1 + z**2/n
    centre = (p + z**2/(2*n))/denominator
    half = z*numpy.sqrt(p*(1 - p)/n + z**2/(4*n**2))/denominator
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclasses.dataclass(frozen=True)
class SampleSet:
    samples: numpy.ndarray
    conditions: numpy.ndarray
    seeds: numpy.ndarray

    @property
    def keys(self):
        return list(zip(self.conditions.tolist(), self.seeds.tolist()))


@dataclasses.dataclass(frozen=True)
class WinRateResult:
    """Win rates of a over b; ties earn half a win"""
    per_dimension: dict
    overall: float
    n_prompts: int
    seeds: tuple
    intervals: dict

    def rows(self, metric="win_rate"):
        rates = dict(self.per_dimension, overall=self.overall)
        return [(metric, dim, rate) + self.intervals[dim] for dim, rate in rates.items()]


def prompt_keys(conditions, seeds):
    """Expand prompts and seeds into per-sample (condition, sample seed) keys

    Sample seed for prompt i under seed s is ``derive_seed(s, i)``, so repeated
    conditions still draw distinct noise.
    """
    conditions = numpy.asarray(conditions, dtype=int)
    if conditions.size == 0:
        raise InputError("no evaluation prompts")
    if len(seeds) == 0:
        raise InputError("no evaluation seeds")
    conds = numpy.tile(conditions, len(seeds))
    sample_seeds = numpy.array([derive_seed(s, i) for s in seeds for i in range(conditions.size)],
                               dtype=numpy.int64)
    return conds, sample_seeds


def sampler(model, schedule=FlowSchedule(), cfg_scale=1.0):
    def generate(conditions, seeds):
        return euler_sample(model, conditions, schedule, cfg_scale, seeds)
    return generate


def guided_sampler(policy, noisy_rm, spec, schedule=FlowSchedule()):
    def generate(conditions, seeds):
        return nrg_sample(policy, noisy_rm, spec, schedule, conditions, seeds)[0]
    return generate


def compare_samples(set_a, set_b, reward, stats=None, weights=None):
    """Paired win rates of `set_a` over `set_b`

    Without `stats`, scores are normalised with statistics of both sets pooled.
    """
    if set_a.keys != set_b.keys:
        raise InputError("sample sets were drawn with different (condition, seed) keys")
    if not set_a.keys:
        raise InputError("no samples to compare")
    s_a = reward.scores(set_a.samples, set_a.conditions)
    s_b = reward.scores(set_b.samples, set_b.conditions)
    if stats is None:
        stats = ScoreStats.measure(numpy.vstack([s_a, s_b]))
    z_a, o_a = normalize_scores(s_a, stats, weights)
    z_b, o_b = normalize_scores(s_b, stats, weights)
    a = numpy.column_stack([z_a, o_a])
    b = numpy.column_stack([z_b, o_b])
    credit = (a > b) + 0.5*(a == b)
    n = credit.shape[0]
    rates = credit.mean(axis=0)
    names = list(DIMENSIONS) + ["overall"]
    intervals = {name: wilson_interval(credit[:, k].sum(), n) for k, name in enumerate(names)}
    return WinRateResult(dict(zip(DIMENSIONS, rates[:-1].tolist())), float(rates[-1]), n,
                         tuple(sorted(set(set_a.seeds.tolist()))), intervals)


def win_rate(gen_a, gen_b, reward, conditions, seeds, stats=None, weights=None):
    """Sample both generators on shared keys and compare them under `reward`

    :param gen_a, gen_b: generators ``(conditions, seeds) -> samples``
    :param reward: scorer with ``scores(x, y)``
    :param conditions: evaluation prompts (condition classes, repeats allowed)
    :param seeds: evaluation seeds, each covers every prompt
    :param stats: :class:`~flowalign.reward.ScoreStats` for normalisation
    :param weights: scalarisation weights for the overall rate
    """
    conds, sample_seeds = prompt_keys(conditions, seeds)
    set_a = SampleSet(gen_a(conds, sample_seeds), conds, sample_seeds)
    set_b = SampleSet(gen_b(conds, sample_seeds), conds, sample_seeds)
    result = compare_samples(set_a, set_b, reward, stats, weights)
    return dataclasses.replace(result, n_prompts=len(conditions), seeds=tuple(seeds))


def _votes(record, weights):
    signs = numpy.array([(record.label[d] == Label.AWins) - (record.label[d] == Label.BWins)
                         for d in DIMENSIONS], dtype=float)
    return float(signs @ weights.as_array())


def relabel_pairs(rm, stats, records, weights=RewardWeights()):
    """Orient pairs by the scalarised, normalised scores of a reward model

    Pairs the model scores equally are dropped. ``flipped`` marks pairs whose
    orientation disagrees with the weighted annotator votes (side a when the
    votes cancel).
    """
    if not records:
        return []
    data = RewardBatch.from_records(records)
    _, overall_a = normalize_scores(rm.scores(data.a, data.y), stats, weights)
    _, overall_b = normalize_scores(rm.scores(data.b, data.y), stats, weights)
    pairs = []
    for record, a, b, score_a, score_b in zip(records, data.a, data.b, overall_a, overall_b):
        if score_a == score_b:
            continue
        a_wins = bool(score_a > score_b)
        chosen, rejected = (a, b) if a_wins else (b, a)
        scores = (score_a, score_b) if a_wins else (score_b, score_a)
        annotator_a = _votes(record, weights) >= 0
        provenance = {"labels": {d: record.label[d].code for d in DIMENSIONS},
                      "likert": {d: list(record.likert[d]) for d in DIMENSIONS},
                      "chosen_side": "a" if a_wins else "b"}
        pairs.append(RelabeledPair(record.condition_class, chosen, rejected,
                                   tuple(float(s) for s in scores), a_wins != annotator_a, provenance))
    logger.info("relabelled %d of %d pairs, %d flipped", len(pairs), len(records),
                sum(p.flipped for p in pairs))
    return pairs


def flip_fraction(pairs):
    return sum(p.flipped for p in pairs)/len(pairs) if pairs else 0.0


@dataclasses.dataclass(frozen=True)
class AblationSpec:
    """An ablation axis with its grid of settings and seeds

    Settings per axis:

    * ``beta_value``: a beta, trained with the constant schedule
    * ``beta_schedule``: ``constant`` or ``quadratic``, optionally ``@beta``
    * ``rm_mode``: a reward objective trained on all data
    * ``data_fraction``: ``mode@fraction``, e.g. ``bt@0.25``
    * ``guidance_weights``: ``vq:mq:ta``, rescaled onto the simplex
    * ``w_scale``: a guidance strength
    """
    axis: str
    grid: tuple
    seeds: tuple = (0,)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigurationError(f"unknown ablation axis '{self.axis}', expected one of {AXES}")
        object.__setattr__(self, "grid", tuple(str(g) for g in self.grid))
        object.__setattr__(self, "seeds", tuple(_number(s, int, "ablation seed") for s in self.seeds))
        if not self.grid or not self.seeds:
            raise ConfigurationError("an ablation needs a non-empty grid and seed list")
        for setting in self.grid:
            parse_setting(self.axis, setting)

    def cells(self):
        return [(setting, seed) for setting in self.grid for seed in self.seeds]


@dataclasses.dataclass
class BenchBase:
    """Everything the ablation cells share"""
    world: WorldConfig
    train_records: list
    val_records: list
    eval_conditions: tuple
    pretrained: object = None
    reward: object = None
    stats: ScoreStats = None
    noisy_rm: object = None
    pairs: list = None
    schedule: FlowSchedule = FlowSchedule()
    reward_cfg: RewardConfig = RewardConfig()
    dpo_cfg: DpoConfig = DpoConfig()
    guidance: GuidanceSpec = GuidanceSpec()
    seed: int = 0
    gt_eval: bool = True

    def require(self, axis):
        needs = {"rm_mode": ("train_records", "val_records"),
                 "data_fraction": ("train_records", "val_records"),
                 "beta_value": ("pretrained", "reward", "stats", "pairs"),
                 "beta_schedule": ("pretrained", "reward", "stats", "pairs"),
                 "guidance_weights": ("pretrained", "reward", "stats", "noisy_rm"),
                 "w_scale": ("pretrained", "reward", "stats", "noisy_rm")}[axis]
        missing = [name for name in needs if not getattr(self, name)]
        if missing:
            raise ConfigurationError(f"the {axis} ablation needs {', '.join(missing)}")


def _number(text, cast, what):
    try:
        return cast(str(text).strip())
    except ValueError:
        raise ConfigurationError(f"bad {what} '{text}', expected {cast.__name__}") from None


def _split_setting(setting):
    head, _, tail = setting.partition("@")
    return head, (_number(tail, float, f"value after '@' in '{setting}'") if tail else None)


def parse_setting(axis, setting):
    """The value a grid setting stands for on `axis`"""
    if axis == "rm_mode":
        return setting
    elif axis == "data_fraction":
        mode, fraction = _split_setting(setting)
        return mode, 1.0 if fraction is None else fraction
    elif axis in ("beta_value", "w_scale"):
        return _number(setting, float, f"{axis} setting")
    elif axis == "beta_schedule":
        return _split_setting(setting)
    elif axis == "guidance_weights":
        return RewardWeights.parse(setting, normalise=True)
    raise ConfigurationError(f"unknown ablation axis '{axis}'")


def _fraction_subset(records, fraction, seed):
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"data fraction must lie in (0, 1], got {fraction}")
    order = numpy.random.default_rng(seed).permutation(len(records))
    keep = max(1, int(numpy.ceil(fraction*len(records))))
    return [records[i] for i in sorted(order[:keep])]


def accuracy_rows(table):
    """Report rows ``(metric, dimension, value, ci_low, ci_high)`` from an accuracy table"""
    rows = []
    for row in table.itertuples(index=False):
        if row.metric == "tie_threshold":
            continue
        metric = f"accuracy_{row.mode}" if row.metric == "accuracy" else row.metric
        rows.append((metric, row.dimension, row.value, numpy.nan, numpy.nan))
    return rows


def _reward_cell(base, mode, fraction, seed):
    train = _fraction_subset(base.train_records, fraction, seed) if fraction < 1 else base.train_records
    cfg = dataclasses.replace(base.reward_cfg, mode=mode, seed=seed)
    model, stats, _ = train_reward(train, base.val_records, base.world.n_classes, cfg)
    return accuracy_rows(evaluate_reward(model, base.val_records, stats))


def comparison_rows(gen_a, gen_b, reward, stats, conditions, seed, world=None):
    """Win-rate rows under the learned reward, plus ground truth when `world` is given"""
    rows = win_rate(gen_a, gen_b, reward, conditions, [seed], stats).rows("win_rate")
    if world is not None:
        rows += win_rate(gen_a, gen_b, GroundTruthReward(world), conditions, [seed]).rows("gt_win_rate")
    return rows


def comparison_report(gen_a, gen_b, reward, stats, conditions, seeds, setting, world=None, axis="eval"):
    rows = [(axis, setting, m, d, seed, v, lo, hi)
            for seed in seeds
            for m, d, v, lo, hi in comparison_rows(gen_a, gen_b, reward, stats, conditions, seed, world)]
    return pandas.DataFrame(rows, columns=REPORT_COLUMNS)


def _comparison_rows(base, gen_a, gen_b, seed):
    return comparison_rows(gen_a, gen_b, base.reward, base.stats, base.eval_conditions, seed,
                           base.world if base.gt_eval else None)


def _dpo_cell(base, beta, schedule, seed):
    cfg = dataclasses.replace(base.dpo_cfg, beta=beta, schedule=schedule, seed=seed)
    aligned, _ = align_train("dpo", base.pretrained, base.pairs, cfg)
    cfg_scale = base.guidance.cfg_scale
    return _comparison_rows(base, sampler(aligned, base.schedule, cfg_scale),
                            sampler(base.pretrained, base.schedule, cfg_scale), seed)


def _guidance_cell(base, spec, seed):
    guided = guided_sampler(base.pretrained, base.noisy_rm, spec, base.schedule)
    plain = sampler(base.pretrained, base.schedule, spec.cfg_scale)
    return _comparison_rows(base, guided, plain, seed)


def run_cell(base, axis, setting, seed):
    """Metric rows ``(metric, dimension, value, ci_low, ci_high)`` for one grid cell"""
    value = parse_setting(axis, setting)
    if axis == "rm_mode":
        return _reward_cell(base, value, 1.0, seed)
    elif axis == "data_fraction":
        return _reward_cell(base, *value, seed)
    elif axis == "beta_value":
        return _dpo_cell(base, value, "constant", seed)
    elif axis == "beta_schedule":
        schedule, beta = value
        return _dpo_cell(base, base.dpo_cfg.beta if beta is None else beta, schedule, seed)
    elif axis == "guidance_weights":
        return _guidance_cell(base, dataclasses.replace(base.guidance, weights=value), seed)
    return _guidance_cell(base, dataclasses.replace(base.guidance, w_scale=value), seed)


def _cell_key(axis, setting, seed):
    return f"{axis}|{setting}|{seed}"


def read_ledger(path):
    if path is None or not pathlib.Path(path).exists():
        return {}
    return {entry["key"]: entry["rows"] for entry in read_jsonl(path)}


def run_ablation(spec, base, ledger_path=None, progress=False):
    """Run every (setting, seed) cell of an ablation and collect a report

    Cell ``i`` with seed ``s`` uses the derived seed ``derive_seed(base.seed, i, s)``.
    Completed cells are recorded in the JSON-lines ledger at `ledger_path`
    and skipped when the ablation is run again.
    """
    base.require(spec.axis)
    ledger_path = None if ledger_path is None else pathlib.Path(ledger_path)
    ledger = read_ledger(ledger_path)
    cells = spec.cells()
    if progress:
        from tqdm.auto import tqdm
        cells = tqdm(cells, desc=spec.axis)
    rows = []
    for index, (setting, seed) in enumerate(cells):
        key = _cell_key(spec.axis, setting, seed)
        if key in ledger:
            logger.info("ablation cell %s already done", key)
            cell_rows = ledger[key]
        else:
            cell_seed = derive_seed(base.seed, index, seed)
            logger.info("ablation cell %s (seed %d)", key, cell_seed)
            cell_rows = [[m, d, float(v), float(lo), float(hi)]
                         for m, d, v, lo, hi in run_cell(base, spec.axis, setting, cell_seed)]
            ledger[key] = cell_rows
            if ledger_path is not None:
                atomic_write_text(ledger_path, dumps_jsonl({"key": k, "rows": r} for k, r in ledger.items()))
        rows.extend((spec.axis, setting, m, d, seed, v, lo, hi) for m, d, v, lo, hi in cell_rows)
    return pandas.DataFrame(rows, columns=REPORT_COLUMNS)


def report_csv(report, config_digest, timestamp=None):
    """CSV text with a leading ``# generated: ... config: ...`` comment line"""
    timestamp = timestamp or datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    body = report[REPORT_COLUMNS].to_csv(index=False, lineterminator="\n")
    return f"# generated: {timestamp} config: {config_digest}\n" + body


def read_report(path):
    try:
        return pandas.read_csv(path, skiprows=1,
                               dtype={"axis": str, "setting": str, "metric": str, "dimension": str})
    except OSError as e:
        raise InputError(f"cannot read report '{path}': {e.strerror}") from e


def report_summary(report):
    """Median over seeds of every (axis, setting, metric, dimension)"""
    keys = ["axis", "setting", "metric", "dimension"]
    grouped = report.groupby(keys, sort=False)
    summary = grouped["value"].median().reset_index()
    summary["n_seeds"] = grouped["seed"].nunique().values
    return summary.to_dict(orient="records")


def emit_report(report, out_dir, config=None, stem="report", timestamp=None):
    """Write ``<stem>.csv``, ``<stem>.json`` and ``<stem>.svg`` into `out_dir`

    :return: dict of the written paths keyed csv, json and svg
    """
    from .plotting import plot_report

    if report is None or len(report) == 0:
        raise InputError("refusing to write an empty report")
    digest = config_hash(config or {})
    out_dir = pathlib.Path(out_dir)
    paths = {"csv": out_dir/f"{stem}.csv", "json": out_dir/f"{stem}.json", "svg": out_dir/f"{stem}.svg"}
    atomic_write_text(paths["csv"], report_csv(report, digest, timestamp))
    summary = {"config": digest, "rows": report_summary(report)}
    atomic_write_text(paths["json"], json.dumps(summary, sort_keys=True, indent=1) + "\n")
    plot_report(report, paths["svg"], digest)
    logger.info("wrote report %s", paths["csv"])
    return paths


def held_out_conditions(n_prompts, classes):
    """`n_prompts` evaluation prompts cycling through `classes`"""
    classes = numpy.asarray(sorted(classes), dtype=int)
    if classes.size == 0:
        raise ConfigurationError("no held-out classes to evaluate on")
    return tuple(int(c) for c in numpy.resize(classes, n_prompts))
