"""Command line entry point: one subcommand per pipeline stage

Stages talk to each other only through files under the output root::

    data/corpus.npy, data/corpus_conditions.npy   gen-data
    data/prefs.jsonl                              gen-data
    models/flow.faln                              train-flow
    models/reward.faln, data/relabeled.jsonl      train-reward
    models/noisy_reward.faln                      train-noisy-reward
    models/aligned_<method>.faln                  align
    samples/<model>.jsonl                         sample
    reports/<stem>.csv|json|svg                   train-reward, eval, ablate, report
    curves/<stage>.csv                            every training stage
    manifests/<stage>.json                        every stage

Each stage seed is ``derive_seed(run.seed, stage, section.seed)``.
"""

import argparse
import configparser
import dataclasses
import io
import json
import logging
import os
import pathlib
import platform
import sys

import numpy
import pandas
import scipy

from . import ConfigurationError, FlowAlignError, InputError, __version__
from .align import METHODS, SCHEDULES, DpoConfig, align_train, read_relabeled, write_relabeled
from .bench import (AXES, AblationSpec, BenchBase, accuracy_rows, comparison_report, emit_report,
                    flip_fraction, guided_sampler, held_out_conditions, prompt_keys, read_report,
                    relabel_pairs, run_ablation, sampler)
from .flow import (FlowConfig, FlowSchedule, euler_sample, load_velocity, save_velocity, train_flow,
                   write_samples)
from .guide import FORMS, GuidanceSpec, nrg_sample
from .io import atomic_write_bytes, atomic_write_text, config_hash, derive_seed, sha256_bytes
from .plotting import plot_curve
from .reward import (MODES, NoisyRewardConfig, RewardConfig, RewardWeights, evaluate_reward,
                     load_reward, save_reward, train_noisy_reward, train_reward)
from .toyworld import (AnnotatorModel, KnobDistribution, WorldConfig, build_corpus,
                       build_pref_dataset, likert_breakpoints, read_pref_dataset, split_by_condition,
                       tie_fractions)

logger = logging.getLogger(__name__)


# Configuration sections that are not a module's own config class

@dataclasses.dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "runs"


@dataclasses.dataclass(frozen=True)
class DataSection:
    n_pairs: int = 20000
    corpus_size: int = 20000
    n_frames: int = 16
    n_classes: int = 8
    arc_span: float = 0.4
    tie_band: float = 0.05
    flip_temperature: float = 0.1
    radial_noise_max: float = 0.55
    jitter_max: float = 0.1
    angle_error_max: float = 0.8
    val_classes: tuple = (3, 7)
    emit_gt: bool = False

    def __post_init__(self):
        if self.n_pairs < 1 or self.corpus_size < 1:
            raise ConfigurationError("n_pairs and corpus_size must be positive")
        # the derived configs check their own values
        self.world, self.annotator, self.knobs

    @property
    def world(self):
        return WorldConfig(self.n_frames, 2, self.n_classes, self.arc_span)

    @property
    def annotator(self):
        return AnnotatorModel(self.tie_band, self.flip_temperature)

    @property
    def knobs(self):
        return KnobDistribution(self.radial_noise_max, self.jitter_max, self.angle_error_max)


@dataclasses.dataclass(frozen=True)
class RelabelSection:
    weights: RewardWeights = RewardWeights()


@dataclasses.dataclass(frozen=True)
class GuideSection:
    weights: RewardWeights = RewardWeights()
    w_scale: float = 1.0
    cfg_scale: float = 1.0
    factor_cap: float = 20.0
    form: str = "shift"
    steps: int = 50

    def __post_init__(self):
        self.spec, self.schedule

    @property
    def spec(self):
        return GuidanceSpec(self.weights, self.w_scale, self.cfg_scale, self.factor_cap, self.form)

    @property
    def schedule(self):
        return FlowSchedule(self.steps)


@dataclasses.dataclass(frozen=True)
class BenchSection:
    n_prompts: int = 256
    eval_seeds: tuple = (0,)
    axis: str = "beta_value"
    grid: tuple = ("100", "500", "2000")
    seeds: tuple = (0, 1, 2)
    gt_eval: bool = True

    def __post_init__(self):
        if self.n_prompts < 1:
            raise ConfigurationError("n_prompts must be positive")
        if not self.eval_seeds:
            raise ConfigurationError("eval_seeds must not be empty")
        if self.axis not in AXES:
            raise ConfigurationError(f"unknown ablation axis '{self.axis}', expected one of {AXES}")


SECTIONS = {"run": RunSection,
            "data": DataSection,
            "flow": FlowConfig,
            "reward": RewardConfig,
            "noisy_reward": NoisyRewardConfig,
            "align": DpoConfig,
            "relabel": RelabelSection,
            "guide": GuideSection,
            "bench": BenchSection}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    run: RunSection = RunSection()
    data: DataSection = DataSection()
    flow: FlowConfig = FlowConfig()
    reward: RewardConfig = RewardConfig()
    noisy_reward: NoisyRewardConfig = NoisyRewardConfig()
    align: DpoConfig = DpoConfig()
    relabel: RelabelSection = RelabelSection()
    guide: GuideSection = GuideSection()
    bench: BenchSection = BenchSection()

    def __post_init__(self):
        bad = [c for c in self.data.val_classes if not 0 <= c < self.data.n_classes]
        if bad:
            raise ConfigurationError(f"validation classes {bad} are outside 0..{self.data.n_classes - 1}")
        if len(set(self.data.val_classes)) >= self.data.n_classes:
            raise ConfigurationError("val_classes leaves no condition class for training")
        if not self.data.val_classes:
            raise ConfigurationError("val_classes must name at least one held-out class")

    def to_json(self):
        return {name: {f.name: _plain(getattr(getattr(self, name), f.name))
                       for f in dataclasses.fields(getattr(self, name))}
                for name in SECTIONS}

    def identity(self):
        """Everything that determines the artifacts, which excludes the output root"""
        obj = self.to_json()
        del obj["run"]["out"]
        return obj

    @property
    def digest(self):
        return config_hash(self.identity())


def _plain(value):
    if isinstance(value, RewardWeights):
        return str(value)
    if isinstance(value, tuple):
        return list(value)
    return value


_BOOLEANS = configparser.ConfigParser.BOOLEAN_STATES


def _coerce(default, raw, where):
    """Convert `raw` to the type of the field default `default`"""
    try:
        if isinstance(default, RewardWeights):
            if isinstance(raw, (list, tuple)):
                return RewardWeights(*(float(v) for v in raw))
            return RewardWeights.parse(raw)
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            return _BOOLEANS[str(raw).strip().lower()]
        if isinstance(default, tuple):
            kind = type(default[0]) if default else str
            if isinstance(raw, str):
                raw = [v.strip() for v in raw.split(",") if v.strip()]
            return tuple(kind(v) for v in raw)
        if isinstance(default, int):
            if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
                raise ValueError(raw)
            return int(raw)
        if isinstance(default, float):
            if isinstance(raw, bool):
                raise ValueError(raw)
            return float(raw)
        if isinstance(raw, (dict, list)):
            raise ValueError(raw)
        return str(raw)
    except ConfigurationError as e:
        raise ConfigurationError(f"{where}: {e}") from None
    except (KeyError, TypeError, ValueError):
        raise ConfigurationError(f"{where}: cannot read {raw!r} as {type(default).__name__}") from None


def build_config(sections):
    """RunConfig from a mapping of section name to ``{key: raw value}``"""
    if not isinstance(sections, dict):
        raise ConfigurationError("a config must map section names to key-value tables")
    built = {}
    for name, values in sections.items():
        if name not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{name}], expected one of {tuple(SECTIONS)}")
        if not isinstance(values, dict):
            raise ConfigurationError(f"config section [{name}] must be a key-value table")
        cls = SECTIONS[name]
        defaults = cls()
        names = [f.name for f in dataclasses.fields(cls)]
        kwargs = {}
        for key, raw in values.items():
            if key not in names:
                raise ConfigurationError(f"unknown key '{key}' in [{name}]")
            kwargs[key] = _coerce(getattr(defaults, key), raw, f"[{name}] {key}")
        try:
            built[name] = cls(**kwargs)
        except ConfigurationError as e:
            raise ConfigurationError(f"[{name}]: {e}") from None
    return RunConfig(**built)


def parse_config(text, fmt="ini"):
    if fmt == "json":
        try:
            sections = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config is not valid JSON: {e}") from None
        return build_config(sections)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"config is not valid INI: {e}") from None
    if parser.defaults():
        raise ConfigurationError("keys outside a section are not allowed")
    return build_config({name: dict(parser[name]) for name in parser.sections()})


def validate_config(path=None):
    """Read, default and cross-check a config file; None gives the defaults

    Files ending in ``.json`` are read as JSON, anything else as INI.
    """
    if path is None:
        return RunConfig()
    path = pathlib.Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read config '{path}': {e.strerror}") from e
    return parse_config(text, "json" if path.suffix.lower() == ".json" else "ini")


def _render_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(config):
    """The effective config as INI text that :func:`parse_config` reads back unchanged"""
    lines = []
    for name in SECTIONS:
        section = getattr(config, name)
        lines.append(f"[{name}]")
        lines.extend(f"{f.name} = {_render_value(getattr(section, f.name))}"
                     for f in dataclasses.fields(section))
        lines.append("")
    return "\n".join(lines)


# Workspace and manifests

def _digest(path):
    data = path.read_bytes()
    if path.suffix == ".csv" and data.startswith(b"# generated"):
        data = data.split(b"\n", 1)[1] if b"\n" in data else b""
    return sha256_bytes(data)


class Workspace:
    """Artifact layout under one output root"""

    def __init__(self, root):
        self.root = pathlib.Path(root)

    def path(self, relative):
        return self.root/relative

    def require(self, relative, producer):
        path = self.path(relative)
        if not path.exists():
            raise InputError(f"missing artifact '{relative}' under {self.root}, run '{producer}' first")
        return path

    def label(self, path):
        path = pathlib.Path(path)
        return path.relative_to(self.root).as_posix() if path.is_relative_to(self.root) else str(path)

    def model_path(self, name):
        """A model by name (``flow``, ``aligned_dpo``, ...) or by file path"""
        candidate = pathlib.Path(name)
        if candidate.suffix == ".faln" and candidate.exists():
            return candidate
        return self.require(f"models/{name}.faln", "train-flow" if name == "flow" else "align")

    def write_manifest(self, stage, config, seeds, inputs, outputs):
        """Record what a stage read and wrote, with checksums and versions"""
        def checksums(paths):
            return {self.label(p): _digest(pathlib.Path(p)) for p in paths}

        manifest = {"stage": stage,
                    "config_hash": config.digest,
                    "seeds": {k: int(v) for k, v in seeds.items()},
                    "inputs": checksums(inputs),
                    "outputs": checksums(outputs),
                    "versions": {"flowalign": __version__, "numpy": numpy.__version__,
                                 "scipy": scipy.__version__, "pandas": pandas.__version__,
                                 "python": platform.python_version()}}
        path = atomic_write_text(self.path(f"manifests/{stage}.json"),
                                 json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        logger.info("wrote manifest %s", path)
        return path


def _save_npy(path, array):
    buffer = io.BytesIO()
    numpy.save(buffer, array, allow_pickle=False)
    return atomic_write_bytes(path, buffer.getvalue())


def _load_npy(path):
    try:
        return numpy.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise InputError(f"cannot read array '{path}': {e}") from e


def _write_curve(ws, name, curve):
    return atomic_write_text(ws.path(f"curves/{name}.csv"), curve.to_csv(index=False, lineterminator="\n"))


def stage_seed(config, stage, section_seed=0):
    return derive_seed(config.run.seed, stage, section_seed)


def _splits(ws, config):
    prefs = ws.require("data/prefs.jsonl", "gen-data")
    header, records = read_pref_dataset(prefs)
    train, val = split_by_condition(records, config.data.val_classes)
    return prefs, header, train, val


# Stages

def gen_data(ws, config, args):
    data = config.data
    if args.emit_gt:
        data = dataclasses.replace(data, emit_gt=True)
    if args.n_pairs is not None:
        data = dataclasses.replace(data, n_pairs=args.n_pairs)
    seeds = {"corpus": stage_seed(config, "gen-data", "corpus"),
             "prefs": stage_seed(config, "gen-data", "prefs")}
    world = data.world
    frames, conditions = build_corpus(data.corpus_size, data.knobs, seeds["corpus"], world)
    outputs = [_save_npy(ws.path("data/corpus.npy"), frames),
               _save_npy(ws.path("data/corpus_conditions.npy"), conditions.astype(numpy.int64))]
    breakpoints = likert_breakpoints(frames, conditions, world.n_classes)
    _, records = build_pref_dataset(data.n_pairs, data.knobs, data.annotator, seeds["prefs"], world,
                                    breakpoints, ws.path("data/prefs.jsonl"), data.emit_gt, args.progress)
    outputs.append(ws.path("data/prefs.jsonl"))
    logger.info("tie fractions %s", tie_fractions(records))
    ws.write_manifest("gen-data", config, seeds, [], outputs)


def train_flow_stage(ws, config, args):
    corpus = ws.require("data/corpus.npy", "gen-data")
    corpus_conditions = ws.require("data/corpus_conditions.npy", "gen-data")
    frames = _load_npy(corpus)
    seed = stage_seed(config, "train-flow", config.flow.seed)
    cfg = dataclasses.replace(config.flow, seed=seed)
    model, curve = train_flow(frames.reshape(frames.shape[0], -1), _load_npy(corpus_conditions),
                              config.data.n_classes, cfg, progress=args.progress)
    outputs = [save_velocity(ws.path("models/flow.faln"), model, stage="train-flow", config=config.digest),
               _write_curve(ws, "flow", curve)]
    ws.write_manifest("train-flow", config, {"flow": seed}, [corpus, corpus_conditions], outputs)


def train_reward_stage(ws, config, args):
    prefs, header, train, val = _splits(ws, config)
    seed = stage_seed(config, "train-reward", config.reward.seed)
    cfg = dataclasses.replace(config.reward, seed=seed, mode=args.mode or config.reward.mode)
    model, stats, curve = train_reward(train, val, header.world.n_classes, cfg, args.progress)
    table = evaluate_reward(model, val, stats)
    report = pandas.DataFrame([("reward", cfg.mode, m, d, 0, v, lo, hi)
                               for m, d, v, lo, hi in accuracy_rows(table)],
                              columns=["axis", "setting", "metric", "dimension", "seed", "value",
                                       "ci_low", "ci_high"])
    paths = emit_report(report, ws.path("reports"), config.identity(), stem=f"reward_{cfg.mode}")
    pairs = relabel_pairs(model, stats, train, config.relabel.weights)
    logger.info("relabelling flipped %.1f%% of the pairs", 100*flip_fraction(pairs))
    outputs = [save_reward(ws.path("models/reward.faln"), model, stats, stage="train-reward",
                           mode=cfg.mode, config=config.digest),
               write_relabeled(ws.path("data/relabeled.jsonl"), pairs),
               _write_curve(ws, "reward", curve), *paths.values()]
    ws.write_manifest("train-reward", config, {"reward": seed}, [prefs], outputs)


def train_noisy_reward_stage(ws, config, args):
    prefs, header, train, val = _splits(ws, config)
    seed = stage_seed(config, "train-noisy-reward", config.noisy_reward.seed)
    cfg = dataclasses.replace(config.noisy_reward, seed=seed)
    model, curve = train_noisy_reward(train, val, header.world.n_classes, cfg, args.progress)
    outputs = [save_reward(ws.path("models/noisy_reward.faln"), model, stage="train-noisy-reward",
                           config=config.digest),
               _write_curve(ws, "noisy_reward", curve)]
    ws.write_manifest("train-noisy-reward", config, {"noisy_reward": seed}, [prefs], outputs)


def align_stage(ws, config, args):
    relabeled = ws.require("data/relabeled.jsonl", "train-reward")
    flow_path = ws.require("models/flow.faln", "train-flow")
    pretrained, _ = load_velocity(flow_path)
    seed = stage_seed(config, "align", config.align.seed)
    overrides = {"seed": seed}
    if args.beta is not None:
        overrides["beta"] = args.beta
    if args.schedule is not None:
        overrides["schedule"] = args.schedule
    cfg = dataclasses.replace(config.align, **overrides)
    model, curve = align_train(args.method, pretrained, read_relabeled(relabeled), cfg, args.progress)
    outputs = [save_velocity(ws.path(f"models/aligned_{args.method}.faln"), model, stage="align",
                             method=args.method, beta=cfg.beta, schedule=cfg.schedule, config=config.digest),
               _write_curve(ws, f"align_{args.method}", curve)]
    ws.write_manifest(f"align-{args.method}", config, {"align": seed}, [relabeled, flow_path], outputs)


def _guide_section(config, args):
    """The [guide] section with command line overrides applied"""
    overrides = {}
    if getattr(args, "weights", None) is not None:
        overrides["weights"] = RewardWeights.parse(args.weights)
    for name in ("w_scale", "cfg_scale", "factor_cap", "form", "steps"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return dataclasses.replace(config.guide, **overrides)


def _eval_prompts(config, n_prompts=None):
    return held_out_conditions(n_prompts or config.bench.n_prompts, config.data.val_classes)


def sample_stage(ws, config, args):
    guide = _guide_section(config, args)
    model_path = ws.model_path(args.model)
    model, _ = load_velocity(model_path)
    conditions, seeds = prompt_keys(_eval_prompts(config, args.n_prompts), config.bench.eval_seeds)
    inputs = [model_path]
    name = pathlib.Path(args.model).stem
    outputs = []
    if args.guided:
        rm_path = ws.require("models/noisy_reward.faln", "train-noisy-reward")
        noisy_rm, _, _ = load_reward(rm_path)
        inputs.append(rm_path)
        samples, trace = nrg_sample(model, noisy_rm, guide.spec, guide.schedule, conditions, seeds,
                                    args.progress)
        name += "_guided"
        if args.trace:
            outputs.append(trace.write_csv(ws.path(f"samples/{name}_trace.csv")))
    else:
        samples = euler_sample(model, conditions, guide.schedule, guide.cfg_scale, seeds,
                               progress=args.progress)
    outputs.insert(0, write_samples(ws.path(f"samples/{name}.jsonl"), samples, conditions, seeds))
    ws.write_manifest(f"sample-{name}", config, {f"eval_{s}": s for s in config.bench.eval_seeds},
                      inputs, outputs)


def eval_stage(ws, config, args):
    guide = _guide_section(config, args)
    rm_path = ws.require("models/reward.faln", "train-reward")
    reward, stats, _ = load_reward(rm_path)
    model_path, against_path = ws.model_path(args.model), ws.model_path(args.against)
    model, _ = load_velocity(model_path)
    against, _ = load_velocity(against_path)
    inputs = [rm_path, model_path, against_path]
    name = pathlib.Path(args.model).stem
    if args.guided:
        noisy_path = ws.require("models/noisy_reward.faln", "train-noisy-reward")
        noisy_rm, _, _ = load_reward(noisy_path)
        inputs.append(noisy_path)
        gen_a = guided_sampler(model, noisy_rm, guide.spec, guide.schedule)
        name += "_guided"
    else:
        gen_a = sampler(model, guide.schedule, guide.cfg_scale)
    gen_b = sampler(against, guide.schedule, guide.cfg_scale)
    setting = f"{name}_vs_{pathlib.Path(args.against).stem}"
    world = config.data.world if config.bench.gt_eval else None
    report = comparison_report(gen_a, gen_b, reward, stats, _eval_prompts(config), config.bench.eval_seeds,
                               setting, world)
    paths = emit_report(report, ws.path("reports"), config.identity(), stem=f"eval_{setting}")
    ws.write_manifest(f"eval-{setting}", config, {f"eval_{s}": s for s in config.bench.eval_seeds},
                      inputs, list(paths.values()))


ABLATION_NEEDS = {"rm_mode": (),
                  "data_fraction": (),
                  "beta_value": ("flow", "reward", "relabeled"),
                  "beta_schedule": ("flow", "reward", "relabeled"),
                  "guidance_weights": ("flow", "reward", "noisy_reward"),
                  "w_scale": ("flow", "reward", "noisy_reward")}


def ablate_stage(ws, config, args):
    bench = config.bench
    spec = AblationSpec(args.axis or bench.axis,
                        tuple(args.grid.split(",")) if args.grid else bench.grid,
                        tuple(args.seeds.split(",")) if args.seeds else bench.seeds)
    prefs, header, train, val = _splits(ws, config)
    base = BenchBase(header.world, train, val, _eval_prompts(config),
                     schedule=config.guide.schedule, reward_cfg=config.reward, dpo_cfg=config.align,
                     guidance=config.guide.spec, seed=stage_seed(config, "ablate"), gt_eval=bench.gt_eval)
    inputs = [prefs]
    needs = ABLATION_NEEDS[spec.axis]
    if "flow" in needs:
        inputs.append(ws.require("models/flow.faln", "train-flow"))
        base.pretrained, _ = load_velocity(inputs[-1])
    if "reward" in needs:
        inputs.append(ws.require("models/reward.faln", "train-reward"))
        base.reward, base.stats, _ = load_reward(inputs[-1])
    if "relabeled" in needs:
        inputs.append(ws.require("data/relabeled.jsonl", "train-reward"))
        base.pairs = read_relabeled(inputs[-1])
    if "noisy_reward" in needs:
        inputs.append(ws.require("models/noisy_reward.faln", "train-noisy-reward"))
        base.noisy_rm, _, _ = load_reward(inputs[-1])
    ledger = ws.path(f"reports/ablation_{spec.axis}.ledger.jsonl")
    report = run_ablation(spec, base, ledger, args.progress)
    paths = emit_report(report, ws.path("reports"), config.identity(), stem=f"ablation_{spec.axis}")
    ws.write_manifest(f"ablate-{spec.axis}", config, {"ablate": base.seed}, inputs,
                      [ledger, *paths.values()])


def report_stage(ws, config, args):
    sources = sorted(p for p in ws.path("reports").glob("*.csv") if p.stem != "summary")
    curves = sorted(ws.path("curves").glob("*.csv"))
    if not sources and not curves:
        raise InputError(f"no reports or training curves under {ws.root}")
    outputs = []
    if sources:
        combined = pandas.concat([read_report(p) for p in sources], ignore_index=True)
        outputs.extend(emit_report(combined, ws.path("reports"), config.identity(), stem="summary").values())
    for path in curves:
        outputs.append(plot_curve(pandas.read_csv(path), path.with_suffix(".svg"), config.digest))
    ws.write_manifest("report", config, {}, sources + curves, outputs)


STAGES = {"gen-data": gen_data,
          "train-flow": train_flow_stage,
          "train-reward": train_reward_stage,
          "train-noisy-reward": train_noisy_reward_stage,
          "align": align_stage,
          "sample": sample_stage,
          "eval": eval_stage,
          "ablate": ablate_stage,
          "report": report_stage}


# Argument parsing

def _common_options(top_level):
    """Options accepted before and after the command

    Subcommand copies default to SUPPRESS so they do not overwrite values given
    before the command.
    """
    common = argparse.ArgumentParser(add_help=False,
                                     argument_default=None if top_level else argparse.SUPPRESS)
    common.add_argument("--config", help="INI or JSON config file (defaults when omitted)")
    common.add_argument("--seed", type=int, help="global seed, overrides [run] seed")
    common.add_argument("--out", help="output root, overrides [run] out and FLOWALIGN_OUT")
    common.add_argument("--print-effective", action="store_true", help="print the effective config")
    common.add_argument("--progress", action="store_true", help="display progress bars")
    common.add_argument("-v", "--verbose", action="count", help="more logging, repeatable")
    return common


def _guidance_options(parser):
    parser.add_argument("--guided", action="store_true", help="steer with the noisy reward model")
    parser.add_argument("--weights", help="guidance weights vq:mq:ta")
    parser.add_argument("--w-scale", dest="w_scale", type=float)
    parser.add_argument("--cfg-scale", dest="cfg_scale", type=float)
    parser.add_argument("--factor-cap", dest="factor_cap", type=float)
    parser.add_argument("--form", choices=FORMS)
    parser.add_argument("--steps", type=int, help="Euler steps")


def build_parser():
    common = _common_options(top_level=False)
    parser = argparse.ArgumentParser(prog="flowalign", parents=[_common_options(top_level=True)],
                                     description="Reward modelling and alignment of rectified flows")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", parents=[common], help="toy corpus and preference dataset")
    p.add_argument("--emit-gt", dest="emit_gt", action="store_true", help="store ground-truth rewards")
    p.add_argument("--n-pairs", dest="n_pairs", type=int)

    sub.add_parser("train-flow", parents=[common], help="pretrain the velocity field")

    p = sub.add_parser("train-reward", parents=[common], help="fit the reward model and relabel pairs")
    p.add_argument("--mode", choices=MODES)

    sub.add_parser("train-noisy-reward", parents=[common], help="fit the noisy-latent reward model")

    p = sub.add_parser("align", parents=[common], help="align the pretrained field on relabelled pairs")
    p.add_argument("--method", choices=METHODS, default="dpo")
    p.add_argument("--beta", type=float)
    p.add_argument("--schedule", choices=SCHEDULES)

    p = sub.add_parser("sample", parents=[common], help="draw samples on held-out prompts")
    p.add_argument("--model", default="flow", help="model name under models/ or a .faln path")
    p.add_argument("--n-prompts", dest="n_prompts", type=int)
    p.add_argument("--trace", action="store_true", help="write the guidance trace")
    _guidance_options(p)

    p = sub.add_parser("eval", parents=[common], help="paired win rates of two models")
    p.add_argument("--model", default="aligned_dpo")
    p.add_argument("--against", default="flow")
    _guidance_options(p)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    p.add_argument("--axis", choices=AXES)
    p.add_argument("--grid", help="comma separated settings")
    p.add_argument("--seeds", help="comma separated seeds")

    sub.add_parser("report", parents=[common], help="combine reports and plot training curves")
    return parser


def effective_config(args):
    """Config file, then FLOWALIGN_OUT, then command line overrides"""
    config = validate_config(args.config)
    run = config.run
    if os.environ.get("FLOWALIGN_OUT"):
        run = dataclasses.replace(run, out=os.environ["FLOWALIGN_OUT"])
    if args.seed is not None:
        run = dataclasses.replace(run, seed=args.seed)
    if args.out is not None:
        run = dataclasses.replace(run, out=args.out)
    return dataclasses.replace(config, run=run)


def dispatch(argv, configure_logging=False):
    """Run one subcommand, returns the exit code: 0 ok, 1 failure, 2 usage error

    :param argv: arguments without the program name
    :param configure_logging: set up root logging from ``-v`` counts
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    if configure_logging:
        level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose or 0, 2)]
        logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = effective_config(args)
        if args.print_effective:
            sys.stdout.write(render_config(config))
            if args.command is None:
                return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            sys.stderr.write("flowalign: error: a command is required\n")
            return 2
        logger.info("%s with config %s in %s", args.command, config.digest, config.run.out)
        STAGES[args.command](Workspace(config.run.out), config, args)
    except FlowAlignError as e:
        sys.stderr.write(f"error: {type(e).__name__}: {e}\n")
        return 1
    return 0


def main():
    sys.exit(dispatch(sys.argv[1:], configure_logging=True))


if __name__ == "__main__":
    main()
