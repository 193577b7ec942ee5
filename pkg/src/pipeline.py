"""Experiment orchestration: config, run directory, manifests and comparison tables."""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml

from .corpus import (
    DEFAULT_SEP_TOKEN,
    Origin,
    ParallelCorpus,
    SentencePair,
    balance_oversample,
    concat_multilingual,
    is_tag,
    load_corpus,
    load_corpus_from_files,
    make_g2p_horizontal,
    make_g2p_vertical,
    mix_backtranslation,
    normalize_whitespace,
    save_corpus,
    split_corpus,
    tag_corpus,
)
from .decoder import BeamConfig, RescoreConfig, grid_search, rescore, translate, write_nbest
from .errors import ConfigError, LoresmtError, MissingMetric, StageError
from .g2p import load_rules
from .langcode import LangCode
from .metrics import MetricConfig, evaluate, evaluate_multitask, metric_function
from .model import ModelConfig, init_model, load_checkpoint, params_digest, transfer_embeddings
from .segment import SegmenterMode, char_transfer, get_segmenter, load_segmenter
from .synthetic import DEFAULT_VOCAB, make_sister_corpus
from .trainer import TrainPlan, Trainer

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TRAIN_CORPUS = "train"
MULTITASK_MODES = ("none", "vertical", "horizontal")
BALANCE_POLICIES = ("none", "oversample")
BALANCE_ORDERS = ("before_multitask", "after_multitask")


def _check_keys(section: str, data: dict, cls):
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"Unknown {section} options: {sorted(unknown)}")


def _require_file(path: Optional[str], what: str):
    if path is not None and not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")


@dataclass
class CorpusSpec:
    """One corpus declaration: raw files, a saved corpus, or a synthetic sister language."""

    name: str
    src: Optional[str] = None
    tgt: Optional[str] = None
    prefix: Optional[str] = None
    src_lang: Optional[str] = None
    tgt_lang: Optional[str] = None
    origin: str = "parallel"
    synthetic: Optional[dict] = None
    held_out: int = 0

    def __post_init__(self):
        sources = [self.src is not None, self.prefix is not None, self.synthetic is not None]
        if sum(sources) != 1:
            raise ConfigError(f"Corpus '{self.name}' needs exactly one of src/tgt, prefix or synthetic")
        if self.src is not None and (self.tgt is None or self.src_lang is None or self.tgt_lang is None):
            raise ConfigError(f"Corpus '{self.name}' with src needs tgt, src_lang and tgt_lang")
        if self.synthetic is not None:
            unknown = set(self.synthetic) - {"size", "rules", "vocab", "seed", "min_len", "max_len"}
            if unknown:
                raise ConfigError(f"Unknown synthetic options in '{self.name}': {sorted(unknown)}")
            if "rules" not in self.synthetic or self.src_lang is None:
                raise ConfigError(f"Synthetic corpus '{self.name}' needs rules and src_lang")
        try:
            Origin(self.origin)
        except ValueError:
            raise ConfigError(f"Corpus '{self.name}': unknown origin '{self.origin}'")
        if self.held_out < 0:
            raise ConfigError(f"Corpus '{self.name}': held_out must be >= 0")

    def input_files(self) -> List[str]:
        if self.src is not None:
            return [self.src, self.tgt]
        if self.prefix is not None:
            return [f"{self.prefix}.src", f"{self.prefix}.tgt", f"{self.prefix}.json"]
        return [self.synthetic["rules"], self.synthetic.get("vocab", str(DEFAULT_VOCAB))]

    def load(self) -> ParallelCorpus:
        if self.src is not None:
            return load_corpus_from_files(
                self.src, self.tgt, self.src_lang, self.tgt_lang, name=self.name, origin=Origin(self.origin)
            )
        if self.prefix is not None:
            return replace(load_corpus(self.prefix), name=self.name)
        synth = self.synthetic
        return make_sister_corpus(
            n=synth.get("size", 1000),
            rules_path=synth["rules"],
            src_lang=self.src_lang,
            tgt_lang=self.tgt_lang,
            seed=synth.get("seed", 1),
            vocab_path=synth.get("vocab", DEFAULT_VOCAB),
            min_len=synth.get("min_len", 3),
            max_len=synth.get("max_len", 8),
            name=self.name,
        )


@dataclass
class MultitaskSpec:
    mode: str = "none"
    g2p_rules: Optional[str] = None
    sep_token: str = DEFAULT_SEP_TOKEN
    balance_order: str = "before_multitask"

    def __post_init__(self):
        if self.mode not in MULTITASK_MODES:
            raise ConfigError(f"multitask mode must be one of {MULTITASK_MODES}")
        if self.mode != "none" and self.g2p_rules is None:
            raise ConfigError(f"multitask mode '{self.mode}' needs g2p_rules")
        if not is_tag(self.sep_token):
            raise ConfigError(f"sep_token must look like a reserved token <...>, got {self.sep_token!r}")
        if self.balance_order not in BALANCE_ORDERS:
            raise ConfigError(f"balance_order must be one of {BALANCE_ORDERS}")


@dataclass
class BacktranslationSpec:
    corpus: str
    parallel: str
    ratio: float = 1.0


@dataclass
class GridSpec:
    n_grid: List[float] = field(default_factory=lambda: [1.0])
    b_grid: List[int] = field(default_factory=lambda: [8])
    metric: str = "bleu"


@dataclass
class RescoreSpec:
    char_run: str
    lam: float = 1.0
    normalize: bool = True
    exponent: float = 1.0

    def __post_init__(self):
        RescoreConfig(lam=self.lam, normalize=self.normalize, exponent=self.exponent)

    @property
    def rescore_config(self) -> RescoreConfig:
        return RescoreConfig(lam=self.lam, normalize=self.normalize, exponent=self.exponent)


@dataclass
class ExperimentConfig:
    name: str
    corpora: List[CorpusSpec]
    train: dict
    seed: int = 1
    balance: str = "none"
    multitask: MultitaskSpec = field(default_factory=MultitaskSpec)
    backtranslation: Optional[BacktranslationSpec] = None
    segmenter: dict = field(default_factory=lambda: {"mode": "char"})
    transfer_from: Optional[str] = None
    model: dict = field(default_factory=lambda: {"preset": "base"})
    decode: BeamConfig = field(default_factory=BeamConfig)
    grid_search: Optional[GridSpec] = None
    rescore: Optional[RescoreSpec] = None
    metrics: MetricConfig = field(default_factory=MetricConfig)

    @classmethod
    def from_dict(cls, data: dict, defaults: Optional[dict] = None) -> "ExperimentConfig":
        """
        Build and validate an experiment config.

        Args:
            data: Parsed experiment file
            defaults: Toolkit defaults (``decode``, ``rescore``, ``metrics`` sections)

        Returns:
            Validated config
        """
        defaults = defaults or {}
        data = dict(data)
        _check_keys("experiment", data, cls)
        for required in ("name", "corpora", "train"):
            if required not in data:
                raise ConfigError(f"Experiment config needs '{required}'")

        corpora = []
        for raw in data.pop("corpora"):
            _check_keys("corpus", raw, CorpusSpec)
            corpora.append(CorpusSpec(**raw))

        multitask = data.pop("multitask", {}) or {}
        _check_keys("multitask", multitask, MultitaskSpec)

        bt = data.pop("backtranslation", None)
        if bt is not None:
            _check_keys("backtranslation", bt, BacktranslationSpec)
            bt = BacktranslationSpec(**bt)

        grid = data.pop("grid_search", None)
        if grid is not None:
            _check_keys("grid_search", grid, GridSpec)
            grid = GridSpec(**grid)

        rescore_cfg = data.pop("rescore", None)
        if rescore_cfg is not None:
            rescore_cfg = {**defaults.get("rescore", {}), **rescore_cfg}
            if "lambda" in rescore_cfg:
                rescore_cfg["lam"] = rescore_cfg.pop("lambda")
            _check_keys("rescore", rescore_cfg, RescoreSpec)
            rescore_cfg = RescoreSpec(**rescore_cfg)

        decode = BeamConfig.from_dict({**defaults.get("decode", {}), **(data.pop("decode", {}) or {})})
        metrics = MetricConfig.from_dict({**defaults.get("metrics", {}), **(data.pop("metrics", {}) or {})})

        config = cls(
            corpora=corpora,
            multitask=MultitaskSpec(**multitask),
            backtranslation=bt,
            grid_search=grid,
            rescore=rescore_cfg,
            decode=decode,
            metrics=metrics,
            **data,
        )
        config.validate()
        return config

    def validate(self):
        names = [c.name for c in self.corpora]
        if not names:
            raise ConfigError("Experiment needs at least one corpus")
        if len(set(names)) != len(names) or TRAIN_CORPUS in names:
            raise ConfigError(f"Corpus names must be unique and not '{TRAIN_CORPUS}': {names}")
        if self.balance not in BALANCE_POLICIES:
            raise ConfigError(f"balance must be one of {BALANCE_POLICIES}")

        for corpus in self.corpora:
            for path in corpus.input_files():
                _require_file(path, f"Input of corpus '{corpus.name}'")
        _require_file(self.multitask.g2p_rules, "G2P rule file")
        if self.multitask.g2p_rules is not None and load_rules(self.multitask.g2p_rules).language is None:
            raise ConfigError(f"G2P rule file {self.multitask.g2p_rules} has no '# language:' header")

        if self.backtranslation is not None:
            for ref in (self.backtranslation.corpus, self.backtranslation.parallel):
                if ref not in names:
                    raise ConfigError(f"backtranslation refers to unknown corpus '{ref}'")

        SegmenterMode.from_dict(self.segmenter)
        if self.transfer_from is not None:
            if self.segmenter.get("mode") != "char":
                raise ConfigError("transfer_from needs segmenter mode 'char'")
            _require_file(str(Path(self.transfer_from) / MANIFEST_NAME), "Transfer run manifest")

        plan = self.train_plan
        for stage in plan.stages:
            if stage.corpus not in names and stage.corpus != TRAIN_CORPUS:
                raise ConfigError(f"Stage '{stage.name}' refers to unknown corpus '{stage.corpus}'")
        _require_file(plan.init_checkpoint, "Initial checkpoint")

        if self.rescore is not None:
            _require_file(str(Path(self.rescore.char_run) / MANIFEST_NAME), "Rescoring run manifest")

    @property
    def train_plan(self) -> TrainPlan:
        train = dict(self.train)
        if self.transfer_from is not None and train.get("init_checkpoint") is None:
            # Fine-tuning starts from the transferred model.
            manifest = RunManifest.load(self.transfer_from)
            train["init_checkpoint"] = str(Path(self.transfer_from) / manifest.final_checkpoint)
        return TrainPlan.from_dict(train, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def input_files(self) -> List[str]:
        paths = [p for corpus in self.corpora for p in corpus.input_files()]
        if self.multitask.g2p_rules:
            paths.append(self.multitask.g2p_rules)
        if self.train_plan.init_checkpoint:
            paths.append(self.train_plan.init_checkpoint)
        for run in (self.transfer_from, self.rescore.char_run if self.rescore else None):
            if run is not None:
                paths.append(str(Path(run) / MANIFEST_NAME))
        return paths


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config.to_dict()).encode("utf-8")).hexdigest()


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def load_experiment_config(path, defaults: Optional[dict] = None) -> ExperimentConfig:
    """Read a YAML or JSON experiment file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Experiment config not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Malformed experiment config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Experiment config must be a mapping: {path}")
    return ExperimentConfig.from_dict(data, defaults=defaults)


@dataclass
class RunManifest:
    name: str
    config_hash: str
    inputs: Dict[str, str]
    artifacts: Dict[str, str]
    metrics: Dict[str, Dict[str, Dict[str, float]]]
    final_checkpoint: Optional[str] = None
    content_hash: str = ""

    def compute_content_hash(self) -> str:
        data = asdict(self)
        data.pop("content_hash")
        return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"Run manifest not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls(**json.load(f))


def direction_key(direction) -> str:
    src, tgt = direction
    return f"{src}-{tgt}"


def load_run_model(run_dir):
    """Segmenter and final model of a finished run."""
    run_dir = Path(run_dir)
    manifest = RunManifest.load(run_dir)
    if manifest.final_checkpoint is None:
        raise ConfigError(f"Run {run_dir} has no final checkpoint")
    segmenter = load_segmenter(run_dir / "segmenter.json")
    model, _ = load_checkpoint(run_dir / manifest.final_checkpoint)
    model.eval()
    return segmenter, model


class ExperimentRunner:
    """Execute one experiment step by step inside its run directory."""

    STEPS = ("prepare", "segment", "train", "decode", "rescore", "evaluate")

    def __init__(self, config: ExperimentConfig, base_dir="output", show_progress: bool = False,
                 verbose: bool = False):
        """
        Initialize the runner.

        Args:
            config: Validated experiment config
            base_dir: Parent directory of run directories
            show_progress: Display tqdm bars during training and decoding
            verbose: Print ``  → detail`` lines for each step
        """
        self.config = config
        self.run_dir = Path(base_dir) / config.name
        self.show_progress = show_progress
        self.verbose = verbose

        self.train_sets: Dict[str, ParallelCorpus] = {}
        self.dev_sets: Dict[str, ParallelCorpus] = {}
        self.segmenter = None
        self.row_map = None
        self.transfer_model = None
        self.model = None
        self.final_checkpoint: Optional[Path] = None
        self.nbest: Dict[str, list] = {}
        self.hypotheses: Dict[str, List[str]] = {}
        self.metrics: Dict[str, Dict[str, Dict[str, float]]] = {}

    def _say(self, message: str):
        logger.info(message)
        if self.verbose:
            print(f"  → {message}")

    def run(self) -> RunManifest:
        for step in self.STEPS:
            self.run_step(step)
        return self.write_manifest()

    def run_step(self, step: str):
        """Run one named step; failures are re-raised as StageError."""
        if step not in self.STEPS:
            raise ConfigError(f"Unknown step: {step}")
        try:
            getattr(self, step)()
        except StageError:
            raise
        except (LoresmtError, OSError, ValueError, KeyError, RuntimeError) as e:
            raise StageError(step, e) from e

    # Steps

    def prepare(self):
        cfg = self.config
        self.run_dir.mkdir(parents=True, exist_ok=True)
        prepared = self.run_dir / "prepared"

        corpora: Dict[str, ParallelCorpus] = {}
        dev_pairs: Dict[str, List[SentencePair]] = {}
        for spec in cfg.corpora:
            corpus = spec.load()
            self._say(f"Loaded corpus '{spec.name}': {len(corpus)} pairs")
            if spec.held_out:
                corpus, dev = split_corpus(corpus, spec.held_out, cfg.seed)
                for pair in tag_corpus(dev):
                    dev_pairs.setdefault(direction_key(pair.direction), []).append(pair)
            corpora[spec.name] = replace(tag_corpus(corpus), name=spec.name)

        bt = cfg.backtranslation
        if bt is not None:
            mixed = mix_backtranslation(corpora[bt.parallel], corpora.pop(bt.corpus), bt.ratio, seed=cfg.seed)
            corpora[bt.parallel] = replace(mixed, name=bt.parallel)
            self._say(f"Mixed backtranslation into '{bt.parallel}': {len(mixed)} pairs")

        multitask = cfg.multitask
        balance_first = multitask.balance_order == "before_multitask"
        if cfg.balance == "oversample" and balance_first:
            corpora = self._balance(corpora)
        if multitask.mode != "none":
            corpora = self._add_multitask(corpora)
        if cfg.balance == "oversample" and not balance_first:
            corpora = self._balance(corpora)

        train = concat_multilingual(list(corpora.values()), cfg.seed, name=TRAIN_CORPUS)
        self.train_sets = {TRAIN_CORPUS: train, **corpora}
        for name, corpus in self.train_sets.items():
            save_corpus(corpus, prepared / name)

        self.dev_sets = {}
        for key, pairs in sorted(dev_pairs.items()):
            self.dev_sets[key] = ParallelCorpus(name=f"dev.{key}", pairs=tuple(pairs))
            save_corpus(self.dev_sets[key], prepared / f"dev.{key}")
        self._say(f"Prepared {len(train)} training pairs, {len(self.dev_sets)} dev directions")

    def _balance(self, corpora: Dict[str, ParallelCorpus]) -> Dict[str, ParallelCorpus]:
        balanced = balance_oversample(list(corpora.values()), self.config.seed)
        return dict(zip(corpora, balanced))

    def _add_multitask(self, corpora: Dict[str, ParallelCorpus]) -> Dict[str, ParallelCorpus]:
        multitask = self.config.multitask
        g2p = load_rules(multitask.g2p_rules)
        result = {}
        for name, corpus in corpora.items():
            if any(p.src_lang.base != g2p.language.base for p in corpus):
                self._say(f"Corpus '{name}' has non-{g2p.language} sources; no multi-task data added")
                result[name] = corpus
            elif multitask.mode == "vertical":
                result[name] = replace(make_g2p_vertical(corpus, g2p), name=name)
            else:
                result[name] = replace(make_g2p_horizontal(corpus, g2p, multitask.sep_token), name=name)
        return result

    def segment(self):
        cfg = self.config
        train = self.train_sets[TRAIN_CORPUS]
        lines = train.sources + train.targets
        tags = [cfg.multitask.sep_token] if cfg.multitask.mode == "horizontal" else []

        if cfg.transfer_from is not None:
            subword, model = load_run_model(cfg.transfer_from)
            self.segmenter, self.row_map = char_transfer(subword, extra_lines=lines + tags)
            self.transfer_model = model
            self._say(f"Derived character vocabulary from {cfg.transfer_from}")
        else:
            self.segmenter = get_segmenter(cfg.segmenter, lines, tags=tags)
        self.segmenter.save(self.run_dir / "segmenter.json")
        self._say(f"Segmenter ({self.segmenter.mode}) vocabulary size {len(self.segmenter.vocab)}")

    def train(self):
        cfg = self.config
        plan = cfg.train_plan
        vocab_size = len(self.segmenter.vocab)

        if self.transfer_model is not None:
            model = transfer_embeddings(self.transfer_model, self.row_map)
        elif plan.init_checkpoint is not None:
            model, _ = load_checkpoint(plan.init_checkpoint)
            if model.config.vocab_size != vocab_size:
                raise ConfigError(
                    f"Checkpoint vocabulary {model.config.vocab_size} does not match segmenter {vocab_size}"
                )
        else:
            model_cfg = {"seed": cfg.seed, **cfg.model, "vocab_size": vocab_size}
            model = init_model(ModelConfig.from_dict(model_cfg))

        encoded = {}
        for stage in plan.stages:
            if stage.corpus not in encoded:
                encoded[stage.corpus] = [
                    (self.segmenter.encode(p.source, add_eos=True), self.segmenter.encode(p.target))
                    for p in self.train_sets[stage.corpus]
                ]
        result = Trainer(plan, self.run_dir, show_progress=self.show_progress).train(model, encoded)
        self.model = result.model
        self.final_checkpoint = result.checkpoints[plan.stages[-1].name]
        self._say(f"Trained {len(plan.stages)} stage(s); final checkpoint {self.final_checkpoint.name}")

    def _metric_fn(self, name: str):
        sep = self.config.multitask.sep_token if self.config.multitask.mode == "horizontal" else None
        return metric_function(name, self.config.metrics, sep_token=sep)

    def decode(self):
        cfg = self.config
        beam = cfg.decode
        if cfg.rescore is not None and beam.nbest_k < 2:
            logger.warning("Rescoring with nbest_k=%d leaves nothing to re-rank", beam.nbest_k)

        if cfg.grid_search is not None and self.dev_sets:
            devset = [(p.source, p.target) for key in sorted(self.dev_sets) for p in self.dev_sets[key]]
            grid = grid_search(
                self.model, self.segmenter, devset,
                cfg.grid_search.n_grid, cfg.grid_search.b_grid,
                metric=self._metric_fn(cfg.grid_search.metric), base_cfg=beam,
            )
            beam = replace(beam, beam_size=grid.beam_size, length_norm_exponent=grid.length_norm_exponent)
            self._write_json(self.run_dir / "reports" / "grid.json", {
                "best": {"length_norm_exponent": grid.length_norm_exponent, "beam_size": grid.beam_size},
                "table": grid.table,
            })
            self._say(f"Grid search picked n={grid.length_norm_exponent}, b={grid.beam_size}")

        for key, dev in self.dev_sets.items():
            lists = translate(self.model, self.segmenter, dev.sources, beam, show_progress=self.show_progress)
            write_nbest(lists, self.run_dir / "nbest" / f"dev.{key}.nbest")
            self.nbest[key] = lists
            self.hypotheses[key] = [nbest.best.text for nbest in lists]
            self._write_lines(self.run_dir / "hyps" / f"dev.{key}.txt", self.hypotheses[key])
            self._say(f"Decoded {len(lists)} sentences for {key}")

    def rescore(self):
        spec = self.config.rescore
        if spec is None:
            return
        char_segmenter, char_model = load_run_model(spec.char_run)
        rescore_cfg = spec.rescore_config
        for key, lists in self.nbest.items():
            rescored = []
            for nbest in lists:
                result = rescore(nbest, char_model, char_segmenter, rescore_cfg)
                if not len(result):
                    logger.warning("All hypotheses of sentence %d dropped; keeping original ranking", nbest.source_id)
                    result = nbest
                rescored.append(result)
            write_nbest(rescored, self.run_dir / "nbest" / f"dev.{key}.rescored.nbest")
            self.nbest[key] = rescored
            self.hypotheses[key] = [nbest.best.text for nbest in rescored]
            self._write_lines(self.run_dir / "hyps" / f"dev.{key}.rescored.txt", self.hypotheses[key])
            self._say(f"Rescored {len(rescored)} n-best lists for {key}")

    def evaluate(self):
        cfg = self.config
        reports = {}
        for key, dev in self.dev_sets.items():
            hyps = self.hypotheses[key]
            if cfg.multitask.mode == "horizontal":
                report = evaluate_multitask(hyps, dev.targets, cfg.multitask.sep_token, cfg.metrics)
            else:
                report = evaluate(hyps, dev.targets, cfg.metrics)
            reports[key] = report.to_dict()
            self.metrics.setdefault("dev", {})[key] = {
                "bleu": report.bleu, "chrf": report.chrf, "exact_match": report.exact_match,
            }
            self._say(
                f"{key}: BLEU {report.bleu:.1f}  ChrF {report.chrf:.3f}  Exact {100 * report.exact_match:.1f}%"
            )
        self._write_json(self.run_dir / "reports" / "dev.json", reports)

    # Output

    @staticmethod
    def _write_lines(path: Path, lines: Sequence[str]):
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.writelines(line + "\n" for line in lines)

    @staticmethod
    def _write_json(path: Path, data):
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")

    def write_manifest(self) -> RunManifest:
        """Hash inputs and artifacts and write ``manifest.json``."""
        artifacts = {}
        for path in sorted(self.run_dir.rglob("*")):
            if not path.is_file() or path.name == MANIFEST_NAME:
                continue
            relative = path.relative_to(self.run_dir).as_posix()
            if path.suffix == ".pt":
                model, _ = load_checkpoint(path)
                artifacts[relative] = f"params:{params_digest(model)}"
            else:
                artifacts[relative] = file_sha256(path)

        manifest = RunManifest(
            name=self.config.name,
            config_hash=config_hash(self.config),
            inputs={path: file_sha256(path) for path in sorted(set(self.config.input_files()))},
            artifacts=artifacts,
            metrics=self.metrics,
            final_checkpoint=(
                self.final_checkpoint.relative_to(self.run_dir).as_posix() if self.final_checkpoint else None
            ),
        )
        manifest.content_hash = manifest.compute_content_hash()
        manifest.save(self.run_dir / MANIFEST_NAME)
        self._say(f"Manifest {manifest.content_hash[:12]}")
        return manifest


def run_experiment(config: ExperimentConfig, base_dir="output", show_progress: bool = False) -> RunManifest:
    """
    Run prepare, segment, train, decode, rescore and evaluate in order.

    Args:
        config: Validated experiment config
        base_dir: Parent of the run directory ``<base_dir>/<name>``
        show_progress: Display tqdm progress bars

    Returns:
        The run manifest (also written to the run directory)
    """
    return ExperimentRunner(config, base_dir, show_progress=show_progress).run()


# Comparison

@dataclass
class ComparisonTable:
    eval_set: str
    baseline: str
    directions: List[str]
    rows: List[dict]

    def to_dict(self) -> dict:
        return asdict(self)


def _metric(manifest: RunManifest, eval_set: str, direction: str, metric: str) -> float:
    try:
        value = manifest.metrics[eval_set][direction][metric]
    except KeyError:
        value = None
    if value is None:
        raise MissingMetric(f"Run '{manifest.name}' has no {metric} for {eval_set}/{direction}")
    return value


def compare_runs(
    manifests: Sequence[RunManifest],
    baseline: Optional[str] = None,
    eval_set: str = "dev",
) -> ComparisonTable:
    """
    Tabulate BLEU and ChrF per run and direction with deltas against a baseline.

    Args:
        manifests: Finished runs
        baseline: Name of the baseline run (default: the first)
        eval_set: Evaluation set to compare

    Returns:
        Table over the baseline's directions
    """
    if not manifests:
        raise ValueError("compare_runs needs at least one manifest")
    by_name = {m.name: m for m in manifests}
    base = by_name.get(baseline) if baseline is not None else manifests[0]
    if base is None:
        raise MissingMetric(f"Baseline run '{baseline}' not among the compared runs")
    if eval_set not in base.metrics:
        raise MissingMetric(f"Run '{base.name}' has no '{eval_set}' results")
    directions = sorted(base.metrics[eval_set])

    rows = []
    for manifest in manifests:
        row = {"system": manifest.name, "bleu": {}, "chrf": {}, "delta_bleu": {}, "delta_chrf": {}}
        for direction in directions:
            for metric in ("bleu", "chrf"):
                value = _metric(manifest, eval_set, direction, metric)
                row[metric][direction] = value
                row[f"delta_{metric}"][direction] = value - _metric(base, eval_set, direction, metric)
        rows.append(row)
    return ComparisonTable(eval_set, base.name, directions, rows)


def render_report(table: ComparisonTable, fmt: str = "md") -> str:
    """Render a comparison table as a markdown table or JSON."""
    if fmt == "json":
        return json.dumps(table.to_dict(), indent=2, sort_keys=True)
    if fmt != "md":
        raise ConfigError(f"Unknown report format: {fmt}")

    dirs = table.directions
    header = (["system"] + [f"BLEU {d}" for d in dirs] + [f"ChrF {d}" for d in dirs]
              + [f"ΔBLEU {d}" for d in dirs] + [f"ΔChrF {d}" for d in dirs])
    lines = [
        f"Results on '{table.eval_set}' (baseline: {table.baseline})",
        "",
        "| " + " | ".join(header) + " |",
        "|" + "---|" * len(header),
    ]
    for row in table.rows:
        cells = ([row["system"]]
                 + [f"{row['bleu'][d]:.1f}" for d in dirs]
                 + [f"{row['chrf'][d]:.3f}" for d in dirs]
                 + [f"{row['delta_bleu'][d]:+.1f}" for d in dirs]
                 + [f"{row['delta_chrf'][d]:+.3f}" for d in dirs])
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def backtranslate(
    run_dir,
    monolingual_path,
    src_lang: str,
    tgt_lang: str,
    out_prefix,
    beam: Optional[BeamConfig] = None,
) -> ParallelCorpus:
    """
    Build a backtranslated corpus with a finished reverse-direction run.

    Args:
        run_dir: Run trained on ``tgt_lang -> src_lang``
        monolingual_path: Target-language text, one sentence per line
        src_lang: Language the reverse model produces (the new corpus' source)
        tgt_lang: Language of the monolingual text
        out_prefix: Where to save the corpus
        beam: Decoding settings (default: beam of 4)

    Returns:
        Corpus with ``origin=backtranslated``
    """
    monolingual_path = Path(monolingual_path)
    if not monolingual_path.exists():
        raise FileNotFoundError(f"Monolingual file not found: {monolingual_path}")
    segmenter, model = load_run_model(run_dir)
    with open(monolingual_path, "r", encoding="utf-8") as f:
        targets = [normalize_whitespace(line) for line in f]
    targets = [t for t in targets if t]

    tag = LangCode.parse(src_lang).tag
    lists = translate(model, segmenter, [f"{tag} {t}" for t in targets], beam or BeamConfig(beam_size=4))
    pairs, dropped = [], 0
    for target, nbest in zip(targets, lists):
        source = normalize_whitespace(nbest.best.text)
        if not source or nbest.flagged:
            dropped += 1
            continue
        pairs.append(SentencePair(source, target, src_lang, tgt_lang, Origin.BACKTRANSLATED))
    if dropped:
        logger.warning("Dropped %d of %d backtranslations (empty or unfinished)", dropped, len(targets))

    corpus = ParallelCorpus(name=Path(out_prefix).name, pairs=tuple(pairs))
    save_corpus(corpus, out_prefix)
    return corpus
