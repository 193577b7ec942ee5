#!/usr/bin/env python3
"""
Low-resource Multilingual Translation Toolkit

Builds tagged multilingual corpora, G2P multi-task data and subword or
character vocabularies, trains small transformers in stages, decodes with
length-normalized beam search, rescores n-best lists and reports BLEU/ChrF.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from src.corpus import (
    DEFAULT_SEP_TOKEN,
    Origin,
    balance_oversample,
    concat_multilingual,
    load_corpus,
    load_corpus_from_files,
    make_g2p_horizontal,
    make_g2p_vertical,
    mix_backtranslation,
    save_corpus,
    split_corpus,
    strip_phoneme_suffix,
    tag_corpus,
)
from src.decoder import BeamConfig, RescoreConfig, grid_search, read_nbest, rescore, translate, write_nbest
from src.errors import ConfigError, StageError
from src.g2p import load_rules, phonemize
from src.metrics import METRICS, MetricConfig, evaluate, evaluate_multitask
from src.pipeline import (
    ExperimentRunner,
    RunManifest,
    backtranslate,
    compare_runs,
    load_experiment_config,
    load_run_model,
    render_report,
)
from src.segment import get_segmenter, load_segmenter
from src.synthetic import DEFAULT_VOCAB, make_sister_corpus


def load_config(config_path: str = "config.yaml") -> dict:
    """Load toolkit defaults from YAML; a missing file means built-in defaults."""
    path = Path(config_path)
    if not path.exists():
        return {}
    with open(path, "r", encoding="utf-8") as f:
        try:
            config = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Malformed config {path}: {e}") from e
    if not isinstance(config, dict):
        raise ConfigError(f"Config must be a mapping: {path}")
    return config


class CliParser(argparse.ArgumentParser):
    """Argument errors are configuration errors (exit code 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def read_lines(path) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Input file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return f.read().splitlines()


def write_lines(path, lines):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(line + "\n" for line in lines)


def banner(title: str, **rows):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    for key, value in rows.items():
        print(f"{key + ':':<8}{value}")
    print("=" * 60 + "\n")


# Experiments

def cmd_run(args, config):
    experiment = load_experiment_config(args.experiment, defaults=config)
    base_dir = args.output_dir or config.get("output", {}).get("base_dir", "output")
    runner = ExperimentRunner(experiment, base_dir, show_progress=not args.no_progress, verbose=True)
    steps = runner.STEPS if args.command == "run" else ("prepare", "segment", "train")

    banner("Experiment Run", Config=args.experiment, Output=runner.run_dir)
    for index, step in enumerate(steps, 1):
        print(f"[{index}/{len(steps)}] {step.capitalize()}...")
        runner.run_step(step)
        print(f"  ✓ {step} complete\n")
    manifest = runner.write_manifest()

    print("=" * 60)
    print("✓ Run complete! All outputs saved to:")
    print(f"  {runner.run_dir}")
    print(f"  manifest {manifest.content_hash}")
    print("=" * 60)


def cmd_compare(args, config):
    manifests = [RunManifest.load(run) for run in args.runs]
    table = compare_runs(manifests, baseline=args.baseline, eval_set=args.set)
    print(render_report(table, fmt=args.format))


def cmd_report(args, config):
    manifest = RunManifest.load(args.run)
    for eval_set in sorted(manifest.metrics):
        print(render_report(compare_runs([manifest], eval_set=eval_set), fmt=args.format))


# Corpus construction

def cmd_corpus(args, config):
    if args.corpus_command == "tag":
        corpus = load_corpus_from_files(args.src, args.tgt, args.src_lang, args.tgt_lang, origin=Origin(args.origin))
        if args.held_out:
            corpus, dev = split_corpus(corpus, args.held_out, args.seed)
            save_corpus(tag_corpus(dev), f"{args.out}.dev")
        save_corpus(tag_corpus(corpus), args.out)
        print(f"  ✓ Tagged {len(corpus)} pairs: {args.out}")
    elif args.corpus_command == "concat":
        corpora = [load_corpus(prefix) for prefix in args.prefixes]
        result = concat_multilingual(corpora, args.seed, name=Path(args.out).name)
        save_corpus(result, args.out)
        print(f"  ✓ Concatenated {len(corpora)} corpora: {len(result)} pairs")
    elif args.corpus_command == "balance":
        corpora = [load_corpus(prefix) for prefix in args.prefixes]
        out_dir = Path(args.out_dir)
        for prefix, corpus in zip(args.prefixes, balance_oversample(corpora, args.seed)):
            save_corpus(corpus, out_dir / Path(prefix).name)
            print(f"  ✓ {Path(prefix).name}: {len(corpus)} pairs")
    elif args.corpus_command in ("g2p-vertical", "g2p-horizontal"):
        corpus = load_corpus(args.prefix)
        rules = load_rules(args.rules, language=args.language)
        if args.corpus_command == "g2p-vertical":
            result = make_g2p_vertical(corpus, rules)
        else:
            result = make_g2p_horizontal(corpus, rules, args.sep_token)
        save_corpus(result, args.out)
        print(f"  ✓ {args.corpus_command} multi-task corpus: {len(result)} pairs")
    elif args.corpus_command == "mix-bt":
        mixed = mix_backtranslation(load_corpus(args.parallel), load_corpus(args.bt), args.ratio, seed=args.seed)
        save_corpus(mixed, args.out)
        print(f"  ✓ Mixed corpus: {len(mixed)} pairs")
    elif args.corpus_command == "strip":
        corpus = load_corpus(args.prefix)
        pairs = tuple(
            replace(
                p,
                target=strip_phoneme_suffix(p.target, args.sep_token),
                origin=Origin.PARALLEL if p.origin is Origin.HORIZONTAL_MULTITASK else p.origin,
            )
            for p in corpus
        )
        save_corpus(replace(corpus, pairs=pairs), args.out)
        print(f"  ✓ Stripped phonemic suffixes: {len(pairs)} pairs")


def cmd_g2p(args, config):
    rules = load_rules(args.rules, language=args.language)
    lines = read_lines(args.input) if args.input else sys.stdin.read().splitlines()
    for line in lines:
        print(phonemize(line, rules, preserve_case=args.preserve_case))


def cmd_spm(args, config):
    if args.spm_command == "train":
        lines = [line for path in args.input for line in read_lines(path)]
        mode = {"mode": args.mode, "vocab_size": args.vocab_size} if args.mode == "bpe" else {"mode": "char"}
        segmenter = get_segmenter(mode, lines, tags=args.tag or ())
        segmenter.save(args.out)
        print(f"  ✓ {segmenter.mode} model, vocabulary {len(segmenter.vocab)}: {args.out}")
        return
    segmenter = load_segmenter(args.model)
    lines = read_lines(args.input) if args.input else sys.stdin.read().splitlines()
    for line in lines:
        if args.spm_command == "encode":
            print(" ".join(segmenter.encode_as_pieces(line)))
        else:
            print(segmenter.decode(segmenter.vocab.id(piece) for piece in line.split()))


# Decoding

def _beam_config(args, config) -> BeamConfig:
    values = dict(config.get("decode", {}))
    for key, value in (("beam_size", args.beam), ("length_norm_exponent", args.lenpen), ("nbest_k", args.nbest)):
        if value is not None:
            values[key] = value
    return BeamConfig.from_dict(values)


def cmd_decode(args, config):
    segmenter, model = load_run_model(args.run)
    lists = translate(model, segmenter, read_lines(args.input), _beam_config(args, config), show_progress=True)
    write_nbest(lists, args.out)
    if args.hyps:
        write_lines(args.hyps, [nbest.best.text for nbest in lists])
    print(f"  ✓ Decoded {len(lists)} sentences: {args.out}")


def cmd_rescore(args, config):
    values = dict(config.get("rescore", {}))
    if args.lam is not None:
        values["lambda"] = args.lam
    if args.no_normalize:
        values["normalize"] = False
    rescore_cfg = RescoreConfig.from_dict(values)

    char_segmenter, char_model = load_run_model(args.char_run)
    lists = read_nbest(args.nbest)
    sources = read_lines(args.source)
    rescored = []
    for nbest in lists:
        nbest.source = sources[nbest.source_id]
        rescored.append(rescore(nbest, char_model, char_segmenter, rescore_cfg))
    write_nbest(rescored, args.out)
    if args.hyps:
        write_lines(args.hyps, [nbest.best.text if len(nbest) else "" for nbest in rescored])
    print(f"  ✓ Rescored {len(rescored)} n-best lists: {args.out}")


def cmd_gridsearch(args, config):
    segmenter, model = load_run_model(args.run)
    devset = list(zip(read_lines(args.source), read_lines(args.reference)))
    result = grid_search(
        model, segmenter, devset, args.n_grid, args.b_grid,
        metric=args.metric, base_cfg=BeamConfig.from_dict(config.get("decode", {})),
    )
    for row in result.table:
        print(f"  n={row['length_norm_exponent']:<5} b={row['beam_size']:<3} {args.metric}={row['score']:.4f}")
    print(f"  ✓ Best: n={result.length_norm_exponent} b={result.beam_size} ({result.score:.4f})")


def cmd_evaluate(args, config):
    metrics = [m.strip() for m in args.metric.split(",") if m.strip()]
    metric_cfg = MetricConfig.from_dict(config.get("metrics", {}))
    hyps, refs = read_lines(args.hyp), read_lines(args.ref)
    if args.strip_sep:
        report = evaluate_multitask(hyps, refs, args.strip_sep, metric_cfg, metrics)
    else:
        report = evaluate(hyps, refs, metric_cfg, metrics)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def cmd_backtranslate(args, config):
    beam = BeamConfig.from_dict(config.get("decode", {}))
    corpus = backtranslate(args.run, args.input, args.src_lang, args.tgt_lang, args.out, beam)
    print(f"  ✓ Backtranslated corpus: {len(corpus)} pairs at {args.out}")


def cmd_synth(args, config):
    corpus = make_sister_corpus(
        args.n, args.rules, args.src_lang, args.tgt_lang, seed=args.seed, vocab_path=args.vocab,
    )
    save_corpus(corpus, args.out)
    print(f"  ✓ Synthetic corpus {corpus.name}: {len(corpus)} pairs at {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(description="Low-resource multilingual translation toolkit")
    parser.add_argument(
        "--config",
        type=str,
        default="config.yaml",
        help="Path to toolkit config file (default: config.yaml)"
    )
    parser.add_argument("--log-level", type=str, default=None, help="Logging level (default from config)")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("run", "Run a full experiment"), ("train", "Prepare, segment and train only")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("experiment", help="Experiment config (YAML or JSON)")
        p.add_argument("--output-dir", default=None, help="Parent directory of run directories")
        p.add_argument("--no-progress", action="store_true", help="Hide progress bars")
        p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="Compare finished runs")
    p.add_argument("runs", nargs="+", help="Run directories or manifest files")
    p.add_argument("--baseline", default=None, help="Baseline run name (default: first run)")
    p.add_argument("--set", default="dev", help="Evaluation set")
    p.add_argument("--format", choices=("md", "json"), default="md")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="Report the metrics of one run")
    p.add_argument("run", help="Run directory or manifest file")
    p.add_argument("--format", choices=("md", "json"), default="md")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("corpus", help="Corpus construction")
    corpus_sub = p.add_subparsers(dest="corpus_command", required=True)
    c = corpus_sub.add_parser("tag", help="Load aligned files and add target-language tags")
    c.add_argument("--src", required=True)
    c.add_argument("--tgt", required=True)
    c.add_argument("--src-lang", required=True)
    c.add_argument("--tgt-lang", required=True)
    c.add_argument("--origin", default="parallel", choices=[o.value for o in Origin])
    c.add_argument("--held-out", type=int, default=0, help="Also write a seeded held-out set to OUT.dev")
    c.add_argument("--seed", type=int, default=1)
    c.add_argument("--out", required=True, help="Output prefix")
    c = corpus_sub.add_parser("concat", help="Concatenate tagged corpora with a seeded shuffle")
    c.add_argument("prefixes", nargs="+")
    c.add_argument("--seed", type=int, default=1)
    c.add_argument("--out", required=True)
    c = corpus_sub.add_parser("balance", help="Oversample corpora to the largest size")
    c.add_argument("prefixes", nargs="+")
    c.add_argument("--seed", type=int, default=1)
    c.add_argument("--out-dir", required=True)
    for kind in ("vertical", "horizontal"):
        c = corpus_sub.add_parser(f"g2p-{kind}", help=f"{kind.capitalize()} G2P multi-task combination")
        c.add_argument("prefix")
        c.add_argument("--rules", required=True)
        c.add_argument("--language", default=None, help="Rule set language (default: rule file header)")
        c.add_argument("--out", required=True)
        if kind == "horizontal":
            c.add_argument("--sep-token", default=DEFAULT_SEP_TOKEN)
    c = corpus_sub.add_parser("mix-bt", help="Mix backtranslated pairs into a parallel corpus")
    c.add_argument("parallel")
    c.add_argument("bt")
    c.add_argument("--ratio", type=float, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c = corpus_sub.add_parser("strip", help="Cut targets at the separator token")
    c.add_argument("prefix")
    c.add_argument("--sep-token", default=DEFAULT_SEP_TOKEN)
    c.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("g2p", help="Phonemize text with a rule file")
    p.add_argument("rules")
    p.add_argument("--input", default=None, help="Input file (default: stdin)")
    p.add_argument("--language", default=None)
    p.add_argument("--preserve-case", action="store_true")
    p.set_defaults(func=cmd_g2p)

    p = sub.add_parser("spm", help="Segmentation models")
    spm_sub = p.add_subparsers(dest="spm_command", required=True)
    s = spm_sub.add_parser("train")
    s.add_argument("--mode", choices=("bpe", "char"), default="bpe")
    s.add_argument("--vocab-size", type=int, default=None)
    s.add_argument("--tag", action="append", help="Extra atomic tag (repeatable)")
    s.add_argument("--input", nargs="+", required=True)
    s.add_argument("--out", required=True)
    for name in ("encode", "decode"):
        s = spm_sub.add_parser(name)
        s.add_argument("--model", required=True)
        s.add_argument("--input", default=None, help="Input file (default: stdin)")
    p.set_defaults(func=cmd_spm)

    p = sub.add_parser("decode", help="Beam-search decode with a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--input", required=True, help="Tagged source sentences")
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--lenpen", type=float, default=None, help="Length-normalization exponent n")
    p.add_argument("--nbest", type=int, default=None)
    p.add_argument("--out", required=True, help="N-best output file")
    p.add_argument("--hyps", default=None, help="Also write 1-best text here")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("rescore", help="Rescore an n-best file with a character-level run")
    p.add_argument("--nbest", required=True)
    p.add_argument("--source", required=True, help="Tagged source sentences the n-best file was decoded from")
    p.add_argument("--char-run", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--no-normalize", action="store_true", help="Use the raw char-model log-probability")
    p.add_argument("--out", required=True)
    p.add_argument("--hyps", default=None)
    p.set_defaults(func=cmd_rescore)

    p = sub.add_parser("gridsearch", help="Grid search over length-normalization exponent and beam size")
    p.add_argument("--run", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--n-grid", type=float, nargs="+", default=[0.6, 0.8, 1.0, 1.2])
    p.add_argument("--b-grid", type=int, nargs="+", default=[4, 8, 12])
    p.add_argument("--metric", choices=METRICS, default="bleu")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("evaluate", help="Score hypotheses against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--metric", default=",".join(METRICS))
    p.add_argument("--strip-sep", default=None, help="Strip everything after this token first")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("backtranslate", help="Create a backtranslated corpus with a reverse run")
    p.add_argument("--run", required=True)
    p.add_argument("--input", required=True, help="Target-language monolingual text")
    p.add_argument("--src-lang", required=True)
    p.add_argument("--tgt-lang", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_backtranslate)

    p = sub.add_parser("synth", help="Generate a synthetic sister-language corpus")
    p.add_argument("--rules", required=True)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--src-lang", required=True)
    p.add_argument("--tgt-lang", default=None)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--vocab", default=str(DEFAULT_VOCAB))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    config = load_config(args.config)

    level = args.log_level or config.get("logging", {}).get("level", "WARNING")
    logging.basicConfig(level=level.upper(), format="%(levelname)s %(name)s: %(message)s")

    args.func(args, config)


if __name__ == "__main__":
    try:
        main()
    except KeyboardInterrupt:
        print("\n\nInterrupted by user")
        sys.exit(130)
    except (ConfigError, FileNotFoundError) as e:
        print(f"\n\nConfiguration error: {e}")
        sys.exit(1)
    except StageError as e:
        print(f"\n\nError in stage '{e.stage}': {e.cause}")
        sys.exit(2)
    except Exception as e:
        print(f"\n\nError: {e}")
        import traceback
        traceback.print_exc()
        sys.exit(2)
