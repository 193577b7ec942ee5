import json

import pytest
import yaml

import main as cli
from src.corpus import Origin, load_corpus, save_corpus, tag_corpus
from src.errors import ConfigError, G2PLanguageMismatch, MissingMetric, StageError
from src.model import load_checkpoint
from src.pipeline import (
    ExperimentConfig,
    ExperimentRunner,
    RunManifest,
    backtranslate,
    compare_runs,
    config_hash,
    load_experiment_config,
    render_report,
    run_experiment,
)

from conftest import FIXTURES, ROOT, make_corpus


def test_config_round_trip_and_defaults(tiny_experiment):
    config = ExperimentConfig.from_dict(tiny_experiment(), defaults={"decode": {"nbest_k": 3, "beam_size": 9}})
    assert config.decode.nbest_k == 3
    assert config.decode.beam_size == 2
    assert config.train_plan.stages[0].name == "pretrain"
    assert config.corpora[0].synthetic["size"] == 60


def test_config_hash_is_canonical(tiny_experiment):
    data = tiny_experiment()
    reordered = dict(reversed(list(data.items())))
    assert config_hash(ExperimentConfig.from_dict(data)) == config_hash(ExperimentConfig.from_dict(reordered))
    assert config_hash(ExperimentConfig.from_dict(data)) != config_hash(
        ExperimentConfig.from_dict(tiny_experiment(seed=2))
    )


@pytest.mark.parametrize("change", [
    {"epochs": 3},
    {"balance": "undersample"},
    {"multitask": {"mode": "vertical"}},
    {"multitask": {"mode": "horizontal", "g2p_rules": str(FIXTURES / "ca.rules"), "sep_token": "|"}},
    {"multitask": {"mode": "vertical", "g2p_rules": "missing.rules"}},
    {"segmenter": {"mode": "bpe"}},
    {"train": {"stages": [{"name": "a", "corpus": "nowhere"}]}},
    {"corpora": [{"name": "train", "src_lang": "ca", "synthetic": {"rules": str(FIXTURES / "sister_oc.rules")}}]},
    {"corpora": [{"name": "x", "src": "a.txt", "src_lang": "ca", "tgt_lang": "oc"}]},
    {"backtranslation": {"corpus": "bt", "parallel": "ca-oc"}},
    {"transfer_from": "output/none"},
    {"rescore": {"char_run": "output/none"}},
])
def test_invalid_experiment_configs(tiny_experiment, change):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(tiny_experiment(**change))


def test_load_experiment_config(tmp_path, tiny_experiment):
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(tiny_experiment()), encoding="utf-8")
    assert load_experiment_config(path).name == "tiny"
    path.write_text("- just\n- a list\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_experiment_config(path)
    with pytest.raises(FileNotFoundError):
        load_experiment_config(tmp_path / "none.yaml")
    path.write_text("name: [unclosed\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_experiment_config(path)


def test_vertical_multitask_doubles_training_data(tmp_path, tiny_experiment, ca_rules_path):
    config = ExperimentConfig.from_dict(
        tiny_experiment(multitask={"mode": "vertical", "g2p_rules": str(ca_rules_path)})
    )
    runner = ExperimentRunner(config, tmp_path)
    runner.run_step("prepare")
    train = runner.train_sets["train"]
    assert len(train) == 2 * 55
    assert sum(p.source.startswith("<ca_p> ") for p in train) == 55
    assert sum(p.origin is Origin.PHONEME_TASK for p in train) == 55
    assert set(runner.dev_sets) == {"ca-oc"}
    assert len(load_corpus(tmp_path / "tiny" / "prepared" / "train")) == 110


def test_horizontal_multitask_extends_targets(tmp_path, tiny_experiment, ca_rules_path):
    config = ExperimentConfig.from_dict(
        tiny_experiment(multitask={"mode": "horizontal", "g2p_rules": str(ca_rules_path)})
    )
    runner = ExperimentRunner(config, tmp_path)
    runner.run_step("prepare")
    runner.run_step("segment")
    train = runner.train_sets["train"]
    assert len(train) == 55
    assert all(" <sep> " in p.target for p in train)
    assert all(" <sep> " not in p.target for p in runner.dev_sets["ca-oc"])
    assert "<sep>" in runner.segmenter.vocab


def test_balancing_equalizes_directions(tmp_path, tiny_experiment):
    data = tiny_experiment(langs=("oc", "it"), balance="oversample")
    data["corpora"][1]["synthetic"]["size"] = 30
    runner = ExperimentRunner(ExperimentConfig.from_dict(data), tmp_path)
    runner.run_step("prepare")
    assert len(runner.train_sets["ca-oc"]) == len(runner.train_sets["ca-it"]) == 55
    assert len(runner.train_sets["train"]) == 110


def test_stage_failures_are_wrapped(tmp_path, tiny_experiment, monkeypatch):
    def broken(*args, **kwargs):
        raise ValueError("disk on fire")

    monkeypatch.setattr("src.pipeline.split_corpus", broken)
    runner = ExperimentRunner(ExperimentConfig.from_dict(tiny_experiment()), tmp_path)
    with pytest.raises(StageError) as excinfo:
        runner.run_step("prepare")
    assert excinfo.value.stage == "prepare"
    assert isinstance(excinfo.value.cause, ValueError)
    with pytest.raises(ConfigError):
        runner.run_step("deploy")


def test_runs_are_reproducible(tmp_path, tiny_experiment):
    config = ExperimentConfig.from_dict(tiny_experiment(name="system1", langs=("oc", "it", "ro"), steps=10))
    first = run_experiment(config, tmp_path / "a")
    second = run_experiment(config, tmp_path / "b")

    assert set(first.metrics["dev"]) == {"ca-oc", "ca-it", "ca-ro"}
    assert set(first.metrics["dev"]["ca-it"]) == {"bleu", "chrf", "exact_match"}
    assert first.final_checkpoint == "checkpoints/pretrain.pt"
    assert first.artifacts["checkpoints/pretrain.pt"].startswith("params:")
    assert first.artifacts == second.artifacts
    assert first.metrics == second.metrics
    assert first.content_hash == second.content_hash == first.compute_content_hash()

    run_dir = tmp_path / "a" / "system1"
    for name in ("segmenter.json", "metrics.jsonl", "reports/dev.json", "nbest/dev.ca-it.nbest", "hyps/dev.ca-ro.txt"):
        assert (run_dir / name).exists(), name
    assert RunManifest.load(run_dir) == first
    report = json.loads((run_dir / "reports" / "dev.json").read_text(encoding="utf-8"))
    assert report["ca-oc"]["segments"] == 5


def _manifest(name, scores):
    metrics = {"dev": {d: {"bleu": b, "chrf": c} for d, (b, c) in scores.items()}}
    return RunManifest(name=name, config_hash="0", inputs={}, artifacts={}, metrics=metrics)


def test_compare_runs_and_render():
    base = _manifest("bilingual", {"ca-oc": (10.0, 0.40)})
    joint = _manifest("joint", {"ca-oc": (12.5, 0.45), "ca-it": (9.0, 0.38)})
    table = compare_runs([base, joint])
    assert table.baseline == "bilingual"
    assert table.directions == ["ca-oc"]
    assert table.rows[1]["delta_bleu"]["ca-oc"] == pytest.approx(2.5)
    assert table.rows[1]["delta_chrf"]["ca-oc"] == pytest.approx(0.05)

    text = render_report(table)
    assert "| system | BLEU ca-oc | ChrF ca-oc | ΔBLEU ca-oc | ΔChrF ca-oc |" in text
    assert "| joint | 12.5 | 0.450 | +2.5 | +0.050 |" in text
    assert json.loads(render_report(table, fmt="json"))["baseline"] == "bilingual"

    with pytest.raises(MissingMetric):
        compare_runs([joint, base])
    with pytest.raises(MissingMetric):
        compare_runs([base], eval_set="test")
    with pytest.raises(MissingMetric):
        compare_runs([base, joint], baseline="other")
    with pytest.raises(ConfigError):
        render_report(table, fmt="html")


def test_backtranslate_with_finished_run(tmp_path, tiny_experiment):
    config = ExperimentConfig.from_dict(tiny_experiment(steps=5))
    run_experiment(config, tmp_path)
    mono = tmp_path / "mono.ca"
    mono.write_text("la casa\n\nquatre gats\n", encoding="utf-8")
    corpus = backtranslate(tmp_path / "tiny", mono, "oc", "ca", tmp_path / "bt" / "oc-ca")
    assert len(corpus) <= 2
    assert all(p.origin is Origin.BACKTRANSLATED for p in corpus)
    assert all(p.target in ("la casa", "quatre gats") for p in corpus)
    assert (tmp_path / "bt" / "oc-ca.json").exists()


def test_cli_argument_errors_exit_with_one(capsys):
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["frobnicate"])
    assert excinfo.value.code == 1
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["decode", "--run", "x"])
    assert excinfo.value.code == 1


def test_cli_g2p_and_evaluate(tmp_path, capsys, ca_rules_path):
    text = tmp_path / "in.txt"
    text.write_text("la casa\nquatre\n", encoding="utf-8")
    cli.main(["--config", str(tmp_path / "none.yaml"), "g2p", str(ca_rules_path), "--input", str(text)])
    assert capsys.readouterr().out.splitlines() == ["lə kazə", "kwatrə"]

    hyp = tmp_path / "hyp.txt"
    hyp.write_text("la casa <sep> lə kazə\n", encoding="utf-8")
    ref = tmp_path / "ref.txt"
    ref.write_text("la casa\n", encoding="utf-8")
    cli.main(["--config", str(tmp_path / "none.yaml"), "evaluate", "--hyp", str(hyp), "--ref", str(ref),
              "--strip-sep", "<sep>"])
    report = json.loads(capsys.readouterr().out)
    assert report["bleu"] == 100.0
    assert report["chrf"] == 1.0


def test_cli_missing_experiment_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        cli.main(["--config", str(tmp_path / "none.yaml"), "run", str(tmp_path / "missing.yaml")])


@pytest.mark.parametrize("name", [
    "bilingual_char", "joint_char", "system1_joint_bpe", "vertical_multitask", "horizontal_multitask", "bigger_bpe",
])
def test_shipped_configs_validate(name, monkeypatch):
    monkeypatch.chdir(ROOT)
    config = load_experiment_config(ROOT / "configs" / f"{name}.yaml", defaults=cli.load_config())
    assert config.name == name


@pytest.mark.slow
def test_transfer_then_rescore(tmp_path, tiny_experiment):
    bpe = ExperimentConfig.from_dict(
        tiny_experiment(name="bpe", langs=("oc", "it"), segmenter={"mode": "bpe", "vocab_size": 80})
    )
    run_experiment(bpe, tmp_path)

    char = ExperimentConfig.from_dict(tiny_experiment(
        name="char", langs=("oc", "it"), transfer_from=str(tmp_path / "bpe"),
        train={"stages": [{"name": "finetune", "kind": "finetune", "corpus": "train", "max_steps": 10,
                           "lr": 0.001, "warmup_steps": 2, "batch_size": 8}]},
    ))
    assert char.train_plan.init_checkpoint == str(tmp_path / "bpe" / "checkpoints" / "pretrain.pt")
    run_experiment(char, tmp_path)

    rescored = ExperimentConfig.from_dict(tiny_experiment(
        name="rescored", langs=("oc", "it"), segmenter={"mode": "bpe", "vocab_size": 80},
        decode={"beam_size": 3, "nbest_k": 3, "max_len": 20},
        rescore={"char_run": str(tmp_path / "char"), "lambda": 0.5},
    ))
    manifest = run_experiment(rescored, tmp_path)
    assert "nbest/dev.ca-oc.rescored.nbest" in manifest.artifacts
    assert "hyps/dev.ca-it.rescored.txt" in manifest.artifacts

    table = compare_runs([RunManifest.load(tmp_path / name) for name in ("bpe", "char", "rescored")])
    assert [row["system"] for row in table.rows] == ["bpe", "char", "rescored"]
    assert table.directions == ["ca-it", "ca-oc"]


def test_malformed_toolkit_config(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("decode: {beam_size: 8\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        cli.load_config(str(path))
    path.write_text("- 1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        cli.load_config(str(path))
    with pytest.raises(ConfigError):
        cli.main(["--config", str(path), "g2p", str(FIXTURES / "ca.rules")])


def test_cli_corpus_commands(tmp_path, capsys, ca_rules_path):
    config = ["--config", str(tmp_path / "none.yaml"), "corpus"]
    save_corpus(tag_corpus(make_corpus("ca-oc", "ca", "oc", ["la casa", "nit"], ["la casa", "nuèit"])),
                tmp_path / "ca-oc")
    save_corpus(tag_corpus(make_corpus("ca-it", "ca", "it", ["quatre"], ["quattro"])), tmp_path / "ca-it")

    cli.main(config + ["concat", str(tmp_path / "ca-oc"), str(tmp_path / "ca-it"), "--seed", "3",
                       "--out", str(tmp_path / "joint")])
    joint = load_corpus(tmp_path / "joint")
    assert len(joint) == 3 and joint.mixed
    assert {p.source for p in joint} == {"<oc> la casa", "<oc> nit", "<it> quatre"}

    cli.main(config + ["g2p-vertical", str(tmp_path / "ca-oc"), "--rules", str(ca_rules_path),
                       "--out", str(tmp_path / "vert")])
    vertical = load_corpus(tmp_path / "vert")
    assert len(vertical) == 4
    assert vertical.pairs[2].source == "<ca_p> la casa"

    cli.main(config + ["g2p-horizontal", str(tmp_path / "ca-oc"), "--rules", str(ca_rules_path),
                       "--sep-token", "<ph>", "--out", str(tmp_path / "horiz")])
    horizontal = load_corpus(tmp_path / "horiz")
    assert horizontal.pairs[0].target == "la casa <ph> lə kazə"

    cli.main(config + ["strip", str(tmp_path / "horiz"), "--sep-token", "<ph>", "--out", str(tmp_path / "plain")])
    plain = load_corpus(tmp_path / "plain")
    assert plain.targets == ["la casa", "nuèit"]
    assert all(p.origin is Origin.PARALLEL for p in plain)
    assert "Stripped" in capsys.readouterr().out

    (tmp_path / "bare.rules").write_text("qu -> k\n", encoding="utf-8")
    with pytest.raises(G2PLanguageMismatch):
        cli.main(config + ["g2p-vertical", str(tmp_path / "ca-it"), "--rules", str(tmp_path / "bare.rules"),
                           "--out", str(tmp_path / "bad")])
    cli.main(config + ["g2p-vertical", str(tmp_path / "ca-it"), "--rules", str(tmp_path / "bare.rules"),
                       "--language", "ca", "--out", str(tmp_path / "bound")])
    assert load_corpus(tmp_path / "bound").pairs[1].target == "katre"


def test_bigger_preset_uses_depth_scaled_init(tmp_path, tiny_experiment):
    config = ExperimentConfig.from_dict(tiny_experiment(name="deep", steps=3, model={
        "preset": "bigger", "d_model": 16, "n_heads": 2, "ffn_dim": 32, "enc_layers": 2, "dec_layers": 1,
        "dropout": 0.0,
    }))
    manifest = run_experiment(config, tmp_path)
    model, _ = load_checkpoint(tmp_path / "deep" / manifest.final_checkpoint)
    assert model.config.preset == "bigger"
    assert model.config.depth_scaled_init
    assert (model.config.enc_layers, model.config.dec_layers) == (2, 1)


@pytest.mark.slow
def test_char_experiments_reach_target_quality(tmp_path, monkeypatch):
    monkeypatch.chdir(ROOT)
    defaults = cli.load_config()
    bilingual = run_experiment(
        load_experiment_config(ROOT / "configs" / "bilingual_char.yaml", defaults=defaults), tmp_path
    )
    joint = run_experiment(load_experiment_config(ROOT / "configs" / "joint_char.yaml", defaults=defaults), tmp_path)

    assert bilingual.metrics["dev"]["ca-oc"]["exact_match"] >= 0.9
    shared = set(bilingual.metrics["dev"]) & set(joint.metrics["dev"])
    assert shared == {"ca-oc"}
    assert all(joint.metrics["dev"][d]["bleu"] >= bilingual.metrics["dev"][d]["bleu"] for d in shared)
