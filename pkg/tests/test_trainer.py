import json
import random

import pytest
import torch

from src.errors import DivergedLoss, InvalidConfig
from src.model import init_model, load_checkpoint, params_digest
from src.trainer import Stage, Trainer, TrainPlan, inverse_sqrt_schedule, make_batch, token_accuracy

from conftest import micro_config


def copy_pairs(count, seed=0, vocab_size=11):
    rng = random.Random(seed)
    pairs = []
    for _ in range(count):
        ids = [rng.randrange(5, vocab_size) for _ in range(rng.randint(2, 5))]
        pairs.append((ids, list(ids)))
    return pairs


def plan(*stages, seed=1, **kwargs):
    return TrainPlan(stages=[Stage(**s) for s in stages], seed=seed, **kwargs)


def test_schedule():
    assert inverse_sqrt_schedule(1, 4) == pytest.approx(0.25)
    assert inverse_sqrt_schedule(4, 4) == pytest.approx(1.0)
    assert inverse_sqrt_schedule(16, 4) == pytest.approx(0.5)
    assert inverse_sqrt_schedule(4, 0) == pytest.approx(0.5)


def test_make_batch_pads_and_closes_sequences(micro_model):
    model = micro_model()
    src, dec_in, dec_out = make_batch([([5, 6, 7], [8]), ([9], [10, 6])], model)
    assert src.tolist() == [[5, 6, 7, 2], [9, 2, 3, 3]]
    assert dec_in.tolist() == [[1, 8, 3], [1, 10, 6]]
    assert dec_out.tolist() == [[8, 2, 3], [10, 6, 2]]


def test_zero_steps_leave_model_unchanged(tmp_path, micro_model):
    model = micro_model()
    before = params_digest(model)
    result = Trainer(plan({"name": "pre", "corpus": "train", "max_steps": 0}), tmp_path, show_progress=False).train(
        model, {"train": []}
    )
    assert result.log == []
    assert params_digest(result.model) == before
    assert result.checkpoints["pre"].exists()


def test_training_is_deterministic(tmp_path):
    pairs = copy_pairs(40)
    stage = {"name": "pre", "corpus": "train", "max_steps": 12, "lr": 0.01, "warmup_steps": 3, "batch_size": 4}
    runs = []
    for run in ("a", "b"):
        model = init_model(micro_config())
        result = Trainer(plan(stage), tmp_path / run, show_progress=False).train(model, {"train": pairs})
        runs.append((params_digest(result.model), [e["loss"] for e in result.log]))
    assert runs[0] == runs[1]

    model = init_model(micro_config())
    other = Trainer(plan(stage, seed=2), tmp_path / "c", show_progress=False).train(model, {"train": pairs})
    assert params_digest(other.model) != runs[0][0]


def test_metrics_log_and_finetune_learning_rate(tmp_path, micro_model):
    pairs = copy_pairs(10)
    trainer = Trainer(
        plan(
            {"name": "pre", "corpus": "train", "max_steps": 2, "lr": 1e-3, "warmup_steps": 2, "batch_size": 2},
            {"name": "tune", "corpus": "tune", "kind": "finetune", "max_steps": 1, "lr": 1e-3,
             "warmup_steps": 2, "batch_size": 2},
        ),
        tmp_path,
        show_progress=False,
    )
    result = trainer.train(micro_model(), {"train": pairs, "tune": pairs[:3]})

    lines = [json.loads(line) for line in trainer.metrics_path.read_text(encoding="utf-8").splitlines()]
    assert lines == result.log
    assert [(e["stage"], e["step"]) for e in lines] == [("pre", 1), ("pre", 2), ("tune", 1)]
    assert [e["lr"] for e in lines] == pytest.approx([5e-4, 1e-3, 2.5e-4])
    assert set(result.checkpoints) == {"pre", "tune"}
    _, meta = load_checkpoint(result.checkpoints["tune"])
    assert meta["stage"] == "tune" and meta["step"] == 1


def test_finetune_resumes_from_checkpoint(tmp_path, micro_model):
    pairs = copy_pairs(10)
    pre = Trainer(
        plan({"name": "pre", "corpus": "train", "max_steps": 3, "batch_size": 2}), tmp_path / "pre",
        show_progress=False,
    ).train(micro_model(), {"train": pairs})

    resumed, _ = load_checkpoint(pre.checkpoints["pre"])
    assert params_digest(resumed) == params_digest(pre.model)
    tuned = Trainer(
        plan({"name": "tune", "corpus": "train", "kind": "finetune", "max_steps": 2, "batch_size": 2},
             init_checkpoint=str(pre.checkpoints["pre"])),
        tmp_path / "tune",
        show_progress=False,
    ).train(resumed, {"train": pairs})
    assert params_digest(tuned.model) != params_digest(pre.model)


def test_diverged_loss_writes_checkpoint(tmp_path, micro_model, monkeypatch):
    def nan_loss(logits, reference, label_smoothing=0.0, pad_id=3):
        return logits.sum() * float("nan")

    monkeypatch.setattr("src.trainer.loss", nan_loss)
    trainer = Trainer(plan({"name": "pre", "corpus": "train", "max_steps": 5, "batch_size": 2}), tmp_path,
                      show_progress=False)
    with pytest.raises(DivergedLoss) as excinfo:
        trainer.train(micro_model(), {"train": copy_pairs(4)})
    assert excinfo.value.step == 1
    assert (tmp_path / "checkpoints" / "pre.diverged.pt").exists()


@pytest.mark.parametrize("stages,kwargs", [
    ([], {}),
    ([{"name": "a", "corpus": "x"}, {"name": "a", "corpus": "x"}], {}),
    ([{"name": "a", "corpus": "x", "kind": "finetune"}], {}),
])
def test_invalid_plans(stages, kwargs):
    with pytest.raises(InvalidConfig):
        plan(*stages, **kwargs)


@pytest.mark.parametrize("stage", [
    {"name": "a", "corpus": "x", "kind": "distill"},
    {"name": "a", "corpus": "x", "batch_size": 0},
    {"name": "a", "corpus": "x", "lr": 0.0},
    {"name": "a", "corpus": "x", "label_smoothing": 1.0},
])
def test_invalid_stages(stage):
    with pytest.raises(InvalidConfig):
        Stage(**stage)


def test_plan_from_dict_rejects_unknown_options():
    with pytest.raises(InvalidConfig):
        TrainPlan.from_dict({"stages": [{"name": "a", "corpus": "x", "epochs": 3}]})
    parsed = TrainPlan.from_dict({"stages": [{"name": "a", "corpus": "x", "kind": "finetune"}],
                                  "init_checkpoint": "model.pt"}, seed=7)
    assert parsed.seed == 7
    assert parsed.stages[0].peak_lr == pytest.approx(2.5e-4)


@pytest.mark.parametrize("corpora", [{"other": copy_pairs(3)}, {"train": []}])
def test_unknown_or_empty_corpus(tmp_path, micro_model, corpora):
    trainer = Trainer(plan({"name": "pre", "corpus": "train", "max_steps": 2}), tmp_path, show_progress=False)
    with pytest.raises(InvalidConfig):
        trainer.train(micro_model(), corpora)


@pytest.mark.slow
def test_learns_copy_task(tmp_path):
    torch.manual_seed(0)
    model = init_model(micro_config(d_model=32, n_heads=4, ffn_dim=64, enc_layers=2, dec_layers=2, max_positions=16))
    stage = {"name": "pre", "corpus": "train", "max_steps": 2000, "lr": 2e-3, "warmup_steps": 100,
             "batch_size": 64, "label_smoothing": 0.0}
    result = Trainer(plan(stage), tmp_path, show_progress=False).train(model, {"train": copy_pairs(2000)})
    assert token_accuracy(result.model, copy_pairs(200, seed=9)) > 0.99


def test_training_restores_torch_settings(tmp_path, micro_model, monkeypatch):
    threads = torch.get_num_threads()
    deterministic = torch.are_deterministic_algorithms_enabled()
    Trainer(plan({"name": "pre", "corpus": "train", "max_steps": 2, "batch_size": 2}), tmp_path / "ok",
            show_progress=False).train(micro_model(), {"train": copy_pairs(4)})
    assert torch.get_num_threads() == threads
    assert torch.are_deterministic_algorithms_enabled() == deterministic

    monkeypatch.setattr("src.trainer.loss", lambda logits, *args, **kwargs: logits.sum() * float("nan"))
    with pytest.raises(DivergedLoss):
        Trainer(plan({"name": "pre", "corpus": "train", "max_steps": 2, "batch_size": 2}), tmp_path / "nan",
                show_progress=False).train(micro_model(), {"train": copy_pairs(4)})
    assert torch.get_num_threads() == threads
    assert torch.are_deterministic_algorithms_enabled() == deterministic
