import itertools
import math

import pytest
import torch

from src.errors import InvalidConfig, LengthMismatch, ShapeMismatch
from src.model import (
    ModelConfig,
    forward,
    init_model,
    load_checkpoint,
    loss,
    params_digest,
    save_checkpoint,
    score_hypothesis,
    transfer_embeddings,
)

from conftest import micro_config


def test_init_is_deterministic_and_leaves_global_rng_alone():
    torch.manual_seed(0)
    expected = torch.rand(1)
    torch.manual_seed(0)
    first = init_model(micro_config())
    after = torch.rand(1)
    second = init_model(micro_config())
    assert params_digest(first) == params_digest(second)
    assert params_digest(first) != params_digest(init_model(micro_config(seed=4)))
    assert torch.equal(expected, after)


def test_presets():
    base = ModelConfig.from_preset("base", vocab_size=100)
    big = ModelConfig.from_dict({"preset": "big", "vocab_size": 100, "dropout": 0.2})
    bigger = ModelConfig.from_preset("bigger", vocab_size=100)
    assert (base.d_model, base.enc_layers) == (128, 6)
    assert (big.d_model, big.n_heads, big.dropout) == (256, 8, 0.2)
    assert bigger.enc_layers == 2 * bigger.dec_layers
    assert bigger.depth_scaled_init and not big.depth_scaled_init


@pytest.mark.parametrize("config", [
    {"preset": "huge", "vocab_size": 10},
    {"vocab_size": 10, "d_model": 10, "n_heads": 4},
    {"preset": "bigger", "vocab_size": 10, "enc_layers": 6},
    {"vocab_size": 10, "dropout": 1.0},
    {"vocab_size": 3},
    {"vocab_size": 10, "n_layers": 2},
    {"d_model": 16},
])
def test_invalid_configs(config):
    with pytest.raises(InvalidConfig):
        ModelConfig.from_dict(config)


def test_depth_scaled_residual_init():
    shape = dict(d_model=8, n_heads=2, ffn_dim=16, enc_layers=4, dec_layers=2, dtype="float64", seed=5)
    scaled = init_model(ModelConfig.from_preset("bigger", vocab_size=11, **shape))
    plain = init_model(ModelConfig.from_preset("bigger", vocab_size=11, depth_scaled_init=False, **shape))
    for index in (1, 2, 4):
        a = scaled.encoder_layers[index - 1].ffn.fc2.weight
        b = plain.encoder_layers[index - 1].ffn.fc2.weight
        assert torch.allclose(a, b / math.sqrt(index))
    assert torch.allclose(scaled.decoder_layers[1].cross_attn.out_proj.weight,
                          plain.decoder_layers[1].cross_attn.out_proj.weight / math.sqrt(2))
    assert torch.equal(scaled.encoder_layers[3].ffn.fc1.weight, plain.encoder_layers[3].ffn.fc1.weight)


def test_forward_shape_and_distribution(micro_model):
    model = micro_model()
    logits = forward(model, [5, 6, 7, 2], [1, 8, 9])
    assert logits.shape == (3, 11)
    probs = torch.softmax(logits, dim=-1)
    assert torch.allclose(probs.sum(-1), torch.ones(3, dtype=probs.dtype))


def test_decoder_is_causal(micro_model):
    model = micro_model()
    a = forward(model, [5, 6, 2], [1, 8, 9, 10])
    b = forward(model, [5, 6, 2], [1, 8, 4, 7])
    assert torch.allclose(a[:2], b[:2], atol=1e-12)
    assert not torch.allclose(a[2:], b[2:])


def test_source_padding_is_invisible(micro_model):
    model = micro_model()
    plain = model(torch.tensor([[5, 6, 2]]), torch.tensor([[1, 8]]))
    padded = model(torch.tensor([[5, 6, 2, 3, 3]]), torch.tensor([[1, 8]]))
    assert torch.allclose(plain, padded, atol=1e-10)


def test_out_of_vocabulary_ids_are_rejected(micro_model):
    with pytest.raises(ShapeMismatch):
        forward(micro_model(), [5, 11], [1])
    with pytest.raises(ShapeMismatch):
        forward(micro_model(), list(range(5)) * 7, [1])


def test_uniform_logits_give_log_vocab_loss():
    value = loss(torch.zeros(3, 11), torch.tensor([1, 2, 4]), pad_id=-100)
    assert value.item() == pytest.approx(math.log(11))


def test_label_smoothed_loss_closed_form():
    logits = torch.log(torch.tensor([[0.7, 0.1, 0.1, 0.1]], dtype=torch.float64))
    value = loss(logits, torch.tensor([0]), label_smoothing=0.1, pad_id=-100)
    expected = 0.9 * -math.log(0.7) + 0.025 * -(math.log(0.7) + 3 * math.log(0.1))
    assert value.item() == pytest.approx(expected, rel=1e-9)


def test_loss_ignores_padding_and_checks_shapes():
    logits = torch.randn(2, 3, 7, dtype=torch.float64)
    reference = torch.tensor([[1, 2, 3], [4, 3, 3]])
    full = loss(logits, reference)
    kept = loss(logits[reference != 3], reference[reference != 3])
    assert full.item() == pytest.approx(kept.item())
    with pytest.raises(LengthMismatch):
        loss(logits, reference[:, :2])


FULLY_CHECKED = (
    "embed.weight",
    "encoder_layers.0.self_attn.q_proj.weight",
    "decoder_layers.0.cross_attn.k_proj.weight",
    "decoder_layers.0.ffn.fc1.weight",
)


def test_gradients_match_finite_differences(micro_model):
    model = micro_model()
    # Second row is padded on both sides, so masked positions are covered.
    src = torch.tensor([[5, 6, 7, 2], [9, 2, 3, 3]])
    prefix = torch.tensor([[1, 8, 9], [1, 10, 3]])
    target = torch.tensor([[8, 9, 2], [10, 2, 3]])

    def objective():
        return loss(model(src, prefix), target, label_smoothing=0.1)

    model.zero_grad()
    objective().backward()
    eps = 1e-6
    generator = torch.Generator().manual_seed(0)
    for name, param in model.named_parameters():
        flat = param.data.view(-1)
        grad = param.grad.view(-1)
        if name in FULLY_CHECKED:
            indices = range(flat.numel())
        else:
            indices = torch.randint(flat.numel(), (6,), generator=generator).tolist()
        for index in indices:
            original = flat[index].item()
            with torch.no_grad():
                flat[index] = original + eps
                plus = objective().item()
                flat[index] = original - eps
                minus = objective().item()
                flat[index] = original
            numeric = (plus - minus) / (2 * eps)
            assert grad[index].item() == pytest.approx(numeric, rel=1e-4, abs=1e-7), name


def test_score_hypothesis_base_case(micro_model):
    model = micro_model()
    log_probs = torch.log_softmax(forward(model, [5, 2], [1]), dim=-1)
    assert score_hypothesis(model, [5, 2], []) == pytest.approx(log_probs[0, 2].item())
    assert score_hypothesis(model, [5, 2], [7]) == score_hypothesis(model, [5, 2], [7, 2])


def test_hypothesis_probabilities_sum_below_one(micro_model):
    model = micro_model(vocab_size=5, pad_id=3)
    symbols = [0, 1, 3, 4]
    total = 0.0
    for length in range(3):
        for tokens in itertools.product(symbols, repeat=length):
            total += math.exp(score_hypothesis(model, [4, 2], list(tokens)))
    assert 0.0 < total <= 1.0 + 1e-12


def test_checkpoint_round_trip(tmp_path, micro_model):
    model = micro_model()
    path = save_checkpoint(model, tmp_path / "ckpt" / "model.pt", stage="pretrain", step=7)
    loaded, meta = load_checkpoint(path)
    assert params_digest(loaded) == params_digest(model)
    assert meta["stage"] == "pretrain" and meta["step"] == 7
    assert loaded.config == model.config
    assert torch.equal(forward(loaded.eval(), [5, 2], [1, 6]), forward(model, [5, 2], [1, 6]))
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")


def test_transfer_embeddings_copies_mapped_rows(micro_model):
    model = micro_model()
    row_map = {0: 0, 1: 1, 2: 2, 3: 3, 4: 4, 5: 9, 6: None}
    moved = transfer_embeddings(model, row_map)
    assert moved.config.vocab_size == 7
    assert torch.equal(moved.embed.weight[5], model.embed.weight[9])
    assert torch.equal(moved.encoder_layers[0].ffn.fc1.weight, model.encoder_layers[0].ffn.fc1.weight)
