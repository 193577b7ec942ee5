"""Shared fixtures: micro models, tiny corpora and synthetic experiment configs."""

from pathlib import Path

import pytest

from src.corpus import ParallelCorpus, SentencePair
from src.model import ModelConfig, init_model

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"


def micro_config(vocab_size: int = 11, **overrides) -> ModelConfig:
    values = dict(
        d_model=8, n_heads=2, ffn_dim=16, enc_layers=1, dec_layers=1,
        dropout=0.0, max_positions=32, dtype="float64", seed=3,
    )
    values.update(overrides)
    return ModelConfig(vocab_size=vocab_size, **values)


@pytest.fixture
def micro_model():
    def build(vocab_size: int = 11, **overrides):
        model = init_model(micro_config(vocab_size, **overrides))
        model.eval()
        return model
    return build


def make_corpus(name, src_lang, tgt_lang, sources, targets=None, mixed=False):
    targets = targets if targets is not None else [s.upper() for s in sources]
    pairs = tuple(SentencePair(s, t, src_lang, tgt_lang) for s, t in zip(sources, targets))
    return ParallelCorpus(name=name, pairs=pairs, mixed=mixed)


@pytest.fixture
def ca_rules_path():
    return FIXTURES / "ca.rules"


@pytest.fixture
def tiny_experiment():
    """Experiment dict for a seconds-long char-level run on synthetic sister languages."""
    def build(name="tiny", langs=("oc",), size=60, held_out=5, steps=20, **extra):
        corpora = [
            {
                "name": f"ca-{lang}",
                "src_lang": "ca",
                "synthetic": {
                    "size": size,
                    "rules": str(FIXTURES / f"sister_{lang}.rules"),
                    "seed": 11 + index,
                    "min_len": 2,
                    "max_len": 4,
                },
                "held_out": held_out,
            }
            for index, lang in enumerate(langs)
        ]
        config = {
            "name": name,
            "seed": 1,
            "corpora": corpora,
            "segmenter": {"mode": "char"},
            "model": {
                "preset": "base", "d_model": 16, "n_heads": 2, "ffn_dim": 32,
                "enc_layers": 1, "dec_layers": 1, "dropout": 0.0,
            },
            "train": {"stages": [
                {"name": "pretrain", "corpus": "train", "max_steps": steps, "lr": 0.001,
                 "warmup_steps": 5, "batch_size": 8},
            ]},
            "decode": {"beam_size": 2, "max_len": 40},
        }
        config.update(extra)
        return config
    return build
