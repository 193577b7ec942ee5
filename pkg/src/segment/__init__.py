"""Segmentation module."""

import json
from pathlib import Path
from typing import Iterable

from ..errors import ConfigError
from .base import (
    BOS,
    EOS,
    PAD,
    RESERVED,
    SEP,
    UNK,
    WORD_BOUNDARY,
    BaseSegmenter,
    SegmenterMode,
    Vocab,
)
from .bpe import BPESegmenter, train_bpe
from .char import CharSegmenter, char_transfer, train_char


def get_segmenter(mode: SegmenterMode, lines: Iterable[str], tags: Iterable[str] = ()) -> BaseSegmenter:
    """
    Train the segmenter selected by the configured mode.

    Args:
        mode: Segmenter mode (bpe with vocabulary size, or char)
        lines: Training text
        tags: Atomic tags to reserve in addition to those found in the text

    Returns:
        Trained segmenter
    """
    if isinstance(mode, dict):
        mode = SegmenterMode.from_dict(mode)
    if mode.kind == "bpe":
        return train_bpe(lines, mode.vocab_size, tags=tags)
    elif mode.kind == "char":
        return train_char(lines, tags=tags)
    else:
        raise ConfigError(f"Unknown segmenter mode: {mode.kind}")


def load_segmenter(path) -> BaseSegmenter:
    """Read a segmenter model JSON file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Segmenter model not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)

    tags = data.get("tags", [])
    symbols = data["vocab"][len(RESERVED) + len(tags):]
    vocab = Vocab(tags=tags, symbols=symbols)
    if vocab.tokens != data["vocab"]:
        raise ValueError(f"Inconsistent vocabulary in {path}")

    if data["mode"] == "bpe":
        return BPESegmenter(vocab, [tuple(m) for m in data["merges"]])
    elif data["mode"] == "char":
        return CharSegmenter(vocab)
    else:
        raise ValueError(f"Unknown segmenter mode in {path}: {data['mode']}")


__all__ = [
    "BOS", "EOS", "PAD", "SEP", "UNK", "RESERVED", "WORD_BOUNDARY",
    "BaseSegmenter", "BPESegmenter", "CharSegmenter", "SegmenterMode", "Vocab",
    "char_transfer", "get_segmenter", "load_segmenter", "train_bpe", "train_char",
]
