"""Character-level segmenter and subword-to-character vocabulary transfer."""

import logging
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

from .base import RESERVED, WORD_BOUNDARY, BaseSegmenter, Vocab, collect_alphabet, split_words

logger = logging.getLogger(__name__)


class CharSegmenter(BaseSegmenter):
    """One token per character, plus a boundary marker before each word."""

    mode = "char"

    def segment_word(self, word: str) -> List[str]:
        return [WORD_BOUNDARY] + list(word)

    def to_dict(self) -> dict:
        data = self._base_dict()
        data["merges"] = []
        return data


def train_char(lines: Iterable[str], tags: Iterable[str] = ()) -> CharSegmenter:
    """Build a character vocabulary from training text."""
    tag_set = set(tags)
    words = set()
    for word, is_tag in split_words(lines, atomic=tag_set):
        if is_tag:
            tag_set.add(word)
        else:
            words.add(word)
    if not words:
        raise ValueError("Cannot build a character vocabulary from an empty corpus")
    segmenter = CharSegmenter(Vocab(tags=tag_set, symbols=collect_alphabet(words)))
    logger.info("Built character vocabulary of size %d", len(segmenter.vocab))
    return segmenter


def char_transfer(
    subword: BaseSegmenter,
    embedding_rows: Optional[Mapping[str, int]] = None,
    extra_lines: Iterable[str] = (),
) -> Tuple[CharSegmenter, Dict[int, Optional[int]]]:
    """
    Derive a character model from a subword model for fine-tuning.

    Args:
        subword: Trained subword segmenter
        embedding_rows: Subword token -> embedding row; defaults to vocabulary ids
        extra_lines: Text whose characters must also be covered (e.g. the
            character-level fine-tuning corpus)

    Returns:
        The character segmenter and a map from each character-vocabulary id to
        the subword embedding row it inherits, or None for fresh initialization
    """
    if embedding_rows is None:
        embedding_rows = {token: index for index, token in enumerate(subword.vocab.tokens)}

    reserved = set(RESERVED) | set(subword.vocab.tags)
    single_chars = [t for t in subword.vocab.tokens if len(t) == 1 and t not in reserved]

    tag_set = set(subword.vocab.tags)
    extra_words = []
    for word, is_tag in split_words(extra_lines, atomic=tag_set):
        if is_tag:
            tag_set.add(word)
        else:
            extra_words.append(word)
    alphabet = collect_alphabet(single_chars + extra_words)
    segmenter = CharSegmenter(Vocab(tags=tag_set, symbols=alphabet), unk_glyph=subword.unk_glyph)

    row_map: Dict[int, Optional[int]] = {}
    for index, token in enumerate(segmenter.vocab.tokens):
        row_map[index] = embedding_rows.get(token)
    fresh = sum(1 for row in row_map.values() if row is None)
    logger.info(
        "Character transfer: %d rows mapped, %d fresh",
        len(row_map) - fresh, fresh,
    )
    return segmenter, row_map
