"""Byte-pair-encoding segmenter (merge-based, deterministic)."""

import heapq
import logging
from collections import Counter, defaultdict
from typing import Dict, Iterable, List, Sequence, Tuple

from ..errors import VocabTooSmall
from .base import RESERVED, WORD_BOUNDARY, BaseSegmenter, Vocab, collect_alphabet, split_words

logger = logging.getLogger(__name__)

Pair = Tuple[str, str]


def _merge_word(symbols: Sequence[str], pair: Pair) -> Tuple[str, ...]:
    """Merge every non-overlapping occurrence of ``pair``, left to right."""
    left, right = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def _word_pairs(symbols: Sequence[str]) -> Counter:
    return Counter(zip(symbols, symbols[1:]))


class BPESegmenter(BaseSegmenter):
    """Segmenter applying an ordered merge table within each word."""

    mode = "bpe"

    def __init__(self, vocab: Vocab, merges: Sequence[Pair], **kwargs):
        super().__init__(vocab, **kwargs)
        self.merges: List[Pair] = [tuple(m) for m in merges]
        self._ranks: Dict[Pair, int] = {pair: rank for rank, pair in enumerate(self.merges)}

    def segment_word(self, word: str) -> List[str]:
        symbols = (WORD_BOUNDARY,) + tuple(word)
        while len(symbols) > 1:
            candidates = [p for p in zip(symbols, symbols[1:]) if p in self._ranks]
            if not candidates:
                break
            best = min(candidates, key=self._ranks.__getitem__)
            symbols = _merge_word(symbols, best)
        return list(symbols)

    def to_dict(self) -> dict:
        data = self._base_dict()
        data["merges"] = [list(pair) for pair in self.merges]
        return data


def train_bpe(lines: Iterable[str], vocab_size: int, tags: Iterable[str] = ()) -> BPESegmenter:
    """
    Learn a BPE merge table.

    Words get a boundary marker prepended; the most frequent adjacent pair is
    merged until the vocabulary reaches ``vocab_size``. Ties go to the
    lexicographically smallest pair.

    Args:
        lines: Training sentences
        vocab_size: Target size including reserved tokens and tags
        tags: Extra atomic tags beyond the ``<...>`` tokens found in the text

    Returns:
        Trained segmenter
    """
    tag_set = set(tags)
    word_freq: Counter = Counter()
    for word, is_tag in split_words(lines, atomic=tag_set):
        if is_tag:
            tag_set.add(word)
        else:
            word_freq[word] += 1
    if not word_freq:
        raise ValueError("Cannot train BPE on an empty corpus")

    alphabet = collect_alphabet(word_freq)
    base_vocab = Vocab(tags=tag_set, symbols=alphabet)
    if vocab_size < len(base_vocab):
        raise VocabTooSmall(
            f"vocab_size {vocab_size} below {len(base_vocab)} "
            f"({len(RESERVED)} reserved + {len(base_vocab.tags)} tags + {len(alphabet)} base symbols)"
        )
    size = len(base_vocab)

    words = sorted(word_freq)
    freqs = [word_freq[w] for w in words]
    segmented = [(WORD_BOUNDARY,) + tuple(w) for w in words]

    pair_counts: Counter = Counter()
    where: Dict[Pair, set] = defaultdict(set)
    for index, symbols in enumerate(segmented):
        for pair, count in _word_pairs(symbols).items():
            pair_counts[pair] += count * freqs[index]
            where[pair].add(index)
    heap = [(-count, pair) for pair, count in pair_counts.items()]
    heapq.heapify(heap)

    merges: List[Pair] = []
    symbols = list(alphabet)
    known = set(alphabet)
    while size < vocab_size and heap:
        neg_count, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg_count or neg_count == 0:
            continue
        merges.append(pair)
        # A merge can recreate an existing symbol string; that adds no vocab entry.
        merged = pair[0] + pair[1]
        if merged not in known:
            known.add(merged)
            symbols.append(merged)
            size += 1

        changed = set()
        for index in sorted(where.pop(pair, ())):
            old = segmented[index]
            new = _merge_word(old, pair)
            if new == old:
                continue
            for p, count in _word_pairs(old).items():
                pair_counts[p] -= count * freqs[index]
                changed.add(p)
            for p, count in _word_pairs(new).items():
                pair_counts[p] += count * freqs[index]
                where[p].add(index)
                changed.add(p)
            segmented[index] = new
        pair_counts.pop(pair, None)
        for p in changed:
            count = pair_counts.get(p, 0)
            if count > 0:
                heapq.heappush(heap, (-count, p))
            else:
                pair_counts.pop(p, None)

    if size < vocab_size:
        logger.warning("BPE ran out of pairs at vocab size %d of %d requested", size, vocab_size)

    logger.info("Trained BPE: %d merges, vocab size %d", len(merges), size)
    return BPESegmenter(Vocab(tags=tag_set, symbols=symbols), merges)
