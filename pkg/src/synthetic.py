"""Synthetic sister-language corpora for desk-scale experiments."""

import random
from pathlib import Path
from typing import List, Optional, Sequence

from .corpus import Origin, ParallelCorpus, SentencePair
from .errors import ConfigError
from .g2p import load_rules, phonemize

DEFAULT_VOCAB = Path(__file__).resolve().parent.parent / "fixtures" / "base_vocab.txt"


def load_word_list(path=DEFAULT_VOCAB) -> List[str]:
    """Read one word per line, skipping blanks and ``#`` comments."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Word list not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        words = [line.strip() for line in f if line.strip() and not line.startswith("#")]
    if not words:
        raise ValueError(f"Word list is empty: {path}")
    return words


def generate_sentences(
    vocab: Sequence[str],
    n: int,
    seed: int,
    min_len: int = 3,
    max_len: int = 8,
) -> List[str]:
    """Draw ``n`` distinct sentences of uniformly random length and words."""
    if not 1 <= min_len <= max_len:
        raise ValueError(f"Invalid sentence length range {min_len}..{max_len}")
    rng = random.Random(seed)
    seen = set()
    sentences = []
    attempts = 0
    while len(sentences) < n:
        attempts += 1
        if attempts > 100 * n + 1000:
            raise ValueError(f"Could not draw {n} distinct sentences from {len(vocab)} words")
        sentence = " ".join(rng.choice(vocab) for _ in range(rng.randint(min_len, max_len)))
        if sentence not in seen:
            seen.add(sentence)
            sentences.append(sentence)
    return sentences


def make_sister_corpus(
    n: int,
    rules_path,
    src_lang: str,
    tgt_lang: Optional[str] = None,
    seed: int = 1,
    vocab_path=DEFAULT_VOCAB,
    min_len: int = 3,
    max_len: int = 8,
    name: Optional[str] = None,
) -> ParallelCorpus:
    """
    Build a parallel corpus from base-language sentences and their rewrite.

    Args:
        n: Number of sentence pairs
        rules_path: Rewrite rule file defining the sister language
        src_lang: Base language code
        tgt_lang: Sister language code; defaults to the rule file's language
        seed: Sentence sampling seed
        vocab_path: Base-language word list
        min_len: Shortest sentence in words
        max_len: Longest sentence in words
        name: Corpus name (default ``<src>-<tgt>``)

    Returns:
        Untagged corpus with ``origin=parallel``
    """
    rules = load_rules(rules_path, language=tgt_lang)
    if rules.language is None:
        raise ConfigError(f"Sister language not given and {rules_path} has no '# language:' header")
    sentences = generate_sentences(load_word_list(vocab_path), n, seed, min_len, max_len)
    tgt = rules.language
    pairs = tuple(
        SentencePair(sentence, phonemize(sentence, rules), src_lang, tgt, Origin.PARALLEL)
        for sentence in sentences
    )
    return ParallelCorpus(name=name or f"{src_lang}-{tgt}", pairs=pairs)
