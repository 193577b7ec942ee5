"""Parallel corpus construction: tagging, concatenation, balancing and multi-task data."""

import json
import logging
import math
import random
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

from .errors import (
    AlreadyTagged,
    DirectionMismatch,
    EmptyCorpus,
    EmptyPhonemization,
    G2PLanguageMismatch,
    SepCollision,
    UntaggedPair,
)
from .g2p import G2PRuleSet, phonemize
from .langcode import LangCode

logger = logging.getLogger(__name__)

DEFAULT_SEP_TOKEN = "<sep>"

_TAG_RE = re.compile(r"^<[^<>\s]+>$")
_WS_RE = re.compile(r"\s+")


def normalize_whitespace(text: str) -> str:
    """Collapse whitespace runs to single spaces and trim both ends."""
    return _WS_RE.sub(" ", text).strip()


def is_tag(token: str) -> bool:
    return bool(_TAG_RE.match(token))


class Origin(str, Enum):
    PARALLEL = "parallel"
    BACKTRANSLATED = "backtranslated"
    PHONEME_TASK = "phoneme_task"
    HORIZONTAL_MULTITASK = "horizontal_multitask"


def _as_lang(value) -> LangCode:
    return LangCode.parse(value)


@dataclass(frozen=True)
class SentencePair:
    source: str
    target: str
    src_lang: LangCode
    tgt_lang: LangCode
    origin: Origin = Origin.PARALLEL

    def __post_init__(self):
        object.__setattr__(self, "source", normalize_whitespace(self.source))
        object.__setattr__(self, "target", normalize_whitespace(self.target))
        object.__setattr__(self, "src_lang", _as_lang(self.src_lang))
        object.__setattr__(self, "tgt_lang", _as_lang(self.tgt_lang))
        object.__setattr__(self, "origin", Origin(self.origin))
        if not self.source or not self.target:
            raise ValueError("Sentence pair sides must be nonempty after whitespace normalization")
        if self.origin is Origin.PHONEME_TASK and not self.tgt_lang.is_task:
            raise ValueError(f"Phoneme-task pair needs a task target language, got {self.tgt_lang}")

    @property
    def direction(self) -> Tuple[LangCode, LangCode]:
        return self.src_lang, self.tgt_lang

    @property
    def is_tagged(self) -> bool:
        return is_tag(self.source.split(" ", 1)[0])


@dataclass(frozen=True)
class ParallelCorpus:
    name: str
    pairs: Tuple[SentencePair, ...] = ()
    mixed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if not self.mixed and self.pairs:
            direction = self.pairs[0].direction
            for pair in self.pairs:
                if pair.direction != direction:
                    raise DirectionMismatch(
                        f"Corpus '{self.name}' mixes {direction[0]}-{direction[1]} "
                        f"with {pair.src_lang}-{pair.tgt_lang}; mark it mixed"
                    )

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[SentencePair]:
        return iter(self.pairs)

    @property
    def direction(self) -> Optional[Tuple[LangCode, LangCode]]:
        if self.mixed or not self.pairs:
            return None
        return self.pairs[0].direction

    @property
    def sources(self) -> List[str]:
        return [p.source for p in self.pairs]

    @property
    def targets(self) -> List[str]:
        return [p.target for p in self.pairs]


@dataclass
class MixEntry:
    corpus: ParallelCorpus
    policy: str = "as_is"  # or "oversample_to_max"


@dataclass
class MixSpec:
    entries: List[MixEntry] = field(default_factory=list)
    shuffle_seed: int = 0


# Tagging

def strip_tag(source: str) -> Tuple[Optional[str], str]:
    """Split a leading ``<...>`` token off a source sentence."""
    head, _, rest = source.partition(" ")
    if is_tag(head):
        return head, rest
    return None, source


def tag_source(pair: SentencePair) -> SentencePair:
    """Prepend the target-language tag to the source side."""
    if pair.is_tagged:
        raise AlreadyTagged(f"Source already tagged: {pair.source.split(' ', 1)[0]}")
    return replace(pair, source=f"{pair.tgt_lang.tag} {pair.source}")


def tag_corpus(corpus: ParallelCorpus) -> ParallelCorpus:
    return replace(corpus, pairs=tuple(tag_source(p) for p in corpus))


def _require_tagged(corpora: Iterable[ParallelCorpus]):
    for corpus in corpora:
        for i, pair in enumerate(corpus):
            if not pair.is_tagged:
                raise UntaggedPair(f"Corpus '{corpus.name}' line {i + 1} has no language tag: {pair.source!r}")


# Combination

def concat_multilingual(
    corpora: Sequence[ParallelCorpus],
    seed: int,
    name: str = "multilingual",
) -> ParallelCorpus:
    """Concatenate tagged corpora and shuffle the result with a fixed seed."""
    _require_tagged(corpora)
    pairs = [p for corpus in corpora for p in corpus]
    random.Random(seed).shuffle(pairs)
    return ParallelCorpus(name=name, pairs=tuple(pairs), mixed=True)


def balance_oversample(
    corpora: Sequence[ParallelCorpus],
    seed: int,
    target: Optional[int] = None,
) -> List[ParallelCorpus]:
    """Oversample every corpus to the size of the largest one (or ``target``).

    Smaller corpora are repeated whole, then topped up with a seeded sample
    (without replacement) of the remainder.
    """
    for corpus in corpora:
        if len(corpus) == 0:
            raise EmptyCorpus(f"Cannot balance empty corpus '{corpus.name}'")
    target = max([len(c) for c in corpora] + [target or 0])

    balanced = []
    for index, corpus in enumerate(corpora):
        size = len(corpus)
        if size == target:
            balanced.append(corpus)
            continue
        copies, remainder = divmod(target, size)
        rng = random.Random(f"{seed}/{index}/{corpus.name}")
        pairs = list(corpus.pairs) * copies + rng.sample(list(corpus.pairs), remainder)
        logger.info("Oversampled '%s' from %d to %d pairs", corpus.name, size, target)
        balanced.append(replace(corpus, pairs=tuple(pairs)))
    return balanced


def mix(spec: MixSpec, name: str = "multilingual") -> ParallelCorpus:
    """Apply a MixSpec: balance the entries that ask for it, then concatenate."""
    if not spec.entries:
        raise ValueError("MixSpec needs at least one entry")
    to_balance = [e.corpus for e in spec.entries if e.policy == "oversample_to_max"]
    largest = max(len(e.corpus) for e in spec.entries)
    balanced = iter(balance_oversample(to_balance, spec.shuffle_seed, target=largest) if to_balance else [])
    corpora = []
    for entry in spec.entries:
        if entry.policy == "oversample_to_max":
            corpora.append(next(balanced))
        elif entry.policy == "as_is":
            corpora.append(entry.corpus)
        else:
            raise ValueError(f"Unknown balance policy: {entry.policy}")
    return concat_multilingual(corpora, spec.shuffle_seed, name=name)


def mix_backtranslation(
    parallel: ParallelCorpus,
    bt: ParallelCorpus,
    ratio,
    seed: int = 0,
) -> ParallelCorpus:
    """Add a seeded sample of backtranslated pairs sized ``ratio * |parallel|``."""
    _require_tagged([parallel, bt])
    if parallel.direction != bt.direction and len(bt) > 0:
        raise DirectionMismatch(
            f"Parallel corpus direction {parallel.direction} differs from backtranslation {bt.direction}"
        )
    for pair in bt:
        if pair.origin is not Origin.BACKTRANSLATED:
            raise ValueError(f"Corpus '{bt.name}' contains non-backtranslated pair: {pair.source!r}")

    ratio = Fraction(str(ratio))
    if ratio < 0:
        raise ValueError(f"Backtranslation ratio must be nonnegative, got {ratio}")
    size = min(math.floor(ratio * len(parallel)), len(bt))
    if size == 0:
        return parallel

    rng = random.Random(seed)
    pairs = list(parallel.pairs) + rng.sample(list(bt.pairs), size)
    rng.shuffle(pairs)
    logger.info("Mixed %d backtranslated pairs into %d parallel pairs", size, len(parallel))
    return ParallelCorpus(name=f"{parallel.name}+{bt.name}", pairs=tuple(pairs), mixed=parallel.mixed)


# Multi-task data

def _check_g2p_language(bitext: ParallelCorpus, g2p: G2PRuleSet):
    if g2p.language is None:
        raise G2PLanguageMismatch(f"Rule set has no language; bind it before phonemizing '{bitext.name}'")
    for pair in bitext:
        if pair.src_lang.base != g2p.language.base:
            raise G2PLanguageMismatch(
                f"Rules for '{g2p.language}' cannot phonemize '{pair.src_lang}' source in '{bitext.name}'"
            )


def _phonemize_source(text: str, g2p: G2PRuleSet, corpus_name: str, index: int) -> str:
    phonemes = phonemize(text, g2p)
    if not phonemes.strip():
        raise EmptyPhonemization(f"Source line {index + 1} of '{corpus_name}' phonemizes to nothing: {text!r}")
    return phonemes


def make_g2p_vertical(bitext: ParallelCorpus, g2p: G2PRuleSet) -> ParallelCorpus:
    """Append a phonemization pair (same source, ``<src_p>`` tag) for every bitext pair."""
    _require_tagged([bitext])
    _check_g2p_language(bitext, g2p)

    added = []
    for i, pair in enumerate(bitext):
        _, text = strip_tag(pair.source)
        phonemes = _phonemize_source(text, g2p, bitext.name, i)
        task = pair.src_lang.phoneme_task()
        added.append(SentencePair(
            source=f"{task.tag} {text}",
            target=phonemes,
            src_lang=pair.src_lang,
            tgt_lang=task,
            origin=Origin.PHONEME_TASK,
        ))
    return ParallelCorpus(name=f"{bitext.name}+vert", pairs=bitext.pairs + tuple(added), mixed=True)


def make_g2p_horizontal(
    bitext: ParallelCorpus,
    g2p: G2PRuleSet,
    sep_token: str = DEFAULT_SEP_TOKEN,
) -> ParallelCorpus:
    """Extend every target with ``<sep>`` and the phonemized source."""
    _require_tagged([bitext])
    _check_g2p_language(bitext, g2p)

    pairs = []
    for i, pair in enumerate(bitext):
        if sep_token in pair.target:
            raise SepCollision(f"'{sep_token}' already occurs in target line {i + 1} of '{bitext.name}'")
        _, text = strip_tag(pair.source)
        pairs.append(replace(
            pair,
            target=f"{pair.target} {sep_token} {_phonemize_source(text, g2p, bitext.name, i)}",
            origin=Origin.HORIZONTAL_MULTITASK,
        ))
    return ParallelCorpus(name=f"{bitext.name}+horiz", pairs=tuple(pairs), mixed=bitext.mixed)


def strip_phoneme_suffix(text: str, sep_token: str = DEFAULT_SEP_TOKEN) -> str:
    """Drop everything from the first separator on."""
    index = text.find(sep_token)
    if index < 0:
        return text
    return text[:index].rstrip()


# Selection helpers

def restrict(corpus: ParallelCorpus, exclude: Iterable[Origin] = (Origin.PHONEME_TASK,)) -> ParallelCorpus:
    """Keep only pairs whose origin is not excluded."""
    excluded = {Origin(o) for o in exclude}
    pairs = tuple(p for p in corpus if p.origin not in excluded)
    directions = {p.direction for p in pairs}
    return ParallelCorpus(name=corpus.name, pairs=pairs, mixed=len(directions) > 1)


def by_direction(corpus: ParallelCorpus) -> dict:
    """Group pairs into one corpus per (src, tgt) direction, preserving order."""
    groups = {}
    for pair in corpus:
        groups.setdefault(pair.direction, []).append(pair)
    return {
        (src, tgt): ParallelCorpus(name=f"{corpus.name}.{src}-{tgt}", pairs=tuple(pairs))
        for (src, tgt), pairs in groups.items()
    }


def split_corpus(corpus: ParallelCorpus, held_out: int, seed: int) -> Tuple[ParallelCorpus, ParallelCorpus]:
    """Carve a seeded held-out set off a corpus; the rest keeps its order."""
    if held_out >= len(corpus):
        raise ValueError(f"Held-out size {held_out} must be smaller than corpus '{corpus.name}' ({len(corpus)})")
    chosen = set(random.Random(seed).sample(range(len(corpus)), held_out))
    train = tuple(p for i, p in enumerate(corpus) if i not in chosen)
    dev = tuple(p for i, p in enumerate(corpus) if i in chosen)
    return (
        replace(corpus, name=f"{corpus.name}.train", pairs=train),
        replace(corpus, name=f"{corpus.name}.heldout", pairs=dev),
    )


# File I/O

def load_corpus_from_files(
    src_path,
    tgt_path,
    src_lang,
    tgt_lang,
    name: Optional[str] = None,
    origin: Origin = Origin.PARALLEL,
) -> ParallelCorpus:
    """Read line-aligned source/target files, dropping lines with an empty side."""
    src_path, tgt_path = Path(src_path), Path(tgt_path)
    for path in (src_path, tgt_path):
        if not path.exists():
            raise FileNotFoundError(f"Corpus file not found: {path}")
    with open(src_path, "r", encoding="utf-8") as f:
        sources = f.read().splitlines()
    with open(tgt_path, "r", encoding="utf-8") as f:
        targets = f.read().splitlines()
    if len(sources) != len(targets):
        raise ValueError(f"{src_path} has {len(sources)} lines but {tgt_path} has {len(targets)}")

    pairs, dropped = [], 0
    for source, target in zip(sources, targets):
        if not normalize_whitespace(source) or not normalize_whitespace(target):
            dropped += 1
            continue
        pairs.append(SentencePair(source, target, src_lang, tgt_lang, origin))
    if dropped:
        logger.warning("Dropped %d empty lines from %s / %s", dropped, src_path.name, tgt_path.name)
    return ParallelCorpus(name=name or src_path.stem, pairs=tuple(pairs))


def save_corpus(corpus: ParallelCorpus, prefix) -> Path:
    """Write ``<prefix>.src``, ``<prefix>.tgt`` and the ``<prefix>.json`` manifest."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(f"{prefix}.src", "w", encoding="utf-8", newline="\n") as f:
        f.writelines(p.source + "\n" for p in corpus)
    with open(f"{prefix}.tgt", "w", encoding="utf-8", newline="\n") as f:
        f.writelines(p.target + "\n" for p in corpus)

    origins = {p.origin for p in corpus}
    manifest = {"name": corpus.name, "size": len(corpus), "mixed": corpus.mixed}
    if corpus.mixed or len(origins) > 1:
        manifest["mixed"] = True
        manifest["lines"] = [[str(p.src_lang), str(p.tgt_lang), p.origin.value] for p in corpus]
    elif corpus.pairs:
        src, tgt = corpus.direction
        manifest.update(src_lang=str(src), tgt_lang=str(tgt), origin=corpus.pairs[0].origin.value)
    manifest_path = Path(f"{prefix}.json")
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest_path


def load_corpus(prefix) -> ParallelCorpus:
    """Read a corpus written by :func:`save_corpus`."""
    prefix = Path(prefix)
    manifest_path = Path(f"{prefix}.json")
    if not manifest_path.exists():
        raise FileNotFoundError(f"Corpus manifest not found: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    with open(f"{prefix}.src", "r", encoding="utf-8") as f:
        sources = f.read().splitlines()
    with open(f"{prefix}.tgt", "r", encoding="utf-8") as f:
        targets = f.read().splitlines()

    if "lines" in manifest:
        meta = manifest["lines"]
    else:
        meta = [[manifest["src_lang"], manifest["tgt_lang"], manifest.get("origin", "parallel")]] * len(sources)
    if not (len(sources) == len(targets) == len(meta)):
        raise ValueError(f"Corpus files for {prefix} are not aligned")

    pairs = tuple(
        SentencePair(s, t, src, tgt, origin)
        for s, t, (src, tgt, origin) in zip(sources, targets, meta)
    )
    return ParallelCorpus(name=manifest["name"], pairs=pairs, mixed=manifest.get("mixed", False))
