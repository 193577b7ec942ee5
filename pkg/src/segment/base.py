"""Vocabulary and the abstract segmenter shared by BPE and character modes."""

import json
import logging
import unicodedata
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from ..errors import ConfigError, UnknownId

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
NORMALIZATION = "NFC"

WORD_BOUNDARY = "▁"
UNK_GLYPH = "⁇"

UNK, BOS, EOS, PAD, SEP = range(5)
RESERVED = ("<unk>", "<s>", "</s>", "<pad>", "<sep>")


def normalize_text(text: str) -> str:
    """NFC-normalize and collapse whitespace."""
    return " ".join(unicodedata.normalize(NORMALIZATION, text).split())


class Vocab:
    """Bijective token <-> id map.

    Reserved tokens come first in fixed order, then language/task tags
    (sorted), then segmenter symbols in the order given.
    """

    def __init__(self, tags: Iterable[str] = (), symbols: Sequence[str] = ()):
        self.tags = tuple(sorted(set(tags) - set(RESERVED)))
        self._tokens: List[str] = list(RESERVED) + list(self.tags) + list(symbols)
        self._ids: Dict[str, int] = {}
        for index, token in enumerate(self._tokens):
            if token in self._ids:
                raise ValueError(f"Duplicate vocabulary token: {token!r}")
            self._ids[token] = index
        self.atomic = frozenset(self.tags) | {RESERVED[SEP]}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._tokens == other._tokens

    @property
    def tokens(self) -> List[str]:
        return list(self._tokens)

    @property
    def num_reserved(self) -> int:
        return len(RESERVED) + len(self.tags)

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token(self, index: int) -> str:
        if not 0 <= index < len(self._tokens):
            raise UnknownId(f"Token id {index} outside vocabulary of size {len(self._tokens)}")
        return self._tokens[index]

    def is_reserved(self, index: int) -> bool:
        return 0 <= index < self.num_reserved


@dataclass(frozen=True)
class SegmenterMode:
    kind: str = "bpe"
    vocab_size: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("bpe", "char"):
            raise ConfigError(f"Unknown segmenter mode: {self.kind}")
        if self.kind == "bpe" and (self.vocab_size is None or self.vocab_size <= 0):
            raise ConfigError("bpe mode needs a positive vocab_size")

    @classmethod
    def from_dict(cls, config: dict) -> "SegmenterMode":
        config = dict(config)
        kind = config.pop("mode", "bpe")
        vocab_size = config.pop("vocab_size", None)
        if config:
            raise ConfigError(f"Unknown segmenter options: {sorted(config)}")
        return cls(kind, vocab_size if kind == "bpe" else None)


class BaseSegmenter(ABC):
    """Abstract base class for segmenters."""

    mode: str = ""

    def __init__(self, vocab: Vocab, unk_glyph: str = UNK_GLYPH):
        self.vocab = vocab
        self.unk_glyph = unk_glyph
        self._cache: Dict[str, List[str]] = {}

    @abstractmethod
    def segment_word(self, word: str) -> List[str]:
        """
        Split one word into vocabulary symbols.

        Args:
            word: A whitespace-free word, without boundary marker

        Returns:
            Symbols, the first one carrying or being the boundary marker
        """
        pass

    @abstractmethod
    def to_dict(self) -> dict:
        """Serializable model description."""
        pass

    def encode_as_pieces(self, text: str) -> List[str]:
        pieces = []
        for word in normalize_text(text).split(" "):
            if not word:
                continue
            if word in self.vocab.atomic:
                pieces.append(word)
                continue
            if word not in self._cache:
                self._cache[word] = self.segment_word(word)
            pieces.extend(self._cache[word])
        return pieces

    def encode(self, text: str, add_eos: bool = False) -> List[int]:
        """
        Encode text into token ids.

        Args:
            text: Input sentence; tags and ``<sep>`` stay single tokens
            add_eos: Append the end-of-sentence id

        Returns:
            Token ids; symbols outside the vocabulary map to ``<unk>``
        """
        ids = [self.vocab.id(piece) for piece in self.encode_as_pieces(text)]
        if add_eos:
            ids.append(EOS)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of :meth:`encode` on in-vocabulary text."""
        pieces = []
        for index in ids:
            index = int(index)
            token = self.vocab.token(index)
            if index in (BOS, EOS, PAD):
                continue
            if index == UNK:
                pieces.append(self.unk_glyph)
            elif token in self.vocab.atomic:
                pieces.append(WORD_BOUNDARY + token + WORD_BOUNDARY)
            else:
                pieces.append(token)
        text = "".join(pieces).replace(WORD_BOUNDARY, " ")
        return " ".join(text.split())

    def has_unknown(self, text: str) -> bool:
        return UNK in self.encode(text)

    def save(self, path) -> Path:
        """Write the model as JSON with stable key order."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=1, sort_keys=True)
            f.write("\n")
        return path

    def _base_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "mode": self.mode,
            "normalization": NORMALIZATION,
            "tags": list(self.vocab.tags),
            "vocab": self.vocab.tokens,
        }


def collect_alphabet(words: Iterable[str]) -> List[str]:
    """Sorted base symbols of a word list, plus the boundary marker."""
    chars = {c for word in words for c in word}
    chars.discard(WORD_BOUNDARY)
    return sorted(chars | {WORD_BOUNDARY})


def split_words(lines: Iterable[str], atomic: Iterable[str] = ()):
    """Normalize lines and yield (word, is_tag) pairs."""
    atomic = set(atomic)
    for line in lines:
        for word in normalize_text(line).split(" "):
            if word:
                yield word, (word in atomic or _looks_like_tag(word))


def _looks_like_tag(word: str) -> bool:
    return len(word) > 2 and word[0] == "<" and word[-1] == ">" and "<" not in word[1:-1] and ">" not in word[1:-1]
