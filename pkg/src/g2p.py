"""Rule-based grapheme-to-phoneme conversion.

Rule files hold one rule per line::

    # language: ca
    qu -> k
    c / _ e -> s
    s / _ # -> s
    h ->

``pattern / left _ right -> replacement``. Contexts are literals; a leading
``#`` on the left context or a trailing ``#`` on the right context pins it to
the word edge. Contexts are matched against the input but not consumed.

Application is one left-to-right pass per whitespace-delimited token. At each
position the first rule in file order whose pattern and contexts match is
applied and the cursor moves past the pattern; unmatched characters are
copied. Output uses no phone separators or stress marks.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple

from .errors import ParseError
from .langcode import LangCode

logger = logging.getLogger(__name__)

BOUNDARY = "#"
_LANGUAGE_HEADER = "language:"


@dataclass(frozen=True)
class Context:
    literal: str = ""
    at_boundary: bool = False


@dataclass(frozen=True)
class G2PRule:
    pattern: str
    replacement: str
    left_ctx: Optional[Context] = None
    right_ctx: Optional[Context] = None
    line_no: int = 0

    @property
    def key(self) -> tuple:
        return (self.pattern, self.left_ctx, self.right_ctx, self.replacement)

    def matches(self, token: str, pos: int) -> bool:
        if not token.startswith(self.pattern, pos):
            return False
        if self.left_ctx is not None:
            start = pos - len(self.left_ctx.literal)
            if start < 0 or token[start:pos] != self.left_ctx.literal:
                return False
            if self.left_ctx.at_boundary and start != 0:
                return False
        if self.right_ctx is not None:
            end = pos + len(self.pattern)
            if not token.startswith(self.right_ctx.literal, end):
                return False
            if self.right_ctx.at_boundary and end + len(self.right_ctx.literal) != len(token):
                return False
        return True

    def __str__(self) -> str:
        text = self.pattern
        if self.left_ctx is not None or self.right_ctx is not None:
            left = _format_ctx(self.left_ctx, left=True)
            right = _format_ctx(self.right_ctx, left=False)
            text += f" / {left} _ {right}".rstrip()
        return f"{text} -> {self.replacement}".rstrip()


@dataclass(frozen=True)
class G2PRuleSet:
    language: Optional[LangCode]
    rules: Tuple[G2PRule, ...] = ()

    def __len__(self) -> int:
        return len(self.rules)

    def bind(self, language) -> "G2PRuleSet":
        """Same rules, attached to a language."""
        return replace(self, language=LangCode.parse(language))


def _format_ctx(ctx: Optional[Context], left: bool) -> str:
    if ctx is None:
        return ""
    if not ctx.at_boundary:
        return ctx.literal
    return BOUNDARY + ctx.literal if left else ctx.literal + BOUNDARY


def _parse_context(text: str, left: bool, line_no: int) -> Optional[Context]:
    text = text.strip()
    if not text:
        return None
    at_boundary = False
    if left and text.startswith(BOUNDARY):
        at_boundary, text = True, text[1:]
    elif not left and text.endswith(BOUNDARY):
        at_boundary, text = True, text[:-1]
    if BOUNDARY in text or any(c.isspace() for c in text):
        raise ParseError(line_no, f"invalid context '{text}'")
    return Context(text.lower(), at_boundary)


def _parse_rule(line: str, line_no: int) -> G2PRule:
    lhs, arrow, replacement = line.partition("->")
    if not arrow:
        raise ParseError(line_no, "missing '->'")
    replacement = replacement.strip()
    if any(c.isspace() for c in replacement):
        raise ParseError(line_no, f"replacement '{replacement}' contains whitespace")

    pattern, slash, context = lhs.partition("/")
    pattern = pattern.strip()
    if not pattern:
        raise ParseError(line_no, "empty pattern")
    if BOUNDARY in pattern or any(c.isspace() for c in pattern):
        raise ParseError(line_no, f"invalid pattern '{pattern}'")

    left = right = None
    if slash:
        if context.count("_") != 1:
            raise ParseError(line_no, "context must contain exactly one '_'")
        left_text, right_text = context.split("_")
        left = _parse_context(left_text, left=True, line_no=line_no)
        right = _parse_context(right_text, left=False, line_no=line_no)
    return G2PRule(pattern.lower(), replacement, left, right, line_no)


def compile_rules(rule_file: str, language=None) -> G2PRuleSet:
    """Compile rule-file text into a rule set, keeping file order.

    Args:
        rule_file: Contents of a rule file
        language: Language code; overrides the ``# language:`` header. Without
            either the rule set stays unbound until checked against a corpus

    Returns:
        Compiled rule set
    """
    header_language = None
    rules = []
    seen = {}
    for line_no, raw in enumerate(rule_file.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(BOUNDARY):
            comment = line.lstrip(BOUNDARY).strip()
            if comment.lower().startswith(_LANGUAGE_HEADER):
                header_language = comment[len(_LANGUAGE_HEADER):].strip()
            continue

        rule = _parse_rule(line, line_no)
        if rule.key in seen:
            logger.warning("Duplicate rule on line %d (first on line %d): %s", line_no, seen[rule.key], rule)
            continue
        seen[rule.key] = line_no

        for earlier in rules:
            if earlier.left_ctx is None and earlier.right_ctx is None and rule.pattern.startswith(earlier.pattern):
                logger.warning(
                    "Rule on line %d (%s) is shadowed by line %d (%s)",
                    line_no, rule, earlier.line_no, earlier,
                )
                break
        rules.append(rule)

    language = language or header_language
    return G2PRuleSet(LangCode.parse(language) if language else None, tuple(rules))


def load_rules(path, language=None) -> G2PRuleSet:
    """Read and compile a rule file from disk."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Rule file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return compile_rules(f.read(), language=language)


def _lower_same_length(token: str) -> str:
    return "".join(c.lower() if len(c.lower()) == 1 else c for c in token)


def _phonemize_token(token: str, rules: Tuple[G2PRule, ...], preserve_case: bool) -> str:
    lowered = _lower_same_length(token)
    copy_from = token if preserve_case else lowered
    out = []
    pos = 0
    while pos < len(lowered):
        for rule in rules:
            if rule.matches(lowered, pos):
                out.append(rule.replacement)
                pos += len(rule.pattern)
                break
        else:
            out.append(copy_from[pos])
            pos += 1
    return "".join(out)


def phonemize(text: str, ruleset: G2PRuleSet, preserve_case: bool = False) -> str:
    """Convert text to its phonemic form in a single left-to-right pass."""
    return " ".join(_phonemize_token(token, ruleset.rules, preserve_case) for token in text.split())
