"""Corpus-level BLEU, chrF and sentence exact match, plus evaluation of multi-task outputs."""

import logging
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field, fields
from typing import Dict, Iterable, List, Optional, Sequence

from .corpus import DEFAULT_SEP_TOKEN, strip_phoneme_suffix
from .errors import EmptyCorpus, InvalidConfig, LengthMismatch, MissingMetric

logger = logging.getLogger(__name__)

METRICS = ("bleu", "chrf", "exact_match")
SMOOTHING = ("none", "add-k")


@dataclass
class MetricConfig:
    bleu_max_order: int = 4
    bleu_smoothing: str = "none"
    bleu_smooth_k: float = 1.0
    chrf_order: int = 6
    chrf_beta: float = 2.0

    def __post_init__(self):
        if self.bleu_max_order < 1 or self.chrf_order < 1:
            raise InvalidConfig("n-gram orders must be >= 1")
        if self.chrf_beta <= 0:
            raise InvalidConfig(f"chrf_beta must be positive, got {self.chrf_beta}")
        if self.bleu_smoothing not in SMOOTHING:
            raise InvalidConfig(f"bleu_smoothing must be one of {SMOOTHING}")
        if self.bleu_smooth_k <= 0:
            raise InvalidConfig("bleu_smooth_k must be positive")

    @classmethod
    def from_dict(cls, config: dict) -> "MetricConfig":
        unknown = set(config) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfig(f"Unknown metric options: {sorted(unknown)}")
        return cls(**config)


@dataclass
class MetricReport:
    segments: int
    bleu: Optional[float] = None
    precisions: List[float] = field(default_factory=list)
    brevity_penalty: Optional[float] = None
    hyp_len: int = 0
    ref_len: int = 0
    chrf: Optional[float] = None
    exact_match: Optional[float] = None

    def value(self, metric: str) -> float:
        result = getattr(self, metric, None) if metric in METRICS else None
        if result is None:
            raise MissingMetric(f"Report has no '{metric}' score")
        return result

    def to_dict(self) -> dict:
        data = {"segments": self.segments}
        if self.bleu is not None:
            data.update(
                bleu=round(self.bleu, 1),
                bleu_raw=self.bleu,
                precisions=self.precisions,
                brevity_penalty=self.brevity_penalty,
                hyp_len=self.hyp_len,
                ref_len=self.ref_len,
            )
        if self.chrf is not None:
            data.update(chrf=round(self.chrf, 3), chrf_raw=self.chrf)
        if self.exact_match is not None:
            data.update(exact_match=round(self.exact_match, 3), exact_match_raw=self.exact_match)
        return data


def _nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def _ngrams(items: Sequence, n: int) -> Counter:
    return Counter(tuple(items[i:i + n]) for i in range(len(items) - n + 1))


def _check_aligned(hypotheses: Sequence[str], references: Sequence[str]):
    if len(hypotheses) != len(references):
        raise LengthMismatch(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not references:
        raise EmptyCorpus("Cannot score an empty set of references")


def bleu(hypotheses: Sequence[str], references: Sequence[str], cfg: Optional[MetricConfig] = None) -> MetricReport:
    """
    Corpus BLEU on whitespace tokens after NFC normalization.

    Orders above the longest reference segment are left out, so short
    segments still score 100 against themselves. An order with no matches
    gives 0 unless add-k smoothing is on.

    Args:
        hypotheses: System outputs
        references: One reference per hypothesis
        cfg: Maximum order and smoothing

    Returns:
        Report with the BLEU value (0-100), per-order precisions and brevity penalty
    """
    cfg = cfg or MetricConfig()
    _check_aligned(hypotheses, references)
    hyp_tokens = [_nfc(h).split() for h in hypotheses]
    ref_tokens = [_nfc(r).split() for r in references]

    max_order = min(cfg.bleu_max_order, max(len(r) for r in ref_tokens))
    matches = [0.0] * max_order
    totals = [0.0] * max_order
    for hyp, ref in zip(hyp_tokens, ref_tokens):
        for n in range(1, max_order + 1):
            hyp_grams = _ngrams(hyp, n)
            ref_grams = _ngrams(ref, n)
            matches[n - 1] += sum(min(count, ref_grams[gram]) for gram, count in hyp_grams.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)

    if cfg.bleu_smoothing == "add-k":
        for n in range(1, max_order):
            matches[n] += cfg.bleu_smooth_k
            totals[n] += cfg.bleu_smooth_k

    precisions = [m / t if t > 0 else 0.0 for m, t in zip(matches, totals)]
    hyp_len = sum(len(h) for h in hyp_tokens)
    ref_len = sum(len(r) for r in ref_tokens)

    if max_order == 0 or hyp_len == 0 or min(precisions) == 0.0:
        score = 0.0
        bp = 0.0 if hyp_len == 0 else math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    else:
        bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_order)

    return MetricReport(
        segments=len(hypotheses),
        bleu=score,
        precisions=[100.0 * p for p in precisions],
        brevity_penalty=bp,
        hyp_len=hyp_len,
        ref_len=ref_len,
    )


def _chrf_segment(hypothesis: str, reference: str, max_order: int, beta: float) -> float:
    hyp = "".join(_nfc(hypothesis).split())
    ref = "".join(_nfc(reference).split())
    if not ref:
        return 0.0

    precision = recall = 0.0
    orders = 0
    for n in range(1, min(max_order, len(ref)) + 1):
        ref_grams = _ngrams(ref, n)
        hyp_grams = _ngrams(hyp, n)
        hyp_total = sum(hyp_grams.values())
        matched = sum(min(count, ref_grams[gram]) for gram, count in hyp_grams.items())
        precision += matched / hyp_total if hyp_total else 0.0
        recall += matched / sum(ref_grams.values())
        orders += 1
    precision /= orders
    recall /= orders

    denominator = beta ** 2 * precision + recall
    if denominator == 0:
        return 0.0
    return (1 + beta ** 2) * precision * recall / denominator


def chrf(hypotheses: Sequence[str], references: Sequence[str], cfg: Optional[MetricConfig] = None) -> MetricReport:
    """Character n-gram F-score (whitespace removed), mean over segments, in [0, 1]."""
    cfg = cfg or MetricConfig()
    _check_aligned(hypotheses, references)
    scores = [_chrf_segment(h, r, cfg.chrf_order, cfg.chrf_beta) for h, r in zip(hypotheses, references)]
    return MetricReport(segments=len(scores), chrf=math.fsum(scores) / len(scores))


def exact_match(hypotheses: Sequence[str], references: Sequence[str]) -> MetricReport:
    """Fraction of segments equal to their reference after NFC and whitespace normalization."""
    _check_aligned(hypotheses, references)
    hits = sum(1 for h, r in zip(hypotheses, references) if _nfc(h).split() == _nfc(r).split())
    return MetricReport(segments=len(hypotheses), exact_match=hits / len(hypotheses))


def evaluate(
    hypotheses: Sequence[str],
    references: Sequence[str],
    cfg: Optional[MetricConfig] = None,
    metrics: Iterable[str] = METRICS,
) -> MetricReport:
    """Compute the requested metrics into one report."""
    metrics = list(metrics)
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise InvalidConfig(f"Unknown metrics: {sorted(unknown)}")
    report = MetricReport(segments=len(hypotheses))
    if "bleu" in metrics:
        report = bleu(hypotheses, references, cfg)
    if "chrf" in metrics:
        report.chrf = chrf(hypotheses, references, cfg).chrf
    if "exact_match" in metrics:
        report.exact_match = exact_match(hypotheses, references).exact_match
    return report


def evaluate_multitask(
    raw_hypotheses: Sequence[str],
    references: Sequence[str],
    sep_token: str = DEFAULT_SEP_TOKEN,
    cfg: Optional[MetricConfig] = None,
    metrics: Iterable[str] = METRICS,
) -> MetricReport:
    """Strip the phonemic tail after ``sep_token`` from each hypothesis, then evaluate."""
    stripped = [strip_phoneme_suffix(h, sep_token) for h in raw_hypotheses]
    changed = sum(1 for a, b in zip(raw_hypotheses, stripped) if a != b)
    logger.debug("Stripped phonemic suffix from %d of %d hypotheses", changed, len(stripped))
    return evaluate(stripped, references, cfg, metrics)


def metric_function(name: str, cfg: Optional[MetricConfig] = None, sep_token: Optional[str] = None):
    """Scalar scorer (hypotheses, references) -> value for one metric name."""
    if name not in METRICS:
        raise InvalidConfig(f"Unknown metric: {name}")

    def score(hypotheses: List[str], references: List[str]) -> float:
        if sep_token is not None:
            return evaluate_multitask(hypotheses, references, sep_token, cfg, [name]).value(name)
        return evaluate(hypotheses, references, cfg, [name]).value(name)

    return score


def summarize(reports: Dict[str, MetricReport]) -> Dict[str, dict]:
    return {key: report.to_dict() for key, report in reports.items()}
