"""
Length-normalized beam search, (n, b) grid search, n-best files and
character-level rescoring.

Scores are summed log-softmax values in float64, so a returned hypothesis'
``raw_logprob`` equals :func:`src.model.score_hypothesis` of its tokens.
Ties are broken by token ids in lexicographic order.
"""

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch
from tqdm import tqdm

from .errors import EncodingFailure, InvalidConfig, ZeroLength
from .model import Seq2SeqModel, score_hypothesis
from .segment import BaseSegmenter

logger = logging.getLogger(__name__)

NBEST_FIELD_SEP = " ||| "


@dataclass
class BeamConfig:
    beam_size: int = 8
    length_norm_exponent: float = 1.0
    max_len: Optional[int] = None
    max_len_ratio: float = 2.0
    nbest_k: int = 1

    def __post_init__(self):
        if self.beam_size < 1:
            raise InvalidConfig(f"beam_size must be >= 1, got {self.beam_size}")
        if self.length_norm_exponent < 0:
            raise InvalidConfig(f"length_norm_exponent must be >= 0, got {self.length_norm_exponent}")
        if self.max_len is not None and self.max_len < 1:
            raise InvalidConfig(f"max_len must be >= 1, got {self.max_len}")
        if self.max_len_ratio <= 0:
            raise InvalidConfig(f"max_len_ratio must be positive, got {self.max_len_ratio}")
        if self.nbest_k < 1:
            raise InvalidConfig(f"nbest_k must be >= 1, got {self.nbest_k}")

    @classmethod
    def from_dict(cls, config: dict) -> "BeamConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(config) - known
        if unknown:
            raise InvalidConfig(f"Unknown decode options: {sorted(unknown)}")
        return cls(**config)

    def resolve_max_len(self, src_len: int) -> int:
        if self.max_len is not None:
            return self.max_len
        return int(self.max_len_ratio * src_len) + 5


@dataclass
class RescoreConfig:
    lam: float = 1.0
    normalize: bool = True
    exponent: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidConfig(f"rescore lambda must be in [0, 1], got {self.lam}")
        if self.exponent < 0:
            raise InvalidConfig(f"rescore exponent must be >= 0, got {self.exponent}")

    @classmethod
    def from_dict(cls, config: dict) -> "RescoreConfig":
        config = dict(config)
        if "lambda" in config:
            config["lam"] = config.pop("lambda")
        unknown = set(config) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidConfig(f"Unknown rescore options: {sorted(unknown)}")
        return cls(**config)


@dataclass
class Hypothesis:
    tokens: Tuple[int, ...]
    raw_logprob: float
    normalized_score: float
    finished: bool = True
    text: Optional[str] = None
    repetition: int = 0
    rescore_score: Optional[float] = None

    @property
    def final_score(self) -> float:
        return self.normalized_score if self.rescore_score is None else self.rescore_score


def _rank_key(hyp: Hypothesis):
    return (-hyp.final_score, hyp.tokens)


@dataclass
class NBestList:
    """Hypotheses for one source sentence, best first."""

    source_id: int
    hypotheses: List[Hypothesis] = field(default_factory=list)
    source: Optional[str] = None

    def __post_init__(self):
        self.hypotheses = sorted(self.hypotheses, key=_rank_key)

    def __len__(self) -> int:
        return len(self.hypotheses)

    def __iter__(self):
        return iter(self.hypotheses)

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]

    @property
    def flagged(self) -> bool:
        """True when no hypothesis reached end-of-sentence."""
        return any(not h.finished for h in self.hypotheses)


def length_normalize(raw_logprob: float, length: int, n: float) -> float:
    """Divide a log-probability by length**n."""
    if length < 1:
        raise ZeroLength(f"Cannot length-normalize a hypothesis of length {length}")
    return raw_logprob / length ** n


def max_repeat_run(text: str, max_order: int = 4) -> int:
    """Longest run of an immediately repeated character n-gram (n <= max_order)."""
    best = 1 if text else 0
    for n in range(1, max_order + 1):
        for start in range(len(text) - 2 * n + 1):
            gram = text[start:start + n]
            run = 1
            while text[start + run * n:start + (run + 1) * n] == gram:
                run += 1
            best = max(best, run)
    return best


def _step_log_probs(model: Seq2SeqModel, memory, src_mask, prefixes: List[Tuple[int, ...]]) -> torch.Tensor:
    config = model.config
    prefix = torch.tensor([(config.bos_id,) + p for p in prefixes], dtype=torch.long)
    batch = len(prefixes)
    logits = model.decode(prefix, memory.expand(batch, -1, -1), src_mask.expand(batch, -1, -1, -1))[:, -1]
    log_probs = torch.log_softmax(logits.to(torch.float64), dim=-1)
    log_probs[:, config.pad_id] = float("-inf")
    return log_probs


def _best_reachable(raw: float, max_len: int, n: float) -> float:
    # raw <= 0 and extensions only lower it; the final length is at most max_len.
    return raw if n == 0 else raw / max_len ** n


@torch.no_grad()
def beam_search(model: Seq2SeqModel, src_ids: Sequence[int], cfg: BeamConfig) -> NBestList:
    """
    Beam search with length-normalized hypothesis scores.

    Args:
        model: Translation model
        src_ids: Encoded source sentence (closed with ``</s>`` as in training)
        cfg: Beam size, length-normalization exponent, length limit, n-best size

    Returns:
        Up to ``nbest_k`` finished hypotheses, best first. If none finished
        within the length limit, the best unfinished hypothesis is returned
        and the list is flagged.
    """
    model.eval()
    config = model.config
    src = torch.as_tensor(list(src_ids), dtype=torch.long).unsqueeze(0)
    memory = model.encode(src)
    src_mask = model.source_mask(src)
    max_len = cfg.resolve_max_len(len(src_ids))
    n = cfg.length_norm_exponent
    width = min(cfg.beam_size, config.vocab_size - 1)

    alive: List[Tuple[Tuple[int, ...], float]] = [((), 0.0)]
    finished: List[Hypothesis] = []
    for step in range(1, max_len + 1):
        log_probs = _step_log_probs(model, memory, src_mask, [tokens for tokens, _ in alive])
        # Stable descending sort keeps lower ids first among equal scores.
        values, indices = torch.sort(log_probs, dim=-1, descending=True, stable=True)
        candidates = []
        for row, (tokens, raw) in enumerate(alive):
            for value, token in zip(values[row, :width].tolist(), indices[row, :width].tolist()):
                total = raw + value
                candidates.append((length_normalize(total, step, n), tokens + (token,), total))
        candidates.sort(key=lambda c: (-c[0], c[1]))

        alive = []
        for score, tokens, total in candidates[:cfg.beam_size]:
            if tokens[-1] == config.eos_id:
                finished.append(Hypothesis(tokens, total, score))
            else:
                alive.append((tokens, total))
        if not alive:
            break
        if len(finished) >= cfg.nbest_k:
            finished.sort(key=_rank_key)
            kth = finished[cfg.nbest_k - 1].normalized_score
            if kth > max(_best_reachable(raw, max_len, n) for _, raw in alive):
                break

    if finished:
        finished.sort(key=_rank_key)
        return NBestList(source_id=0, hypotheses=finished[:cfg.nbest_k])

    logger.warning("No hypothesis finished within %d tokens; returning best unfinished", max_len)
    tokens, raw = min(alive, key=lambda a: (-length_normalize(a[1], len(a[0]), n), a[0]))
    return NBestList(
        source_id=0,
        hypotheses=[Hypothesis(tokens, raw, length_normalize(raw, len(tokens), n), finished=False)],
    )


@torch.no_grad()
def greedy_search(model: Seq2SeqModel, src_ids: Sequence[int], max_len: int, n: float = 1.0) -> Hypothesis:
    """Pick the most probable token at every step until ``</s>`` or ``max_len``."""
    model.eval()
    config = model.config
    src = torch.as_tensor(list(src_ids), dtype=torch.long).unsqueeze(0)
    memory = model.encode(src)
    src_mask = model.source_mask(src)
    tokens: Tuple[int, ...] = ()
    raw = 0.0
    for _ in range(max_len):
        log_probs = _step_log_probs(model, memory, src_mask, [tokens])[0]
        token = int(torch.argmax(log_probs))
        raw += log_probs[token].item()
        tokens += (token,)
        if token == config.eos_id:
            break
    finished = bool(tokens) and tokens[-1] == config.eos_id
    return Hypothesis(tokens, raw, length_normalize(raw, len(tokens), n), finished=finished)


def _attach_text(nbest: NBestList, segmenter: BaseSegmenter) -> NBestList:
    for hyp in nbest:
        hyp.text = segmenter.decode(hyp.tokens)
        hyp.repetition = max_repeat_run(hyp.text)
        logger.debug("hyp %d: repetition run %d: %s", nbest.source_id, hyp.repetition, hyp.text)
    return nbest


def translate(
    model: Seq2SeqModel,
    segmenter: BaseSegmenter,
    lines: Sequence[str],
    cfg: BeamConfig,
    show_progress: bool = False,
) -> List[NBestList]:
    """
    Decode source sentences into n-best lists with detokenized text.

    Args:
        model: Translation model
        segmenter: Segmenter shared by the model's source and target side
        lines: Source sentences (already carrying their target-language tag)
        cfg: Beam settings
        show_progress: Display a tqdm progress bar

    Returns:
        One n-best list per line, in input order
    """
    results = []
    for index, line in enumerate(tqdm(lines, desc="decode", disable=not show_progress, leave=False)):
        nbest = beam_search(model, segmenter.encode(line, add_eos=True), cfg)
        nbest.source_id = index
        nbest.source = line
        results.append(_attach_text(nbest, segmenter))
    flagged = sum(1 for nbest in results if nbest.flagged)
    if flagged:
        logger.warning("%d of %d sentences produced no finished hypothesis", flagged, len(results))
    return results


@dataclass
class GridResult:
    length_norm_exponent: float
    beam_size: int
    score: float
    table: List[Dict[str, float]]


MetricFn = Callable[[List[str], List[str]], float]


def grid_search(
    model: Seq2SeqModel,
    segmenter: BaseSegmenter,
    devset: Sequence[Tuple[str, str]],
    n_grid: Sequence[float],
    b_grid: Sequence[int],
    metric: Union[str, MetricFn] = "bleu",
    base_cfg: Optional[BeamConfig] = None,
) -> GridResult:
    """
    Tune the length-normalization exponent and beam size on a dev set.

    Ties go to the smaller beam, then the smaller exponent.

    Args:
        model: Translation model
        segmenter: Model segmenter
        devset: (tagged source, reference) pairs
        n_grid: Exponents to try
        b_grid: Beam sizes to try
        metric: ``"bleu"``, ``"chrf"`` or a callable (hypotheses, references) -> score
        base_cfg: Settings shared by every cell (max length)

    Returns:
        The best cell and the full table, one row per (n, b)
    """
    if not n_grid or not b_grid:
        raise InvalidConfig("grid_search needs nonempty n and b grids")
    if isinstance(metric, str):
        from .metrics import metric_function
        metric = metric_function(metric)
    base_cfg = base_cfg or BeamConfig()
    sources = [src for src, _ in devset]
    references = [ref for _, ref in devset]

    table = []
    for b in b_grid:
        for n in n_grid:
            cell = replace(base_cfg, beam_size=b, length_norm_exponent=n, nbest_k=1)
            hyps = [nbest.best.text for nbest in translate(model, segmenter, sources, cell)]
            score = metric(hyps, references)
            logger.info("grid cell n=%s b=%d: %.4f", n, b, score)
            table.append({"length_norm_exponent": n, "beam_size": b, "score": score})

    best = min(table, key=lambda row: (-row["score"], row["beam_size"], row["length_norm_exponent"]))
    return GridResult(best["length_norm_exponent"], best["beam_size"], best["score"], table)


def rescore(
    nbest: NBestList,
    char_model: Seq2SeqModel,
    char_segmenter: BaseSegmenter,
    cfg: RescoreConfig,
) -> NBestList:
    """
    Re-rank an n-best list with a character-level model.

    Each hypothesis text is re-encoded at character level and scored by
    teacher forcing against the list's source sentence. The final score is
    ``(1 - lam) * original normalized + lam * char score``. Hypotheses the
    character vocabulary cannot encode are dropped with a warning.
    """
    if nbest.source is None:
        raise EncodingFailure(f"n-best list {nbest.source_id} has no source sentence to rescore against")
    if cfg.lam == 0.0:
        hyps = [replace(h, rescore_score=h.normalized_score) for h in nbest]
        return NBestList(nbest.source_id, hyps, nbest.source)

    src_ids = char_segmenter.encode(nbest.source, add_eos=True)
    kept = []
    for hyp in nbest:
        if hyp.text is None or char_segmenter.has_unknown(hyp.text):
            logger.warning(
                "Dropping hypothesis of sentence %d: %s",
                nbest.source_id, EncodingFailure(f"character vocabulary cannot encode {hyp.text!r}"),
            )
            continue
        tgt_ids = char_segmenter.encode(hyp.text)
        char_score = score_hypothesis(char_model, src_ids, tgt_ids)
        if cfg.normalize:
            char_score = length_normalize(char_score, len(tgt_ids) + 1, cfg.exponent)
        kept.append(replace(hyp, rescore_score=(1.0 - cfg.lam) * hyp.normalized_score + cfg.lam * char_score))
    return NBestList(nbest.source_id, kept, nbest.source)


def write_nbest(lists: Iterable[NBestList], path) -> Path:
    """Write ``id ||| text ||| raw ||| normalized[ ||| rescored[ ||| token ids]]`` lines.

    The rescored field is left empty when only token ids follow.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for nbest in lists:
            for hyp in nbest:
                parts = [str(nbest.source_id), hyp.text or "", repr(hyp.raw_logprob), repr(hyp.normalized_score)]
                if hyp.rescore_score is not None or hyp.tokens:
                    parts.append("" if hyp.rescore_score is None else repr(hyp.rescore_score))
                if hyp.tokens:
                    parts.append(" ".join(str(t) for t in hyp.tokens))
                f.write(NBEST_FIELD_SEP.join(parts) + "\n")
    return path


def read_nbest(path) -> List[NBestList]:
    """Read an n-best file; lines without token ids give hypotheses with ``tokens=()``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"N-best file not found: {path}")
    grouped: Dict[int, List[Hypothesis]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            parts = line.rstrip("\n").split(NBEST_FIELD_SEP)
            if len(parts) not in (4, 5, 6):
                raise ValueError(f"{path}:{line_no}: expected 4 to 6 fields, got {len(parts)}")
            rescored = float(parts[4]) if len(parts) >= 5 and parts[4] else None
            tokens = tuple(int(t) for t in parts[5].split()) if len(parts) == 6 else ()
            grouped.setdefault(int(parts[0]), []).append(Hypothesis(
                tokens=tokens, raw_logprob=float(parts[2]), normalized_score=float(parts[3]),
                text=parts[1], repetition=max_repeat_run(parts[1]), rescore_score=rescored,
            ))
    return [NBestList(source_id, hyps) for source_id, hyps in sorted(grouped.items())]
