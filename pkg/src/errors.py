"""Exceptions raised across the toolkit."""


class LoresmtError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(LoresmtError, ValueError):
    """Invalid or inconsistent configuration."""


class StageError(LoresmtError, RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# corpus

class AlreadyTagged(LoresmtError, ValueError):
    pass


class UntaggedPair(LoresmtError, ValueError):
    pass


class EmptyCorpus(LoresmtError, ValueError):
    pass


class DirectionMismatch(LoresmtError, ValueError):
    pass


class G2PLanguageMismatch(LoresmtError, ValueError):
    pass


class SepCollision(LoresmtError, ValueError):
    pass


class EmptyPhonemization(LoresmtError, ValueError):
    """A source phonemized to nothing (deletion rules only)."""


# g2p

class ParseError(LoresmtError, ValueError):
    """Malformed rule file line."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


# subword

class VocabTooSmall(LoresmtError, ValueError):
    pass


class UnknownId(LoresmtError, KeyError):
    pass


# model

class InvalidConfig(ConfigError):
    pass


class ShapeMismatch(LoresmtError, ValueError):
    pass


class LengthMismatch(LoresmtError, ValueError):
    pass


class DivergedLoss(LoresmtError, RuntimeError):
    """Loss became NaN/inf; a checkpoint was written before aborting."""

    def __init__(self, step: int, checkpoint_path: str):
        super().__init__(f"loss diverged at step {step}; checkpoint saved to {checkpoint_path}")
        self.step = step
        self.checkpoint_path = checkpoint_path


# decode

class ZeroLength(LoresmtError, ValueError):
    pass


class EncodingFailure(LoresmtError, ValueError):
    pass


# pipeline

class MissingMetric(LoresmtError, KeyError):
    pass
