"""Language codes and the tags derived from them."""

import re
from dataclasses import dataclass
from typing import Optional

PHONEME_TASK_SUFFIX = "p"

_LANG_RE = re.compile(r"^[a-z0-9]+(?:_[a-z0-9]+)*$")


@dataclass(frozen=True, order=True)
class LangCode:
    """Language identifier, optionally marking the phonemization task (``ca_p``)."""

    base: str
    task_suffix: Optional[str] = None

    def __post_init__(self):
        if not self.base or not _LANG_RE.match(self.base) or self.base.endswith("_" + PHONEME_TASK_SUFFIX):
            raise ValueError(f"Invalid language code: {self.base!r}")
        if self.task_suffix not in (None, PHONEME_TASK_SUFFIX):
            raise ValueError(f"Unknown task suffix: {self.task_suffix!r}")

    @classmethod
    def parse(cls, code) -> "LangCode":
        if isinstance(code, LangCode):
            return code
        code = str(code).strip()
        suffix = "_" + PHONEME_TASK_SUFFIX
        if code.endswith(suffix) and len(code) > len(suffix):
            return cls(code[: -len(suffix)], PHONEME_TASK_SUFFIX)
        return cls(code)

    @property
    def code(self) -> str:
        if self.task_suffix:
            return f"{self.base}_{self.task_suffix}"
        return self.base

    @property
    def is_task(self) -> bool:
        return self.task_suffix is not None

    @property
    def tag(self) -> str:
        return f"<{self.code}>"

    def phoneme_task(self) -> "LangCode":
        return LangCode(self.base, PHONEME_TASK_SUFFIX)

    def __str__(self) -> str:
        return self.code
