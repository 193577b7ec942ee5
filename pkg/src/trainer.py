"""Staged training: pre-training followed by fine-tuning stages."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import torch
from tqdm import tqdm

from .errors import DivergedLoss, InvalidConfig
from .model import Seq2SeqModel, loss, save_checkpoint, teacher_forcing_inputs

logger = logging.getLogger(__name__)

EncodedPair = Tuple[List[int], List[int]]

STAGE_KINDS = ("pretrain", "finetune")


@dataclass
class Stage:
    name: str
    corpus: str
    kind: str = "pretrain"
    max_steps: int = 1000
    lr: float = 5e-4
    warmup_steps: int = 100
    batch_size: int = 32
    label_smoothing: float = 0.1
    reset_optimizer: bool = False
    lr_scale: Optional[float] = None

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise InvalidConfig(f"Stage '{self.name}': kind must be one of {STAGE_KINDS}")
        if self.max_steps < 0 or self.batch_size < 1 or self.warmup_steps < 0 or self.lr <= 0:
            raise InvalidConfig(f"Stage '{self.name}': invalid step/batch/lr settings")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise InvalidConfig(f"Stage '{self.name}': label_smoothing must be in [0, 1)")
        if self.lr_scale is None:
            # Fine-tuning continues from the previous stage with a reduced rate.
            self.lr_scale = 0.5 if self.kind == "finetune" else 1.0

    @property
    def peak_lr(self) -> float:
        return self.lr * self.lr_scale


@dataclass
class TrainPlan:
    stages: List[Stage] = field(default_factory=list)
    seed: int = 1
    init_checkpoint: Optional[str] = None

    def __post_init__(self):
        if not self.stages:
            raise InvalidConfig("Train plan needs at least one stage")
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise InvalidConfig(f"Stage names must be unique: {names}")
        if self.stages[0].kind == "finetune" and self.init_checkpoint is None:
            raise InvalidConfig("A plan starting with a finetune stage needs init_checkpoint")

    @classmethod
    def from_dict(cls, config: dict, seed: int = 1) -> "TrainPlan":
        stage_fields = {f.name for f in fields(Stage)}
        stages = []
        for raw in config.get("stages", []):
            unknown = set(raw) - stage_fields
            if unknown:
                raise InvalidConfig(f"Unknown stage options: {sorted(unknown)}")
            stages.append(Stage(**raw))
        return cls(stages=stages, seed=config.get("seed", seed), init_checkpoint=config.get("init_checkpoint"))

    def to_dict(self) -> dict:
        return asdict(self)


def inverse_sqrt_schedule(step: int, warmup_steps: int) -> float:
    """LR multiplier: linear warmup, then decay with 1/sqrt(step)."""
    step = max(step, 1)
    if warmup_steps == 0:
        return 1.0 / math.sqrt(step)
    return min(step / warmup_steps, math.sqrt(warmup_steps / step))


def make_batch(pairs: Sequence[EncodedPair], model: Seq2SeqModel):
    """Pad a list of encoded pairs into (src, decoder input, decoder output) tensors."""
    config = model.config
    limit = config.max_positions
    sources, inputs, outputs = [], [], []
    for src, tgt in pairs:
        src = list(src)
        if not src or src[-1] != config.eos_id:
            src = src + [config.eos_id]
        dec_in, dec_out = teacher_forcing_inputs(tgt, config)
        sources.append(src[:limit])
        inputs.append(dec_in[:limit])
        outputs.append(dec_out[:limit])

    def pad(rows):
        width = max(len(r) for r in rows)
        return torch.tensor([r + [config.pad_id] * (width - len(r)) for r in rows], dtype=torch.long)

    return pad(sources), pad(inputs), pad(outputs)


@torch.no_grad()
def token_accuracy(model: Seq2SeqModel, pairs: Sequence[EncodedPair], batch_size: int = 64) -> float:
    """Teacher-forced per-token accuracy over non-pad positions."""
    was_training = model.training
    model.eval()
    correct = total = 0
    for start in range(0, len(pairs), batch_size):
        src, dec_in, dec_out = make_batch(pairs[start:start + batch_size], model)
        predicted = model(src, dec_in).argmax(-1)
        keep = dec_out != model.config.pad_id
        correct += (predicted.eq(dec_out) & keep).sum().item()
        total += keep.sum().item()
    model.train(was_training)
    return correct / max(total, 1)


@dataclass
class TrainResult:
    model: Seq2SeqModel
    log: List[dict]
    checkpoints: Dict[str, Path]


class Trainer:
    """Run a TrainPlan stage by stage on encoded corpora."""

    def __init__(self, plan: TrainPlan, output_dir, show_progress: bool = True):
        """
        Initialize the trainer.

        Args:
            plan: Stages to run in order
            output_dir: Directory for checkpoints and the metrics log
            show_progress: Display a tqdm progress bar per stage
        """
        self.plan = plan
        self.output_dir = Path(output_dir)
        self.show_progress = show_progress
        self.metrics_path = self.output_dir / "metrics.jsonl"

    def train(self, model: Seq2SeqModel, corpora: Mapping[str, Sequence[EncodedPair]]) -> TrainResult:
        """
        Train the model through every stage of the plan.

        Args:
            model: Initialized (or pre-trained) model; updated in place
            corpora: Encoded corpora referenced by the stages' ``corpus`` field

        Returns:
            The trained model, the metrics log and per-stage checkpoint paths
        """
        for stage in self.plan.stages:
            if stage.corpus not in corpora:
                raise InvalidConfig(f"Stage '{stage.name}' refers to unknown corpus '{stage.corpus}'")
            if stage.max_steps > 0 and not corpora[stage.corpus]:
                raise InvalidConfig(f"Stage '{stage.name}' has an empty corpus '{stage.corpus}'")

        self.output_dir.mkdir(parents=True, exist_ok=True)
        was_deterministic = torch.are_deterministic_algorithms_enabled()
        num_threads = torch.get_num_threads()
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
        try:
            log, checkpoints = self._run_plan(model, corpora)
        finally:
            torch.use_deterministic_algorithms(was_deterministic)
            torch.set_num_threads(num_threads)
        model.eval()
        return TrainResult(model, log, checkpoints)

    def _run_plan(self, model, corpora):
        log: List[dict] = []
        checkpoints: Dict[str, Path] = {}
        optimizer = None
        with open(self.metrics_path, "w", encoding="utf-8") as metrics_file:
            for index, stage in enumerate(self.plan.stages):
                if optimizer is None or stage.reset_optimizer:
                    optimizer = torch.optim.Adam(model.parameters(), lr=stage.peak_lr, betas=(0.9, 0.98), eps=1e-9)
                entries = self._run_stage(model, optimizer, stage, index, corpora[stage.corpus], metrics_file)
                log.extend(entries)
                checkpoints[stage.name] = save_checkpoint(
                    model,
                    self.output_dir / "checkpoints" / f"{stage.name}.pt",
                    stage=stage.name,
                    step=stage.max_steps,
                )
                logger.info("Stage '%s' finished; checkpoint %s", stage.name, checkpoints[stage.name])
        return log, checkpoints

    def _run_stage(self, model, optimizer, stage: Stage, index: int, pairs, metrics_file) -> List[dict]:
        torch.manual_seed(self.plan.seed + index)
        generator = torch.Generator().manual_seed(self.plan.seed * 1000 + index)
        for group in optimizer.param_groups:
            group["lr"] = stage.peak_lr
            group["initial_lr"] = stage.peak_lr
        scheduler = torch.optim.lr_scheduler.LambdaLR(
            optimizer, lambda step: inverse_sqrt_schedule(step + 1, stage.warmup_steps)
        )

        model.train()
        entries = []
        order: List[int] = []
        progress = tqdm(range(1, stage.max_steps + 1), desc=stage.name, disable=not self.show_progress, leave=False)
        for step in progress:
            while len(order) < stage.batch_size:
                order.extend(torch.randperm(len(pairs), generator=generator).tolist())
            batch_ids, order = order[:stage.batch_size], order[stage.batch_size:]
            src, dec_in, dec_out = make_batch([pairs[i] for i in batch_ids], model)

            lr = optimizer.param_groups[0]["lr"]
            optimizer.zero_grad()
            value = loss(model(src, dec_in), dec_out, stage.label_smoothing, pad_id=model.config.pad_id)
            if not torch.isfinite(value):
                path = save_checkpoint(
                    model, self.output_dir / "checkpoints" / f"{stage.name}.diverged.pt", stage=stage.name, step=step
                )
                raise DivergedLoss(step, str(path))
            value.backward()
            optimizer.step()
            scheduler.step()

            entry = {"step": step, "stage": stage.name, "loss": value.item(), "lr": lr}
            entries.append(entry)
            metrics_file.write(json.dumps(entry) + "\n")
            if step % 50 == 0:
                progress.set_postfix(loss=f"{entry['loss']:.3f}")
        return entries
