"""Transformer encoder-decoder with presets, depth-scaled init and hypothesis scoring."""

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfig, LengthMismatch, ShapeMismatch
from .segment import BOS, EOS, PAD

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

PRESETS = {
    "base": dict(d_model=128, n_heads=4, ffn_dim=512, enc_layers=6, dec_layers=6, depth_scaled_init=False),
    "big": dict(d_model=256, n_heads=8, ffn_dim=1024, enc_layers=6, dec_layers=6, depth_scaled_init=False),
    "bigger": dict(d_model=256, n_heads=8, ffn_dim=1024, enc_layers=12, dec_layers=6, depth_scaled_init=True),
}

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    ffn_dim: int = 512
    enc_layers: int = 6
    dec_layers: int = 6
    dropout: float = 0.1
    preset: str = "base"
    depth_scaled_init: bool = False
    tie_embeddings: bool = True
    max_positions: int = 512
    pad_id: int = PAD
    bos_id: int = BOS
    eos_id: int = EOS
    seed: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_preset(cls, preset: str, vocab_size: int, **overrides) -> "ModelConfig":
        """Build a config from a named preset; explicit fields win."""
        if preset not in PRESETS:
            raise InvalidConfig(f"Unknown model preset: {preset} (choose from {sorted(PRESETS)})")
        values = dict(PRESETS[preset])
        values.update(overrides)
        return cls(vocab_size=vocab_size, preset=preset, **values)

    @classmethod
    def from_dict(cls, config: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(config) - known
        if unknown:
            raise InvalidConfig(f"Unknown model options: {sorted(unknown)}")
        config = dict(config)
        preset = config.pop("preset", "base")
        vocab_size = config.pop("vocab_size", None)
        if vocab_size is None:
            raise InvalidConfig("Model config needs vocab_size")
        return cls.from_preset(preset, vocab_size, **config)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        if self.preset not in PRESETS:
            raise InvalidConfig(f"Unknown model preset: {self.preset}")
        for name in ("vocab_size", "d_model", "n_heads", "ffn_dim", "enc_layers", "dec_layers", "max_positions"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise InvalidConfig(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.preset == "bigger" and self.enc_layers != 2 * self.dec_layers:
            raise InvalidConfig(
                f"bigger preset needs enc_layers = 2 * dec_layers, got {self.enc_layers}/{self.dec_layers}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in _DTYPES:
            raise InvalidConfig(f"dtype must be one of {sorted(_DTYPES)}")
        for name in ("pad_id", "bos_id", "eos_id"):
            if not 0 <= getattr(self, name) < self.vocab_size:
                raise InvalidConfig(f"{name} outside vocabulary of size {self.vocab_size}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]


def depth_scale(layer: int) -> float:
    """Residual-branch init multiplier for 1-based layer index."""
    return 1.0 / math.sqrt(layer)


def sinusoidal_positions(max_len: int, d_model: int) -> torch.Tensor:
    position = torch.arange(max_len, dtype=torch.float64).unsqueeze(1)
    div_term = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * -(math.log(10000.0) / d_model))
    table = torch.zeros(max_len, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div_term)
    table[:, 1::2] = torch.cos(position * div_term)[:, : d_model // 2]
    return table


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.view(batch, length, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query, key, value, mask: torch.Tensor) -> torch.Tensor:
        # mask: bool, broadcastable to (batch, heads, q_len, k_len), True = attend
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~mask, torch.finfo(scores.dtype).min)
        # Rows with no visible key get zero weight instead of a uniform spread.
        weights = torch.softmax(scores, dim=-1) * mask
        context = self.dropout(weights) @ v
        batch, _, length, _ = context.shape
        return self.out_proj(context.transpose(1, 2).reshape(batch, length, -1))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(config.d_model, config.n_heads, config.dropout)
        self.ffn = FeedForward(config.d_model, config.ffn_dim, config.dropout)
        self.norm1 = nn.LayerNorm(config.d_model)
        self.norm2 = nn.LayerNorm(config.d_model)
        self.dropout = nn.Dropout(config.dropout)

    def residual_outputs(self):
        return [self.self_attn.out_proj, self.ffn.fc2]

    def forward(self, x, mask):
        x = self.norm1(x + self.dropout(self.self_attn(x, x, x, mask)))
        return self.norm2(x + self.dropout(self.ffn(x)))


class DecoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(config.d_model, config.n_heads, config.dropout)
        self.cross_attn = MultiHeadAttention(config.d_model, config.n_heads, config.dropout)
        self.ffn = FeedForward(config.d_model, config.ffn_dim, config.dropout)
        self.norm1 = nn.LayerNorm(config.d_model)
        self.norm2 = nn.LayerNorm(config.d_model)
        self.norm3 = nn.LayerNorm(config.d_model)
        self.dropout = nn.Dropout(config.dropout)

    def residual_outputs(self):
        return [self.self_attn.out_proj, self.cross_attn.out_proj, self.ffn.fc2]

    def forward(self, x, memory, self_mask, cross_mask):
        x = self.norm1(x + self.dropout(self.self_attn(x, x, x, self_mask)))
        x = self.norm2(x + self.dropout(self.cross_attn(x, memory, memory, cross_mask)))
        return self.norm3(x + self.dropout(self.ffn(x)))


class Seq2SeqModel(nn.Module):
    """Post-norm transformer with a shared source/target embedding table."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Embedding(config.vocab_size, config.d_model)
        self.encoder_layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.enc_layers))
        self.decoder_layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.dec_layers))
        self.output = None if config.tie_embeddings else nn.Linear(config.d_model, config.vocab_size, bias=False)
        self.dropout = nn.Dropout(config.dropout)
        self.register_buffer(
            "positions", sinusoidal_positions(config.max_positions, config.d_model), persistent=False
        )

    def reset_parameters(self):
        """Scaled-uniform init; with depth scaling, residual outputs of layer l get 1/sqrt(l)."""
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        nn.init.xavier_uniform_(self.embed.weight)
        if self.config.depth_scaled_init:
            with torch.no_grad():
                for layers in (self.encoder_layers, self.decoder_layers):
                    for index, layer in enumerate(layers, 1):
                        for linear in layer.residual_outputs():
                            linear.weight.mul_(depth_scale(index))

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        length = ids.shape[1]
        if length > self.config.max_positions:
            raise ShapeMismatch(f"Sequence length {length} exceeds max_positions {self.config.max_positions}")
        x = self.embed(ids) * math.sqrt(self.config.d_model)
        return self.dropout(x + self.positions[:length].to(x.dtype))

    def _check_ids(self, ids: torch.Tensor, name: str):
        if ids.dim() != 2:
            raise ShapeMismatch(f"{name} must be (batch, length), got shape {tuple(ids.shape)}")
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ShapeMismatch(f"{name} contains ids outside vocabulary of size {self.config.vocab_size}")

    def source_mask(self, src: torch.Tensor) -> torch.Tensor:
        return (src != self.config.pad_id)[:, None, None, :]

    def encode(self, src: torch.Tensor) -> torch.Tensor:
        self._check_ids(src, "source")
        mask = self.source_mask(src)
        x = self._embed(src)
        for layer in self.encoder_layers:
            x = layer(x, mask)
        return x

    def decode(self, tgt_prefix: torch.Tensor, memory: torch.Tensor, src_mask: torch.Tensor) -> torch.Tensor:
        self._check_ids(tgt_prefix, "target prefix")
        if tgt_prefix.shape[0] != memory.shape[0]:
            raise ShapeMismatch(f"Batch sizes differ: target {tgt_prefix.shape[0]}, source {memory.shape[0]}")
        length = tgt_prefix.shape[1]
        causal = torch.ones(length, length, dtype=torch.bool, device=tgt_prefix.device).tril()
        x = self._embed(tgt_prefix)
        for layer in self.decoder_layers:
            x = layer(x, memory, causal[None, None], src_mask)
        if self.output is None:
            return x @ self.embed.weight.t()
        return self.output(x)

    def forward(self, src: torch.Tensor, tgt_prefix: torch.Tensor) -> torch.Tensor:
        """Logits of shape (batch, prefix length, vocab)."""
        memory = self.encode(src)
        return self.decode(tgt_prefix, memory, self.source_mask(src))


def init_model(config: ModelConfig) -> Seq2SeqModel:
    """Create a model with weights drawn deterministically from ``config.seed``."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = Seq2SeqModel(config)
        model.reset_parameters()
    return model.to(config.torch_dtype)


def _as_batch(ids) -> torch.Tensor:
    tensor = torch.as_tensor(ids, dtype=torch.long)
    return tensor.unsqueeze(0) if tensor.dim() == 1 else tensor


def forward(model: Seq2SeqModel, src_ids, tgt_prefix_ids) -> torch.Tensor:
    """Logits of one sentence pair: shape (prefix length, vocab)."""
    return model(_as_batch(src_ids), _as_batch(tgt_prefix_ids))[0]


def loss(logits: torch.Tensor, reference: torch.Tensor, label_smoothing: float = 0.0, pad_id: int = PAD) -> torch.Tensor:
    """Mean token-level label-smoothed cross-entropy, ignoring padding."""
    reference = torch.as_tensor(reference, dtype=torch.long)
    if tuple(logits.shape[:-1]) != tuple(reference.shape):
        raise LengthMismatch(f"Logits {tuple(logits.shape[:-1])} and reference {tuple(reference.shape)} differ")
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        reference.reshape(-1),
        ignore_index=pad_id,
        label_smoothing=label_smoothing,
    )


def teacher_forcing_inputs(tgt_ids: Sequence[int], config: ModelConfig):
    """Decoder input (``<s>`` + target) and output (target + ``</s>``) for a raw target."""
    tgt = list(tgt_ids)
    if not tgt or tgt[-1] != config.eos_id:
        tgt = tgt + [config.eos_id]
    return [config.bos_id] + tgt[:-1], tgt


@torch.no_grad()
def score_hypothesis(model: Seq2SeqModel, src_ids, tgt_ids) -> float:
    """Sum of token log-probabilities of ``tgt_ids`` (closed with ``</s>``) under teacher forcing."""
    was_training = model.training
    model.eval()
    prefix, output = teacher_forcing_inputs(tgt_ids, model.config)
    logits = forward(model, src_ids, prefix)
    log_probs = torch.log_softmax(logits.to(torch.float64), dim=-1)
    score = log_probs.gather(1, torch.tensor(output).unsqueeze(1)).sum().item()
    model.train(was_training)
    return score


def transfer_embeddings(model: Seq2SeqModel, row_map: Mapping[int, Optional[int]]) -> Seq2SeqModel:
    """
    Copy a model onto a new vocabulary.

    Args:
        model: Trained model
        row_map: New token id -> old embedding row, or None for fresh init

    Returns:
        Model over the new vocabulary with every non-embedding weight copied
    """
    new_size = len(row_map)
    config = ModelConfig(**{**model.config.to_dict(), "vocab_size": new_size})
    new_model = init_model(config)
    old_state = model.state_dict()
    new_state = new_model.state_dict()
    for name, tensor in old_state.items():
        if name in ("embed.weight", "output.weight"):
            continue
        new_state[name] = tensor.clone()
    with torch.no_grad():
        for new_id, old_id in row_map.items():
            if old_id is None:
                continue
            new_state["embed.weight"][new_id] = old_state["embed.weight"][old_id]
            if "output.weight" in old_state:
                new_state["output.weight"][new_id] = old_state["output.weight"][old_id]
    new_model.load_state_dict(new_state)
    return new_model


def params_digest(model: Seq2SeqModel) -> str:
    """SHA-256 over parameter names and raw bytes in sorted-name order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(model: Seq2SeqModel, path, stage: Optional[str] = None, step: int = 0,
                    optimizer_state: Optional[Dict] = None) -> Path:
    """Write a versioned checkpoint with the model config embedded."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "stage": stage,
        "step": step,
        "optimizer": optimizer_state,
    }, path)
    return path


def load_checkpoint(path):
    """Read a checkpoint; returns (model, metadata)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    data = torch.load(path, map_location="cpu", weights_only=False)
    if data.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported checkpoint version in {path}: {data.get('format_version')}")
    config = ModelConfig(**data["config"])
    model = Seq2SeqModel(config).to(config.torch_dtype)
    model.load_state_dict(data["state_dict"])
    meta = {k: data[k] for k in ("stage", "step", "optimizer")}
    return model, meta
