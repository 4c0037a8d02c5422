"""Desk-scale neural substrate: embeddings, encoder, decoder, sampling.

Small pre-LayerNorm self-attention stacks trained from scratch stand in for
large pretrained sequence models. Three independent copies of these pieces
make up the full pipeline (task encoder, knowledge seq2seq, explainer
seq2seq); everything here is mechanism-agnostic plumbing.

Masking convention: boolean attention masks are True at real positions and
False at padding. Content embeddings are looked up *without* positions so
that latent selectors can scale pure token content; positional encodings
are added inside the encoder / decoder stacks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    model_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    max_sequence_length: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        counts = {
            "vocab_size": self.vocab_size,
            "model_dim": self.model_dim,
            "encoder_layers": self.encoder_layers,
            "decoder_layers": self.decoder_layers,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "max_sequence_length": self.max_sequence_length,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.model_dim % self.num_heads != 0:
            raise ValueError("model_dim must be divisible by num_heads")


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    """Classic fixed sin/cos position table, shape [length, dim]."""
    position = torch.arange(length, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim)
    )
    table = torch.zeros(length, dim)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: dim // 2])
    return table


class TokenEmbedder(nn.Module):
    """Content-only embedding lookup (no positions)."""

    def __init__(self, config: ModelConfig, init_std: float = 0.5):
        super().__init__()
        self.config = config
        self.table = nn.Embedding(config.vocab_size, config.model_dim)
        nn.init.normal_(self.table.weight, mean=0.0, std=init_std)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.numel() and int(token_ids.max()) >= self.config.vocab_size:
            raise ValueError("token id outside vocabulary")
        if token_ids.numel() and int(token_ids.min()) < 0:
            raise ValueError("token id outside vocabulary")
        return self.table(token_ids)


class _Block(nn.Module):
    """Pre-LN transformer block; optional cross-attention."""

    def __init__(self, config: ModelConfig, cross: bool):
        super().__init__()
        d = config.model_dim
        self.self_norm = nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, config.num_heads, batch_first=True)
        self.cross_norm = nn.LayerNorm(d) if cross else None
        self.cross_attn = (
            nn.MultiheadAttention(d, config.num_heads, batch_first=True) if cross else None
        )
        self.ffn_norm = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, config.ffn_dim), nn.GELU(), nn.Linear(config.ffn_dim, d)
        )

    def forward(
        self,
        x: torch.Tensor,
        self_key_padding: Optional[torch.Tensor] = None,
        causal: bool = False,
        memory: Optional[torch.Tensor] = None,
        memory_key_padding: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        h = self.self_norm(x)
        attn_mask = None
        if causal:
            t = x.shape[1]
            attn_mask = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
        h, _ = self.self_attn(
            h, h, h, key_padding_mask=self_key_padding, attn_mask=attn_mask, need_weights=False
        )
        x = x + h
        if self.cross_attn is not None and memory is not None:
            h = self.cross_norm(x)
            h, _ = self.cross_attn(
                h, memory, memory, key_padding_mask=memory_key_padding, need_weights=False
            )
            x = x + h
        return x + self.ffn(self.ffn_norm(x))


class Encoder(nn.Module):
    """Bidirectional contextualizer. Output shape equals input shape."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.register_buffer(
            "positions", sinusoidal_positions(config.max_sequence_length, config.model_dim)
        )
        self.blocks = nn.ModuleList(_Block(config, cross=False) for _ in range(config.encoder_layers))
        self.out_norm = nn.LayerNorm(config.model_dim)

    def forward(self, embedded: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        # embedded: [B, N, d]; mask: [B, N] bool, True at real positions.
        n = embedded.shape[1]
        if n > self.config.max_sequence_length:
            raise ValueError(f"sequence of length {n} exceeds max_sequence_length")
        if n == 0:
            return embedded
        x = embedded + self.positions[:n]
        key_padding = None if mask is None else ~mask
        for block in self.blocks:
            x = block(x, self_key_padding=key_padding)
        return self.out_norm(x)


class Decoder(nn.Module):
    """Autoregressive decoder with cross-attention over encoder output.

    With `tie_output` the output projection reuses the embedding table
    (plus a trainable bias), keeping decoder states and token content in
    one vector basis; components that read each other's states rely on
    that alignment.
    """

    def __init__(self, config: ModelConfig, embedder: TokenEmbedder, tie_output: bool = False):
        super().__init__()
        self.config = config
        self.embedder = embedder
        self.register_buffer(
            "positions", sinusoidal_positions(config.max_sequence_length, config.model_dim)
        )
        self.blocks = nn.ModuleList(_Block(config, cross=True) for _ in range(config.decoder_layers))
        self.out_norm = nn.LayerNorm(config.model_dim)
        if tie_output:
            self.lm_head = None
            self.lm_bias = nn.Parameter(torch.zeros(config.vocab_size))
        else:
            self.lm_head = nn.Linear(config.model_dim, config.vocab_size)
            self.lm_bias = None

    def output_logits(self, states: torch.Tensor) -> torch.Tensor:
        if self.lm_head is not None:
            return self.lm_head(states)
        return torch.nn.functional.linear(states, self.embedder.table.weight, self.lm_bias)

    def states(
        self,
        memory: torch.Tensor,
        prefix_ids: torch.Tensor,
        memory_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Hidden states for every prefix position, [B, T, d]."""
        t = prefix_ids.shape[1]
        if t >= self.config.max_sequence_length + 1:
            raise ValueError("decoder prefix exceeds max_sequence_length")
        x = self.embedder(prefix_ids) + self.positions[:t]
        memory_key_padding = None if memory_mask is None else ~memory_mask
        for block in self.blocks:
            x = block(
                x,
                causal=True,
                memory=memory,
                memory_key_padding=memory_key_padding,
            )
        return self.out_norm(x)

    def logits(
        self,
        memory: torch.Tensor,
        prefix_ids: torch.Tensor,
        memory_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        return self.output_logits(self.states(memory, prefix_ids, memory_mask))

    def next_distribution(
        self,
        memory: torch.Tensor,
        prefix_ids: torch.Tensor,
        memory_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Distribution over the next token given the prefix, [B, vocab]."""
        logits = self.logits(memory, prefix_ids, memory_mask)[:, -1, :]
        return torch.softmax(logits, dim=-1)


def nucleus_sample(dist: np.ndarray, p: float, rng: np.random.Generator) -> int:
    """Sample from the smallest descending-probability prefix with mass >= p.

    The retained candidates are renormalized before drawing.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"nucleus threshold must be in (0, 1], got {p}")
    probs = np.asarray(dist, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    cutoff = int(np.searchsorted(csum, p)) + 1
    keep = order[:cutoff]
    kept = probs[keep]
    kept = kept / kept.sum()
    return int(rng.choice(keep, p=kept))


def save_checkpoint(path: Path | str, config: ModelConfig, payload: dict) -> None:
    """Self-describing parameter dump with a config header."""
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": asdict(config),
            "payload": payload,
        },
        str(path),
    )


def load_checkpoint(path: Path | str) -> tuple[ModelConfig, dict]:
    blob = torch.load(str(path), map_location="cpu", weights_only=False)
    version = blob.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version: {version}")
    return ModelConfig(**blob["config"]), blob["payload"]


def parameter_checksum(module: nn.Module) -> float:
    """Cheap content fingerprint used by frozen-parameter contracts."""
    total = 0.0
    for name, p in sorted(module.state_dict().items()):
        total += float(p.to(torch.float64).abs().sum())
    return total
