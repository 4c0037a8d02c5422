"""Explanation generator and label predictor.

The generator is a seq2seq whose encoder input is the embedded task input
with the masked knowledge vectors prepended as virtual positions, so the
explanation (and through it the label) is conditioned on both latent
selection stages. The predictor is a linear-plus-softmax readout over the
mean-pooled decoder states of the explanation: teacher-forced states
during training, states of the sampled explanation at inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .backbone import Decoder, Encoder, ModelConfig, TokenEmbedder, nucleus_sample
from .vocab import EVIDENCE_SEP, Vocab

DEFAULT_NUCLEUS_P = 0.95

VARIANTS = ("rexc", "rexc_plus", "rexc_zs")


@dataclass
class Explanation:
    token_ids: list[int]
    hidden_states: torch.Tensor  # [T, model_dim], one row per token
    mode: str  # teacher_forced | generated

    def __post_init__(self) -> None:
        if self.hidden_states.shape[0] != len(self.token_ids):
            raise ValueError("hidden state count must equal token count")


@dataclass
class Prediction:
    label_distribution: torch.Tensor  # [n_labels]
    predicted_label: int


class ExplainerPredictor(nn.Module):
    def __init__(
        self,
        config: ModelConfig,
        vocab: Vocab,
        n_labels: int,
        embedder: Optional[TokenEmbedder] = None,
    ):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.n_labels = n_labels
        self.embedder = embedder if embedder is not None else TokenEmbedder(config)
        self.encoder = Encoder(config)
        self.decoder = Decoder(config, self.embedder, tie_output=True)
        self.label_head = nn.Linear(config.model_dim, n_labels)

    # -- fusion --------------------------------------------------------------

    def fuse(
        self,
        input_embeddings: torch.Tensor,
        masked_knowledge: torch.Tensor,
        input_mask: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Prepend knowledge vectors as virtual positions: [B, M+N, d]."""
        if masked_knowledge.shape[-1] != input_embeddings.shape[-1]:
            raise ValueError("knowledge vectors must match the embedding width")
        fused = torch.cat([masked_knowledge, input_embeddings], dim=1)
        know_mask = torch.ones(
            masked_knowledge.shape[:2], dtype=torch.bool, device=input_mask.device
        )
        return fused, torch.cat([know_mask, input_mask], dim=1)

    def encode_fused(self, fused: torch.Tensor, fused_mask: torch.Tensor) -> torch.Tensor:
        return self.encoder(fused, fused_mask)

    # -- explanation paths -----------------------------------------------------

    def teacher_forced(
        self,
        memory: torch.Tensor,
        memory_mask: torch.Tensor,
        gold_in: torch.Tensor,
        gold_target: torch.Tensor,
        target_mask: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """States and per-instance mean-per-token NLL for gold explanations.

        `gold_in` is [BOS, y_1..y_T]; `gold_target` is [y_1..y_T, EOS];
        `target_mask` marks real target positions.
        """
        states = self.decoder.states(memory, gold_in, memory_mask)
        logits = self.decoder.output_logits(states)
        nll_tok = torch.nn.functional.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), gold_target.reshape(-1), reduction="none"
        ).view(gold_target.shape)
        fmask = target_mask.to(nll_tok.dtype)
        nll = (nll_tok * fmask).sum(dim=-1) / fmask.sum(dim=-1).clamp(min=1.0)
        return states, nll

    def generate(
        self,
        memory: torch.Tensor,
        memory_mask: torch.Tensor,
        rng: np.random.Generator,
        p: float = DEFAULT_NUCLEUS_P,
        max_length: int = 12,
    ) -> tuple[list[list[int]], torch.Tensor, torch.Tensor]:
        """Nucleus-sampled explanations for a batch of fused encodings.

        Returns token ids per row, padded states [B, T, d], and a state
        mask. The first step never emits the end token, so explanations are
        nonempty.
        """
        b = memory.shape[0]
        eos = self.vocab.eos_id
        prefix = torch.full((b, 1), self.vocab.bos_id, dtype=torch.long)
        finished = [False] * b
        tokens: list[list[int]] = [[] for _ in range(b)]
        states_rows: list[list[torch.Tensor]] = [[] for _ in range(b)]
        for step in range(max_length):
            states = self.decoder.states(memory, prefix, memory_mask)
            last = states[:, -1, :]
            logits = self.decoder.output_logits(last)
            if step == 0:
                logits = logits.clone()
                logits[:, eos] = -math.inf
            dist = torch.softmax(logits, dim=-1)
            next_ids = []
            for i in range(b):
                if finished[i]:
                    next_ids.append(eos)
                    continue
                token = nucleus_sample(dist[i].detach().numpy(), p, rng)
                if token == eos:
                    finished[i] = True
                else:
                    tokens[i].append(token)
                    states_rows[i].append(last[i])
                next_ids.append(token)
            prefix = torch.cat(
                [prefix, torch.tensor(next_ids, dtype=torch.long).unsqueeze(1)], dim=1
            )
            if all(finished):
                break
        t_max = max(len(r) for r in states_rows)
        d = memory.shape[-1]
        padded = torch.zeros(b, t_max, d)
        state_mask = torch.zeros(b, t_max, dtype=torch.bool)
        for i, row in enumerate(states_rows):
            if row:
                padded[i, : len(row)] = torch.stack(row)
                state_mask[i, : len(row)] = True
        return tokens, padded, state_mask

    # -- prediction -------------------------------------------------------------

    def label_logits(self, states: torch.Tensor, state_mask: torch.Tensor) -> torch.Tensor:
        """Mean-pool explanation states, then project to the label space."""
        if states.shape[1] == 0:
            raise ValueError("cannot predict from an empty explanation")
        fmask = state_mask.to(states.dtype).unsqueeze(-1)
        pooled = (states * fmask).sum(dim=1) / fmask.sum(dim=1).clamp(min=1.0)
        return self.label_head(pooled)

    def predict_label(self, explanation: Explanation) -> Prediction:
        if explanation.hidden_states.shape[0] == 0:
            raise ValueError("cannot predict from an empty explanation")
        states = explanation.hidden_states.unsqueeze(0)
        mask = torch.ones(states.shape[:2], dtype=torch.bool)
        dist = torch.softmax(self.label_logits(states, mask), dim=-1)[0]
        return Prediction(label_distribution=dist, predicted_label=int(dist.argmax()))


def surface_output(
    variant: str,
    explanation_tokens: Sequence[str],
    selected_snippet_texts: Sequence[str],
) -> str:
    """Final explanation text for each output surface."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown output variant: {variant!r}")
    nle = " ".join(explanation_tokens)
    evidence = " ; ".join(selected_snippet_texts)
    if variant == "rexc":
        return nle
    if variant == "rexc_plus":
        return f"{nle} {EVIDENCE_SEP} {evidence}" if evidence else nle
    return evidence
