"""Generative knowledge module: a frozen seq2seq over planted triples.

The model maps a soft content query (entity embeddings, possibly scaled by
selector values, others zeroed) plus a relation control token to a decoded
snippet: the licensing head followed by its tail. Pretraining draws
queries from the distribution the selector pipeline will actually produce:
the head entity placed among zero-content positions, optionally
accompanied by its tail, a distractor entity, or the full paired shape the
task emits. Supervising the head token forces the decoder to resolve which
visible entity the relation binds to, so the snippet hidden states carry
the binding downstream consumers need.

After pretraining the parameters are frozen. Queries remain differentiable
with respect to the query content, so selector gradients flow through the
module while its own weights never change. Generation is greedy; decoded
tokens exist for reporting and surfacing, while the per-relation snippet
hidden vector (mean of the decoder states that produced the tokens) is the
representation consumed downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .backbone import (
    Decoder,
    Encoder,
    ModelConfig,
    TokenEmbedder,
    load_checkpoint,
    save_checkpoint,
)
from .synthdata import Triple
from .vocab import Vocab


@dataclass(frozen=True)
class KnowledgeSnippet:
    relation: str
    hidden: torch.Tensor  # [model_dim]
    decoded_tokens: list[str]

    def text(self) -> str:
        return " ".join([self.relation, *self.decoded_tokens])


@dataclass(frozen=True)
class PretrainSettings:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 2e-3
    weight_decay: float = 0.01
    examples_per_triple: int = 6
    max_extra_padding: int = 4
    max_tail_length: int = 1
    scale_jitter: float = 0.4  # soft-query emulation: content scales in [1-j, 1]
    seed: int = 0

    @property
    def max_decode_length(self) -> int:
        # head token followed by the tail tokens
        return 1 + self.max_tail_length


class KnowledgeModel(nn.Module):
    def __init__(self, config: ModelConfig, vocab: Vocab, relations: Sequence[str]):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.relations = tuple(relations)
        self.embedder = TokenEmbedder(config)
        self.encoder = Encoder(config)
        self.decoder = Decoder(config, self.embedder, tie_output=True)
        self.frozen = False

    # -- content access ----------------------------------------------------

    def embed_tokens(self, token_ids: torch.Tensor) -> torch.Tensor:
        """Content embeddings from this module's own table (no positions)."""
        return self.embedder(token_ids)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True

    # -- querying ------------------------------------------------------------

    def encode_query(
        self, content: torch.Tensor, mask: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        return self.encoder(content, mask)

    def generate_snippets(
        self,
        masked_content: torch.Tensor,
        mask: torch.Tensor,
        max_decode_length: int = 3,
    ) -> tuple[torch.Tensor, list[list[list[int]]]]:
        """One snippet per relation for each query row.

        Returns hidden vectors [B, M, d] (differentiable in the query
        content) and decoded token ids, outer list over batch, inner over
        relations. The first decode step may not emit the end token, so
        every snippet decodes at least one token.
        """
        if not self.relations:
            raise ValueError("no relation tags to generate snippets for")
        b, _, d = masked_content.shape
        m = len(self.relations)
        memory = self.encode_query(masked_content, mask)
        memory = memory.repeat_interleave(m, dim=0)  # [B*M, N, d]
        mem_mask = mask.repeat_interleave(m, dim=0)

        rel_ids = torch.tensor(
            [self.vocab.relation_id(r) for r in self.relations], dtype=torch.long
        )
        prefix = torch.stack(
            [
                torch.full((b * m,), self.vocab.bos_id, dtype=torch.long),
                rel_ids.repeat(b),
            ],
            dim=1,
        )  # [B*M, 2]

        eos = self.vocab.eos_id
        finished = torch.zeros(b * m, dtype=torch.bool)
        collected: list[torch.Tensor] = []
        collected_mask: list[torch.Tensor] = []
        tokens: list[list[int]] = [[] for _ in range(b * m)]
        for step in range(max_decode_length):
            states = self.decoder.states(memory, prefix, mem_mask)
            last = states[:, -1, :]
            logits = self.decoder.output_logits(last)
            if step == 0:
                logits = logits.clone()
                logits[:, eos] = -math.inf
            nxt = logits.argmax(dim=-1)
            nxt = torch.where(finished, torch.full_like(nxt, eos), nxt)
            emitted = ~finished & (nxt != eos)
            collected.append(last)
            collected_mask.append(emitted)
            for i in range(b * m):
                if emitted[i]:
                    tokens[i].append(int(nxt[i]))
            finished |= nxt == eos
            prefix = torch.cat([prefix, nxt.unsqueeze(1)], dim=1)
            if bool(finished.all()):
                break

        stacked = torch.stack(collected, dim=1)  # [B*M, S, d]
        weights = torch.stack(collected_mask, dim=1).to(stacked.dtype)
        denom = weights.sum(dim=1, keepdim=True).clamp(min=1.0)
        hidden = (stacked * weights.unsqueeze(-1)).sum(dim=1) / denom
        decoded = [[tokens[i * m + j] for j in range(m)] for i in range(b)]
        return hidden.view(b, m, d), decoded

    def decode_snippet(
        self, query_tokens: Sequence[str], relation: str, max_decode_length: int = 3
    ) -> list[str]:
        """Greedy decode for a plain token query: [licensing head, tail]."""
        ids = torch.tensor([self.vocab.encode(list(query_tokens))], dtype=torch.long)
        mask = torch.ones_like(ids, dtype=torch.bool)
        content = self.embed_tokens(ids)
        rel_index = self.relations.index(relation)
        with torch.no_grad():
            _, decoded = self.generate_snippets(content, mask, max_decode_length)
        return self.vocab.decode(decoded[0][rel_index])

    def snippets_for(
        self, decoded_ids: list[list[int]], hidden: torch.Tensor
    ) -> list[KnowledgeSnippet]:
        """Materialize typed snippets for one batch row."""
        return [
            KnowledgeSnippet(
                relation=rel,
                hidden=hidden[j].detach(),
                decoded_tokens=self.vocab.decode(decoded_ids[j]),
            )
            for j, rel in enumerate(self.relations)
        ]


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


def _build_examples(
    triples: Sequence[Triple],
    entities: list[str],
    settings: PretrainSettings,
    rng: np.random.Generator,
    triple_set: Optional[set[tuple[str, str, str]]] = None,
) -> list[tuple[list[str], list[int], str, list[str]]]:
    """(slot tokens, content positions, relation, target tokens) per example.

    The decode target is the licensing head followed by its tail, so the
    model is directly supervised to resolve which visible entity the triple
    binds to. Query styles per triple: the bare head (lookup), head with
    its tail visible (bind and copy), those two plus a distractor entity
    from outside the head's neighborhood, and the paired shape the
    downstream selector produces (head, tail, distractor, tail again).
    Content positions are scattered among zero-content padding slots.
    """
    examples = []
    # Binding-heavy mix: the paired shape dominates because it is the query
    # distribution the selector pipeline actually produces.
    styles = ("pair", "head+tail+distractor", "head+tail", "head", "pair", "head+tail+distractor")
    for triple in triples:
        for k in range(settings.examples_per_triple):
            style = styles[k % len(styles)]
            bag = [triple.head]
            if style != "head":
                bag.append(triple.tail)
            if style in ("head+tail+distractor", "pair"):
                distractor = None
                for _ in range(8):  # avoid distractors that also license the tail
                    cand = entities[int(rng.integers(len(entities)))]
                    if cand != triple.head and (
                        triple_set is None
                        or (cand, triple.relation, triple.tail) not in triple_set
                    ):
                        distractor = cand
                        break
                if distractor is not None:
                    bag.append(distractor)
                if style == "pair":
                    bag.append(triple.tail)
            rng.shuffle(bag)
            length = len(bag) + int(rng.integers(0, settings.max_extra_padding + 1))
            slots = ["<pad>"] * length
            positions = rng.choice(length, size=len(bag), replace=False)
            for pos, tok in zip(positions, bag):
                slots[int(pos)] = tok
            examples.append(
                (
                    slots,
                    sorted(int(p) for p in positions),
                    triple.relation,
                    [triple.head, triple.tail],
                )
            )
    return examples


def _batch_tensors(
    examples: Sequence[tuple[list[str], list[int], str, list[str]]],
    vocab: Vocab,
    max_decode_length: int,
    scale_jitter: float,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    max_q = max(len(e[0]) for e in examples)
    max_t = max_decode_length + 1  # decoded tokens + end token
    q_ids = torch.full((len(examples), max_q), vocab.pad_id, dtype=torch.long)
    content = torch.zeros(len(examples), max_q)
    dec_in = torch.full((len(examples), 1 + max_t), vocab.pad_id, dtype=torch.long)
    dec_tgt = torch.full((len(examples), max_t), vocab.pad_id, dtype=torch.long)
    tgt_mask = torch.zeros(len(examples), max_t, dtype=torch.bool)
    for i, (slots, positions, relation, decoded) in enumerate(examples):
        ids = vocab.encode(slots)
        q_ids[i, : len(ids)] = torch.tensor(ids)
        for pos in positions:
            scale = 1.0
            if scale_jitter > 0.0 and rng.random() < 0.5:
                scale = 1.0 - scale_jitter * rng.random()
            content[i, pos] = scale
        out_ids = vocab.encode(decoded)[:max_decode_length]
        target = out_ids + [vocab.eos_id]
        row_in = [vocab.bos_id, vocab.relation_id(relation)] + out_ids
        dec_in[i, : len(row_in)] = torch.tensor(row_in)
        dec_tgt[i, : len(target)] = torch.tensor(target)
        tgt_mask[i, : len(target)] = True
    return q_ids, content, dec_in, dec_tgt, tgt_mask


def pretrain_knowledge(
    triples: Sequence[Triple],
    config: ModelConfig,
    vocab: Vocab,
    relations: Sequence[str],
    entities: Optional[list[str]] = None,
    settings: PretrainSettings = PretrainSettings(),
) -> tuple[KnowledgeModel, list[dict]]:
    """Train the knowledge seq2seq on a triple corpus, then freeze it.

    Returns the frozen model and a per-epoch log of mean loss.
    """
    if not triples:
        raise ValueError("cannot pretrain on an empty triple corpus")
    torch.manual_seed(config.seed)
    model = KnowledgeModel(config, vocab, relations)
    rng = np.random.default_rng(settings.seed)
    if entities is None:
        entities = sorted({t.head for t in triples} | {t.tail for t in triples})
    triple_set = {(t.head, t.relation, t.tail) for t in triples}

    opt = torch.optim.AdamW(
        model.parameters(), lr=settings.learning_rate, weight_decay=settings.weight_decay
    )
    log: list[dict] = []
    anneal_at = {int(settings.epochs * 0.6), int(settings.epochs * 0.85)}
    for epoch in range(settings.epochs):
        if epoch in anneal_at:
            for group in opt.param_groups:
                group["lr"] *= 0.3
        examples = _build_examples(triples, entities, settings, rng, triple_set)
        order = rng.permutation(len(examples))
        total, count = 0.0, 0
        for start in range(0, len(examples), settings.batch_size):
            chunk = [examples[int(i)] for i in order[start : start + settings.batch_size]]
            q_ids, content, dec_in, dec_tgt, tgt_mask = _batch_tensors(
                chunk, vocab, settings.max_decode_length, settings.scale_jitter, rng
            )
            query = model.embed_tokens(q_ids) * content.unsqueeze(-1)
            attn = torch.ones_like(q_ids, dtype=torch.bool)
            memory = model.encode_query(query, attn)
            # States at positions >= 1 predict tail tokens then the end token.
            logits = model.decoder.logits(memory, dec_in[:, : 1 + dec_tgt.shape[1]], attn)
            logits = logits[:, 1:, :]
            loss_tok = torch.nn.functional.cross_entropy(
                logits.reshape(-1, logits.shape[-1]), dec_tgt.reshape(-1), reduction="none"
            ).view(dec_tgt.shape)
            loss = (loss_tok * tgt_mask).sum() / tgt_mask.sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(chunk)
            count += len(chunk)
        log.append({"epoch": epoch, "loss": total / count})
    model.freeze()
    return model, log


def save_knowledge(model: KnowledgeModel, path: Path | str) -> None:
    save_checkpoint(
        path,
        model.config,
        {
            "kind": "knowledge",
            "relations": list(model.relations),
            "vocab": model.vocab.id_to_token,
            "state": model.state_dict(),
        },
    )


def load_knowledge(path: Path | str) -> KnowledgeModel:
    config, payload = load_checkpoint(path)
    if payload.get("kind") != "knowledge":
        raise ValueError("not a knowledge checkpoint")
    vocab = Vocab(payload["vocab"])
    model = KnowledgeModel(config, vocab, payload["relations"])
    model.load_state_dict(payload["state"])
    model.freeze()
    return model
