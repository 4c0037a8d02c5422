"""End-to-end composition of the self-rationalizing pipeline.

Stage order for one batch: embed and contextualize the input, predict and
sample per-unit rationale selectors, query the frozen knowledge module
with the selector-scaled content, predict and sample per-snippet
selectors, fuse the masked snippet vectors with the generator's input
embedding, then produce the explanation and the label.

Training uses one Monte-Carlo sample of every latent selector and
teacher-forces the gold explanation; inference binarizes both selector
stages with the deterministic prob-zero rule and samples the explanation
with nucleus decoding. Ablations are pure mask substitutions so that every
other code path stays identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import rationale as rat
from . import selector as sel
from .backbone import Encoder, ModelConfig, TokenEmbedder, load_checkpoint, save_checkpoint
from .explainer import DEFAULT_NUCLEUS_P, ExplainerPredictor
from .hardkuma import DEFAULT_BOUNDS, StretchBounds
from .knowledge import KnowledgeModel
from .synthdata import Instance
from .vocab import Vocab


@dataclass(frozen=True)
class AblationFlags:
    no_cs: bool = False
    no_rationales: bool = False
    no_cs_sel: bool = False

    def __post_init__(self) -> None:
        if self.no_cs and self.no_rationales:
            raise ValueError("at most one of no_cs / no_rationales may be active")
        if self.no_cs and self.no_cs_sel:
            raise ValueError("no_cs_sel is meaningless when the knowledge module is ablated")

    @property
    def any(self) -> bool:
        return self.no_cs or self.no_rationales or self.no_cs_sel


def apply_ablation(
    flags: AblationFlags,
    z_rationale: torch.Tensor,
    z_selection: torch.Tensor,
    real_mask: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, bool]:
    """Substitute latent masks per the requested ablation.

    Returns the effective rationale mask, the effective selection mask and
    whether knowledge vectors participate at all (False only for no_cs,
    where the fused knowledge rows are zeroed and the selection penalty is
    dropped).
    """
    if flags.no_rationales:
        z_rationale = real_mask.to(z_rationale.dtype)
    if flags.no_cs_sel:
        z_selection = torch.ones_like(z_selection)
    if flags.no_cs:
        z_selection = torch.zeros_like(z_selection)
    return z_rationale, z_selection, not flags.no_cs


@dataclass
class EncodedBatch:
    token_ids: torch.Tensor  # [B, N]
    mask: torch.Tensor  # [B, N] bool
    labels: torch.Tensor  # [B]
    nle_in: torch.Tensor  # [B, 1 + T]
    nle_target: torch.Tensor  # [B, T + 1]
    nle_mask: torch.Tensor  # [B, T + 1] bool
    instances: list[Instance]

    def __len__(self) -> int:
        return self.token_ids.shape[0]


def encode_batch(instances: Sequence[Instance], vocab: Vocab) -> EncodedBatch:
    ids = [vocab.encode(ins.full_tokens) for ins in instances]
    nles = [vocab.encode(ins.gold_nle) for ins in instances]
    n = max(len(r) for r in ids)
    t = max(len(r) for r in nles)
    b = len(instances)
    token_ids = torch.full((b, n), vocab.pad_id, dtype=torch.long)
    mask = torch.zeros(b, n, dtype=torch.bool)
    nle_in = torch.full((b, 1 + t), vocab.pad_id, dtype=torch.long)
    nle_target = torch.full((b, t + 1), vocab.pad_id, dtype=torch.long)
    nle_mask = torch.zeros(b, t + 1, dtype=torch.bool)
    for i, (row, nle) in enumerate(zip(ids, nles)):
        token_ids[i, : len(row)] = torch.tensor(row)
        mask[i, : len(row)] = True
        nle_in[i, 0] = vocab.bos_id
        nle_in[i, 1 : 1 + len(nle)] = torch.tensor(nle)
        nle_target[i, : len(nle)] = torch.tensor(nle)
        nle_target[i, len(nle)] = vocab.eos_id
        nle_mask[i, : len(nle) + 1] = True
    labels = torch.tensor([ins.label for ins in instances], dtype=torch.long)
    return EncodedBatch(token_ids, mask, labels, nle_in, nle_target, nle_mask, instances)


@dataclass
class StageOutputs:
    """Intermediate tensors shared by the training and inference heads."""

    rationale_a: torch.Tensor
    rationale_b: torch.Tensor
    z_rationale: torch.Tensor
    snippet_hidden: torch.Tensor  # [B, M, d] (zeros when knowledge is ablated)
    snippet_tokens: list[list[list[int]]]
    selection_a: Optional[torch.Tensor]
    selection_b: Optional[torch.Tensor]
    z_selection: torch.Tensor
    memory: torch.Tensor  # fused encoder states [B, M + N, d]
    fused_mask: torch.Tensor
    use_knowledge: bool


@dataclass
class InferenceResult:
    predicted_labels: torch.Tensor  # [B]
    label_distributions: torch.Tensor  # [B, n_labels]
    nle_ids: list[list[int]]
    hard_rationale: torch.Tensor  # [B, N] bool
    selection_flags: torch.Tensor  # [B, M] bool
    stages: StageOutputs


class SelfRationalizer(nn.Module):
    """Trainable pipeline around a frozen knowledge module."""

    def __init__(
        self,
        config: ModelConfig,
        vocab: Vocab,
        knowledge: KnowledgeModel,
        n_labels: int = 2,
        bounds: StretchBounds = DEFAULT_BOUNDS,
    ):
        super().__init__()
        if knowledge.config.model_dim != config.model_dim:
            raise ValueError("knowledge model width must match the pipeline width")
        torch.manual_seed(config.seed)
        self.config = config
        self.vocab = vocab
        self.bounds = bounds
        self.n_labels = n_labels
        # One frozen content basis for every component: the knowledge
        # module's pretrained table. Stands in for all components sharing a
        # pretrained token space, and lets downstream attention match
        # snippet states against input tokens by dot product.
        self.task_embedder = knowledge.embedder
        self.task_encoder = Encoder(config)
        self.rationale_head = rat.RationaleExtractor(config.model_dim)
        self.knowledge_selector = sel.KnowledgeSelector(config.model_dim)
        self.explainer = ExplainerPredictor(config, vocab, n_labels, embedder=knowledge.embedder)
        self.knowledge = knowledge
        if not knowledge.frozen:
            knowledge.freeze()

    @property
    def relations(self) -> tuple[str, ...]:
        return self.knowledge.relations

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    # -- shared stage computation ------------------------------------------

    def _content(
        self,
        embedder: TokenEmbedder,
        token_ids: torch.Tensor,
        occlusion: Optional[torch.Tensor],
        noise_std: float,
        noise_gen: Optional[torch.Generator],
        content_sink: Optional[list] = None,
    ) -> torch.Tensor:
        emb = embedder(token_ids)
        if occlusion is not None:
            emb = emb * occlusion.to(emb.dtype).unsqueeze(-1)
        if noise_std > 0.0:
            noise = torch.randn(emb.shape, generator=noise_gen) * noise_std
            emb = emb + noise
        if content_sink is not None:
            # Leaf view of the content rows so callers can take input-space
            # gradients without touching the tables.
            emb = emb.detach().clone().requires_grad_(True)
            content_sink.append(emb)
        return emb

    def run_stages(
        self,
        batch: EncodedBatch,
        z_rationale_source: str = "sample",
        uniforms_rationale: Optional[torch.Tensor] = None,
        uniforms_selection: Optional[torch.Tensor] = None,
        flags: AblationFlags = AblationFlags(),
        occlusion: Optional[torch.Tensor] = None,
        noise_std: float = 0.0,
        noise_gen: Optional[torch.Generator] = None,
        content_sink: Optional[list] = None,
    ) -> StageOutputs:
        """Latent selection and fusion up to the fused encoder states.

        `z_rationale_source` is "sample" (reparameterized draw from the
        provided uniforms) or "hard" (deterministic prob-zero rule used at
        inference; selection is binarized the same way).
        """
        ids, mask = batch.token_ids, batch.mask
        b, n = ids.shape
        m = len(self.relations)

        task_content = self._content(
            self.task_embedder, ids, occlusion, noise_std, noise_gen, content_sink
        )
        context = self.task_encoder(task_content, mask)
        a_r, b_r = self.rationale_head.predict_selector_params(context, mask)

        if z_rationale_source == "sample":
            if uniforms_rationale is None:
                raise ValueError("sampling the rationale mask requires uniforms")
            z_r = rat.sample_rationale(a_r, b_r, uniforms_rationale, mask, self.bounds)
        elif z_rationale_source == "hard":
            z_r = rat.hard_rationale(a_r, b_r, mask, self.bounds).to(task_content.dtype)
        else:
            raise ValueError(f"unknown rationale source: {z_rationale_source!r}")

        effective_z_r = mask.to(z_r.dtype) if flags.no_rationales else z_r

        if flags.no_cs:
            snippet_hidden = torch.zeros(b, m, self.config.model_dim)
            snippet_tokens: list[list[list[int]]] = [[[] for _ in range(m)] for _ in range(b)]
            a_k = b_k = None
            z_k = torch.zeros(b, m)
        else:
            know_content = self._content(
                self.knowledge.embedder, ids, occlusion, noise_std, noise_gen, content_sink
            )
            masked_query = rat.soft_query(know_content, effective_z_r)
            snippet_hidden, snippet_tokens = self.knowledge.generate_snippets(masked_query, mask)
            fmask = mask.to(context.dtype).unsqueeze(-1)
            pooled = (context * fmask).sum(dim=1) / fmask.sum(dim=1).clamp(min=1.0)
            a_k, b_k = self.knowledge_selector.predict_selection_params(snippet_hidden, pooled)
            if z_rationale_source == "sample":
                if uniforms_selection is None:
                    raise ValueError("sampling the selection mask requires uniforms")
                z_k = sel.sample_selection(a_k, b_k, uniforms_selection, self.bounds)
            else:
                z_k = sel.selected_flags(a_k, b_k, self.bounds).to(snippet_hidden.dtype)

        z_r_eff, z_k_eff, use_knowledge = apply_ablation(flags, z_r, z_k, mask)
        masked_knowledge = sel.mask_knowledge(snippet_hidden, z_k_eff)

        gen_content = self._content(
            self.explainer.embedder, ids, occlusion, noise_std, noise_gen, content_sink
        )
        fused, fused_mask = self.explainer.fuse(gen_content, masked_knowledge, mask)
        memory = self.explainer.encode_fused(fused, fused_mask)
        return StageOutputs(
            rationale_a=a_r,
            rationale_b=b_r,
            z_rationale=z_r_eff,
            snippet_hidden=snippet_hidden,
            snippet_tokens=snippet_tokens,
            selection_a=a_k,
            selection_b=b_k,
            z_selection=z_k_eff,
            memory=memory,
            fused_mask=fused_mask,
            use_knowledge=use_knowledge,
        )

    # -- heads ----------------------------------------------------------------

    def pooled_memory_logits(self, stages: StageOutputs) -> torch.Tensor:
        """Label logits from mean-pooled fused encoder states (ZS variant)."""
        fmask = stages.fused_mask.to(stages.memory.dtype).unsqueeze(-1)
        pooled = (stages.memory * fmask).sum(dim=1) / fmask.sum(dim=1).clamp(min=1.0)
        return self.explainer.label_head(pooled)

    def teacher_forced_heads(
        self, batch: EncodedBatch, stages: StageOutputs, variant: str
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(per-instance NLE NLL, label logits) for training.

        The zero-shot variant carries no explanation loss and predicts from
        the fused encoder states instead of explanation states.
        """
        if variant == "rexc_zs":
            nll_nle = torch.zeros(len(batch))
            logits = self.pooled_memory_logits(stages)
            return nll_nle, logits
        states, nll_nle = self.explainer.teacher_forced(
            stages.memory, stages.fused_mask, batch.nle_in, batch.nle_target, batch.nle_mask
        )
        # States at positions 0..T-1 produced gold tokens y_1..y_T; the
        # predictor pools exactly those (the end token's state is excluded).
        lengths = batch.nle_mask.sum(dim=1) - 1
        keep = torch.arange(batch.nle_target.shape[1]).unsqueeze(0) < lengths.unsqueeze(1)
        logits = self.explainer.label_logits(states[:, : keep.shape[1], :], keep)
        return nll_nle, logits

    def infer(
        self,
        batch: EncodedBatch,
        decode_rng: np.random.Generator,
        variant: str = "rexc",
        flags: AblationFlags = AblationFlags(),
        nucleus_p: float = DEFAULT_NUCLEUS_P,
        max_nle_length: int = 12,
        occlusion: Optional[torch.Tensor] = None,
        noise_std: float = 0.0,
        noise_gen: Optional[torch.Generator] = None,
    ) -> InferenceResult:
        with torch.no_grad():
            stages = self.run_stages(
                batch,
                z_rationale_source="hard",
                flags=flags,
                occlusion=occlusion,
                noise_std=noise_std,
                noise_gen=noise_gen,
            )
            if variant == "rexc_zs":
                logits = self.pooled_memory_logits(stages)
                nle_ids = self._zs_explanations(stages)
            else:
                nle_ids, states, state_mask = self.explainer.generate(
                    stages.memory,
                    stages.fused_mask,
                    decode_rng,
                    p=nucleus_p,
                    max_length=max_nle_length,
                )
                logits = self.explainer.label_logits(states, state_mask)
            dist = torch.softmax(logits, dim=-1)
            hard = rat.hard_rationale(
                stages.rationale_a, stages.rationale_b, batch.mask, self.bounds
            )
            if stages.selection_a is not None:
                sel_flags = sel.selected_flags(stages.selection_a, stages.selection_b, self.bounds)
            else:
                sel_flags = torch.zeros(len(batch), len(self.relations), dtype=torch.bool)
            return InferenceResult(
                predicted_labels=dist.argmax(dim=-1),
                label_distributions=dist,
                nle_ids=nle_ids,
                hard_rationale=hard,
                selection_flags=sel_flags,
                stages=stages,
            )

    def _zs_explanations(self, stages: StageOutputs) -> list[list[int]]:
        """Concatenated selected snippets (relation tag + decoded tail)."""
        if stages.selection_a is None:
            return [[] for _ in stages.snippet_tokens]
        out = []
        sel_flags = sel.selected_flags(stages.selection_a, stages.selection_b, self.bounds)
        for i, per_rel in enumerate(stages.snippet_tokens):
            row: list[int] = []
            for j, rel in enumerate(self.relations):
                if bool(sel_flags[i, j]):
                    row.append(self.vocab.relation_id(rel))
                    row.extend(per_rel[j])
            out.append(row)
        return out

    def snippet_texts(self, stages: StageOutputs, row: int, selected_only: bool = True) -> list[str]:
        if stages.selection_a is None:
            return []
        flags = sel.selected_flags(stages.selection_a, stages.selection_b, self.bounds)
        texts = []
        for j, rel in enumerate(self.relations):
            if selected_only and not bool(flags[row, j]):
                continue
            texts.append(" ".join([rel, *self.vocab.decode(stages.snippet_tokens[row][j])]))
        return texts


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_pipeline(model: SelfRationalizer, path: Path | str) -> None:
    save_checkpoint(
        path,
        model.config,
        {
            "kind": "pipeline",
            "vocab": model.vocab.id_to_token,
            "relations": list(model.relations),
            "n_labels": model.n_labels,
            "knowledge_config": model.knowledge.config.__dict__,
            "state": model.state_dict(),
        },
    )


def load_pipeline(path: Path | str) -> SelfRationalizer:
    config, payload = load_checkpoint(path)
    if payload.get("kind") != "pipeline":
        raise ValueError("not a pipeline checkpoint")
    vocab = Vocab(payload["vocab"])
    know_config = ModelConfig(**payload["knowledge_config"])
    knowledge = KnowledgeModel(know_config, vocab, payload["relations"])
    model = SelfRationalizer(config, vocab, knowledge, payload["n_labels"])
    model.load_state_dict(payload["state"])
    model.knowledge.freeze()
    return model
