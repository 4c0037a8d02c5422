"""Joint training objective and optimization loop.

Two lower bounds share one data term: the summed task and explanation
negative log-likelihoods. The rationale bound adds the expected-L0 and
fused-Lasso penalties, the selection bound adds the snippet expected-L0
penalty, and the optimized loss mixes the bounds with weight alpha. The
data term is built once in the computation graph, so the combined gradient
is exactly the alpha-weighted sum of the two bounds' gradients.

Reported breakdowns are assembled in plain float arithmetic from the
component values so that the mixing algebra holds to double precision in
the logs, independent of tensor precision.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import rationale as rat
from . import selector as sel
from .pipeline import AblationFlags, EncodedBatch, SelfRationalizer, encode_batch
from .synthdata import Instance

VARIANT_CHOICES = ("rexc", "rexc_zs")


@dataclass(frozen=True)
class TrainConfig:
    lambda0_r: float = 1.0
    lambda1_r: float = 1.0
    lambda0_k: float = 0.9
    alpha: float = 0.4
    learning_rate: float = 6.25e-5
    lr_decay_per_epoch: float = 0.1
    weight_decay: float = 0.01
    max_epochs: int = 5
    batch_size: int = 16
    patience: int = 2
    seed: int = 0
    variant: str = "rexc"
    no_cs: bool = False
    no_rationales: bool = False
    no_cs_sel: bool = False
    mc_samples: int = 1
    l1_on_samples: bool = False
    nucleus_p: float = 0.95
    max_nle_length: int = 12

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.variant not in VARIANT_CHOICES:
            raise ValueError(f"variant must be one of {VARIANT_CHOICES}")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("max_epochs, batch_size and patience must be >= 1")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        self.flags  # validates mutual exclusion

    @property
    def flags(self) -> AblationFlags:
        return AblationFlags(
            no_cs=self.no_cs, no_rationales=self.no_rationales, no_cs_sel=self.no_cs_sel
        )


@dataclass(frozen=True)
class LossBreakdown:
    nll_task: float
    nll_nle: float
    l1_rationale: float
    fused_rationale: float
    l1_selection: float
    eq1_total: float
    eq2_total: float
    combined: float

    @classmethod
    def assemble(
        cls,
        nll_task: float,
        nll_nle: float,
        l1_rationale: float,
        fused_rationale: float,
        l1_selection: float,
        alpha: float,
    ) -> "LossBreakdown":
        nll = nll_task + nll_nle
        eq1 = nll + l1_rationale + fused_rationale
        eq2 = nll + l1_selection
        return cls(
            nll_task=nll_task,
            nll_nle=nll_nle,
            l1_rationale=l1_rationale,
            fused_rationale=fused_rationale,
            l1_selection=l1_selection,
            eq1_total=eq1,
            eq2_total=eq2,
            combined=alpha * eq1 + (1.0 - alpha) * eq2,
        )


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss; carries the breakdown."""

    def __init__(self, breakdown: LossBreakdown, step: int):
        super().__init__(
            f"non-finite loss at step {step}; diagnostic breakdown: {asdict(breakdown)}"
        )
        self.breakdown = breakdown
        self.step = step


def _clamp_uniform(u: torch.Tensor) -> torch.Tensor:
    return u.clamp(1e-6, 1.0 - 1e-6)


def loss_terms(
    model: SelfRationalizer,
    batch: EncodedBatch,
    config: TrainConfig,
    sample_gen: Optional[torch.Generator] = None,
    uniforms_rationale: Optional[torch.Tensor] = None,
    uniforms_selection: Optional[torch.Tensor] = None,
) -> dict[str, torch.Tensor]:
    """One Monte-Carlo evaluation of every loss component (tensors)."""
    flags = config.flags
    b, n = batch.token_ids.shape
    m = len(model.relations)
    if uniforms_rationale is None:
        uniforms_rationale = _clamp_uniform(torch.rand(b, n, generator=sample_gen))
    if uniforms_selection is None:
        uniforms_selection = _clamp_uniform(torch.rand(b, m, generator=sample_gen))

    stages = model.run_stages(
        batch,
        z_rationale_source="sample",
        uniforms_rationale=uniforms_rationale,
        uniforms_selection=uniforms_selection,
        flags=flags,
    )
    nll_nle_per, label_logits = model.teacher_forced_heads(batch, stages, config.variant)
    nll_task = torch.nn.functional.cross_entropy(label_logits, batch.labels)
    nll_nle = nll_nle_per.mean()

    if flags.no_rationales:
        l1_r = torch.zeros(())
        fused_r = torch.zeros(())
    else:
        l1_per, fused_per = rat.rationale_penalties(
            stages.rationale_a,
            stages.rationale_b,
            stages.z_rationale,
            batch.mask,
            config.lambda0_r,
            config.lambda1_r,
            model.bounds,
            l1_on_samples=config.l1_on_samples,
        )
        l1_r, fused_r = l1_per.mean(), fused_per.mean()

    if flags.no_cs or flags.no_cs_sel or stages.selection_a is None:
        l1_k = torch.zeros(())
    else:
        l1_k = sel.selection_penalty(
            stages.selection_a, stages.selection_b, config.lambda0_k, model.bounds
        ).mean()
    return {
        "nll_task": nll_task,
        "nll_nle": nll_nle,
        "l1_rationale": l1_r,
        "fused_rationale": fused_r,
        "l1_selection": l1_k,
    }


def compute_loss(
    model: SelfRationalizer,
    batch: EncodedBatch,
    config: TrainConfig,
    sample_gen: Optional[torch.Generator] = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Mixed objective tensor plus its float breakdown.

    The shared data NLL enters the graph once; the two bounds reuse it, so
    minimizing the mixture weights each penalty by its bound's mixing
    coefficient while the data term keeps total weight one.
    """
    accum: dict[str, torch.Tensor] = {}
    for _ in range(config.mc_samples):
        terms = loss_terms(model, batch, config, sample_gen=sample_gen)
        for k, v in terms.items():
            accum[k] = accum.get(k, 0.0) + v / config.mc_samples
    nll = accum["nll_task"] + accum["nll_nle"]
    eq1 = nll + accum["l1_rationale"] + accum["fused_rationale"]
    eq2 = nll + accum["l1_selection"]
    combined = config.alpha * eq1 + (1.0 - config.alpha) * eq2
    breakdown = LossBreakdown.assemble(
        float(accum["nll_task"]),
        float(accum["nll_nle"]),
        float(accum["l1_rationale"]),
        float(accum["fused_rationale"]),
        float(accum["l1_selection"]),
        config.alpha,
    )
    return combined, breakdown


@dataclass
class TrainResult:
    model: SelfRationalizer
    step_log: list[dict]
    val_history: list[dict]
    best_epoch: int
    stopped_early: bool


def batches_of(
    instances: Sequence[Instance], vocab, batch_size: int, order: Optional[np.ndarray] = None
) -> list[EncodedBatch]:
    idx = np.arange(len(instances)) if order is None else order
    out = []
    for start in range(0, len(idx), batch_size):
        chunk = [instances[int(i)] for i in idx[start : start + batch_size]]
        out.append(encode_batch(chunk, vocab))
    return out


def validation_scores(
    model: SelfRationalizer, batches: Sequence[EncodedBatch], config: TrainConfig
) -> dict[str, float]:
    """Deterministic validation: hard latents, teacher-forced likelihoods."""
    total_tok_nll, total_tok = 0.0, 0
    total_task_nll = 0.0
    total_n = 0
    with torch.no_grad():
        for batch in batches:
            stages = model.run_stages(batch, z_rationale_source="hard", flags=config.flags)
            nll_nle_per, logits = model.teacher_forced_heads(batch, stages, config.variant)
            task = torch.nn.functional.cross_entropy(logits, batch.labels, reduction="sum")
            lengths = batch.nle_mask.sum(dim=1)
            total_tok_nll += float((nll_nle_per * lengths).sum())
            total_tok += int(lengths.sum())
            total_task_nll += float(task)
            total_n += len(batch)
    perplexity = math.exp(total_tok_nll / total_tok) if total_tok else float("nan")
    task_loss = total_task_nll / total_n
    return {"perplexity": perplexity, "task_loss": task_loss}


def train(
    model: SelfRationalizer,
    train_instances: Sequence[Instance],
    val_instances: Sequence[Instance],
    config: TrainConfig,
    step_callback: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Decoupled-weight-decay adaptive-moment optimization with early stop.

    One reparameterized sample of all latent selectors per step (more via
    mc_samples). The learning rate is multiplied by lr_decay_per_epoch
    after every epoch. Validation runs at each epoch end; the stopping
    score is explanation perplexity with task loss as tie-break (task loss
    alone for the zero-shot variant, which has no explanation likelihood).
    Restores and returns the best-validation parameters.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    sample_gen = torch.Generator().manual_seed(int(seeds[1].generate_state(1)[0]))

    opt = torch.optim.AdamW(
        model.trainable_parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    val_batches = batches_of(val_instances, model.vocab, config.batch_size)

    step_log: list[dict] = []
    val_history: list[dict] = []
    best_score: Optional[tuple[float, float]] = None
    best_state: Optional[dict] = None
    best_epoch = -1
    bad_evals = 0
    stopped_early = False
    step = 0
    lr = config.learning_rate

    for epoch in range(config.max_epochs):
        model.train()
        model.knowledge.eval()
        order = shuffle_rng.permutation(len(train_instances))
        for batch in batches_of(train_instances, model.vocab, config.batch_size, order):
            loss, breakdown = compute_loss(model, batch, config, sample_gen=sample_gen)
            if not math.isfinite(breakdown.combined):
                raise TrainingDiverged(breakdown, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            record = {"step": step, "epoch": epoch, "lr": lr, **asdict(breakdown)}
            step_log.append(record)
            if step_callback is not None:
                step_callback(record)
            step += 1

        model.eval()
        scores = validation_scores(model, val_batches, config)
        if config.variant == "rexc_zs":
            score = (scores["task_loss"], scores["task_loss"])
        else:
            score = (scores["perplexity"], scores["task_loss"])
        val_history.append({"epoch": epoch, **scores})
        if best_score is None or score < best_score:
            best_score = score
            best_state = copy.deepcopy(model.state_dict())
            best_epoch = epoch
            bad_evals = 0
        else:
            bad_evals += 1
            if bad_evals >= config.patience:
                stopped_early = True
                break

        lr = lr * config.lr_decay_per_epoch
        for group in opt.param_groups:
            group["lr"] = lr

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        model=model,
        step_log=step_log,
        val_history=val_history,
        best_epoch=best_epoch,
        stopped_early=stopped_early,
    )
