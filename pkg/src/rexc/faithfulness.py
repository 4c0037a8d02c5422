"""Model-level evaluation runs and faithfulness protocols.

Covers the batch evaluation pass (accuracy, rationale overlap, explanation
n-gram scores, selection precision, per-instance dumps) and the
faithfulness suite: occlusion-based comprehensiveness and sufficiency, a
separately trained simulator for simulatability, label-stability under
input noise, and gradient-based feature-importance agreement between the
label and explanation pathways.

Occlusion always replaces content embeddings with zero vectors, keeping
positions aligned. Noise is zero-mean Gaussian added to every embedding
table's output for the perturbed input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import evaluation as ev
from . import hardkuma
from .backbone import Encoder, ModelConfig, TokenEmbedder
from .explainer import surface_output
from .pipeline import AblationFlags, EncodedBatch, SelfRationalizer, encode_batch
from .synthdata import Instance
from .vocab import SEP, Vocab

DEFAULT_SIGMA_GRID = (0.0, 1.0, 5.0, 10.0, 25.0, 50.0, 100.0)
DEFAULT_K_GRID = (0, 10, 20, 50, 100)


# ---------------------------------------------------------------------------
# Standard evaluation pass
# ---------------------------------------------------------------------------


@dataclass
class EvalOutcome:
    accuracy: float
    n_instances: int
    rationale: Optional[ev.RationaleScore]
    nle_metrics: dict[str, float]
    selection_precision: Optional[float]
    prediction_rows: list[dict] = field(default_factory=list)
    rationale_rows: list[dict] = field(default_factory=list)
    selection_rows: list[dict] = field(default_factory=list)


def _batched(instances: Sequence[Instance], vocab: Vocab, batch_size: int) -> list[EncodedBatch]:
    return [
        encode_batch(list(instances[i : i + batch_size]), vocab)
        for i in range(0, len(instances), batch_size)
    ]


def evaluate_model(
    model: SelfRationalizer,
    instances: Sequence[Instance],
    variant: str = "rexc",
    surface: Optional[str] = None,
    flags: AblationFlags = AblationFlags(),
    decode_seed: int = 0,
    batch_size: int = 32,
    nucleus_p: float = 0.95,
    collect_rows: bool = True,
) -> EvalOutcome:
    """Deterministic evaluation (fixed decode seed) over a dataset."""
    surface = surface or ("rexc_zs" if variant == "rexc_zs" else "rexc")
    rng = np.random.default_rng(decode_seed)
    correct = 0
    pred_sets: list[set[int]] = []
    gold_sets: list[set[int]] = []
    metric_sums = {"bleu4": 0.0, "rougeL": 0.0, "meteor_lite": 0.0}
    metric_count = 0
    sel_tp = sel_total = 0
    outcome = EvalOutcome(0.0, len(instances), None, {}, None)

    for batch in _batched(instances, model.vocab, batch_size):
        res = model.infer(batch, rng, variant=variant, flags=flags, nucleus_p=nucleus_p)
        p0_r = hardkuma.prob_zero(res.stages.rationale_a, res.stages.rationale_b, model.bounds)
        p0_k = (
            hardkuma.prob_zero(res.stages.selection_a, res.stages.selection_b, model.bounds)
            if res.stages.selection_a is not None
            else None
        )
        for i, ins in enumerate(batch.instances):
            pred = int(res.predicted_labels[i])
            correct += int(pred == ins.label)
            n_real = int(batch.mask[i].sum())
            sel_indices = [j for j in range(n_real) if bool(res.hard_rationale[i, j])]
            if ins.gold_rationale is not None:
                pred_sets.append(set(sel_indices))
                gold_sets.append(set(ins.gold_rationale))
            nle_tokens = model.vocab.decode(res.nle_ids[i])
            if ins.gold_nle:
                for k, v in ev.ngram_metrics(nle_tokens, ins.gold_nle).items():
                    metric_sums[k] += v
                metric_count += 1
            selected_rels = [
                rel for j, rel in enumerate(model.relations) if bool(res.selection_flags[i, j])
            ]
            if ins.relation is not None:
                sel_tp += sum(int(r == ins.relation) for r in selected_rels)
                sel_total += len(selected_rels)
            if collect_rows:
                snippet_texts = model.snippet_texts(res.stages, i, selected_only=True)
                outcome.prediction_rows.append(
                    {
                        "instance_id": ins.instance_id,
                        "predicted_label": pred,
                        "label_distribution": [
                            round(float(x), 6) for x in res.label_distributions[i]
                        ],
                        "nle_text": surface_output(surface, nle_tokens, snippet_texts),
                        "variant": surface,
                        "selected_snippets": snippet_texts,
                    }
                )
                outcome.rationale_rows.append(
                    {
                        "instance_id": ins.instance_id,
                        "selected_indices": sel_indices,
                        "prob_zero": [round(float(p0_r[i, j]), 6) for j in range(n_real)],
                    }
                )
                outcome.selection_rows.append(
                    {
                        "instance_id": ins.instance_id,
                        "prob_zero": []
                        if p0_k is None
                        else [round(float(x), 6) for x in p0_k[i]],
                        "selected_relations": selected_rels,
                        "decoded_snippets": model.snippet_texts(
                            res.stages, i, selected_only=False
                        ),
                    }
                )

    outcome.accuracy = correct / max(len(instances), 1)
    if pred_sets:
        outcome.rationale = ev.rationale_scores(pred_sets, gold_sets)
    if metric_count:
        outcome.nle_metrics = {k: v / metric_count for k, v in metric_sums.items()}
    if sel_total:
        outcome.selection_precision = sel_tp / sel_total
    elif any(ins.relation is not None for ins in instances):
        outcome.selection_precision = 0.0
    return outcome


def prediction_accuracy(
    model: SelfRationalizer,
    instances: Sequence[Instance],
    decode_seed: int = 0,
    batch_size: int = 32,
    occlusion_sets: Optional[list[set[int]]] = None,
    noise_std: float = 0.0,
    noise_seed: int = 0,
    variant: str = "rexc",
) -> tuple[float, list[int], list[list[str]]]:
    """Accuracy plus per-instance predictions and explanation tokens.

    `occlusion_sets` lists, per instance, the unit indices whose content
    embeddings are zeroed.
    """
    rng = np.random.default_rng(decode_seed)
    noise_gen = torch.Generator().manual_seed(noise_seed) if noise_std > 0 else None
    preds: list[int] = []
    nles: list[list[str]] = []
    correct = 0
    offset = 0
    for batch in _batched(instances, model.vocab, batch_size):
        occ = None
        if occlusion_sets is not None:
            occ = torch.ones_like(batch.mask, dtype=torch.float32)
            for i in range(len(batch)):
                for j in occlusion_sets[offset + i]:
                    if j < occ.shape[1]:
                        occ[i, j] = 0.0
        res = model.infer(
            batch, rng, variant=variant, occlusion=occ, noise_std=noise_std, noise_gen=noise_gen
        )
        for i, ins in enumerate(batch.instances):
            pred = int(res.predicted_labels[i])
            preds.append(pred)
            nles.append(model.vocab.decode(res.nle_ids[i]))
            correct += int(pred == ins.label)
        offset += len(batch)
    return correct / max(len(instances), 1), preds, nles


def hard_rationale_sets(
    model: SelfRationalizer, instances: Sequence[Instance], batch_size: int = 32
) -> list[set[int]]:
    rng = np.random.default_rng(0)
    sets: list[set[int]] = []
    for batch in _batched(instances, model.vocab, batch_size):
        res = model.infer(batch, rng, max_nle_length=1)
        for i in range(len(batch)):
            n_real = int(batch.mask[i].sum())
            sets.append({j for j in range(n_real) if bool(res.hard_rationale[i, j])})
    return sets


def comprehensiveness_sufficiency(
    model: SelfRationalizer,
    instances: Sequence[Instance],
    decode_seed: int = 0,
    batch_size: int = 32,
) -> dict[str, float]:
    """Accuracy deltas when the hard rationale is occluded / kept alone."""
    acc_full, _, _ = prediction_accuracy(model, instances, decode_seed, batch_size)
    rat_sets = hard_rationale_sets(model, instances, batch_size)
    lengths = [len(ins.full_tokens) for ins in instances]
    complement = [set(range(n)) - s for n, s in zip(lengths, rat_sets)]
    acc_wo, _, _ = prediction_accuracy(
        model, instances, decode_seed, batch_size, occlusion_sets=rat_sets
    )
    acc_only, _, _ = prediction_accuracy(
        model, instances, decode_seed, batch_size, occlusion_sets=complement
    )
    return {
        "acc_full": acc_full,
        "comprehensiveness": acc_full - acc_wo,
        "sufficiency": acc_full - acc_only,
    }


# ---------------------------------------------------------------------------
# Simulator and simulatability
# ---------------------------------------------------------------------------


class Simulator(nn.Module):
    """Separate classifier over input (optionally followed by the NLE)."""

    def __init__(self, config: ModelConfig, vocab: Vocab, n_labels: int = 2):
        super().__init__()
        torch.manual_seed(config.seed)
        self.config = config
        self.vocab = vocab
        self.embedder = TokenEmbedder(config)
        self.encoder = Encoder(config)
        self.head = nn.Linear(config.model_dim, n_labels)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        states = self.encoder(self.embedder(ids), mask)
        fmask = mask.to(states.dtype).unsqueeze(-1)
        pooled = (states * fmask).sum(dim=1) / fmask.sum(dim=1).clamp(min=1.0)
        return self.head(pooled)


def _simulator_batch(
    instances: Sequence[Instance],
    nles: Optional[Sequence[Optional[Sequence[str]]]],
    vocab: Vocab,
    max_len: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    rows = []
    for i, ins in enumerate(instances):
        tokens = list(ins.full_tokens)
        if nles is not None and nles[i] is not None:
            tokens = tokens + [SEP] + [t for t in nles[i] if t in vocab.token_to_id]
        rows.append(vocab.encode(tokens[:max_len]))
    n = max(len(r) for r in rows)
    ids = torch.full((len(rows), n), vocab.pad_id, dtype=torch.long)
    mask = torch.zeros(len(rows), n, dtype=torch.bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = torch.tensor(r)
        mask[i, : len(r)] = True
    labels = torch.tensor([ins.label for ins in instances], dtype=torch.long)
    return ids, mask, labels


def train_simulator(
    instances: Sequence[Instance],
    vocab: Vocab,
    n_labels: int = 2,
    config: Optional[ModelConfig] = None,
    nles: Optional[Sequence[Sequence[str]]] = None,
    epochs: int = 3,
    batch_size: int = 32,
    learning_rate: float = 1e-3,
    nle_dropout: float = 0.5,
    seed: int = 0,
) -> Simulator:
    """Train the simulator on inputs with the explanation appended half the
    time, so it can score inputs both with and without one.

    Defaults to the instances' gold explanations as the training-time NLE
    source.
    """
    if config is None:
        config = ModelConfig(vocab_size=len(vocab), encoder_layers=1, seed=seed)
    sim = Simulator(config, vocab, n_labels)
    rng = np.random.default_rng(seed)
    opt = torch.optim.AdamW(sim.parameters(), lr=learning_rate, weight_decay=0.01)
    source = [list(ins.gold_nle) for ins in instances] if nles is None else [list(x) for x in nles]
    for _ in range(epochs):
        order = rng.permutation(len(instances))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            chunk = [instances[int(i)] for i in idx]
            chunk_nles: list[Optional[Sequence[str]]] = [
                None if rng.random() < nle_dropout else source[int(i)] for i in idx
            ]
            ids, mask, labels = _simulator_batch(
                chunk, chunk_nles, vocab, config.max_sequence_length
            )
            loss = torch.nn.functional.cross_entropy(sim(ids, mask), labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
    sim.eval()
    return sim


def simulator_accuracy(
    sim: Simulator,
    instances: Sequence[Instance],
    nles: Optional[Sequence[Optional[Sequence[str]]]] = None,
    batch_size: int = 64,
) -> float:
    correct = 0
    with torch.no_grad():
        for start in range(0, len(instances), batch_size):
            chunk = list(instances[start : start + batch_size])
            chunk_nles = None if nles is None else list(nles[start : start + batch_size])
            ids, mask, labels = _simulator_batch(
                chunk, chunk_nles, sim.vocab, sim.config.max_sequence_length
            )
            preds = sim(ids, mask).argmax(dim=-1)
            correct += int((preds == labels).sum())
    return correct / max(len(instances), 1)


def simulatability(
    sim: Simulator, instances: Sequence[Instance], nles: Sequence[Sequence[str]]
) -> float:
    """Accuracy gain of the simulator when given the explanations."""
    with_nle = simulator_accuracy(sim, instances, list(nles))
    without = simulator_accuracy(sim, instances, None)
    return with_nle - without


# ---------------------------------------------------------------------------
# Robustness equivalence
# ---------------------------------------------------------------------------


def robustness_equivalence(
    model: SelfRationalizer,
    sim: Simulator,
    sigma_grid: Sequence[float],
    instances: Sequence[Instance],
    decode_seed: int = 0,
    noise_seed: int = 100,
    batch_size: int = 32,
) -> list[dict[str, float]]:
    """Label stability and explanation usefulness under embedding noise."""
    if any(s < 0 for s in sigma_grid):
        raise ValueError("noise variances must be non-negative")
    _, clean_preds, _ = prediction_accuracy(model, instances, decode_seed, batch_size)
    rows = []
    for idx, sigma2 in enumerate(sigma_grid):
        std = math.sqrt(sigma2)
        _, preds, nles = prediction_accuracy(
            model,
            instances,
            decode_seed,
            batch_size,
            noise_std=std,
            noise_seed=noise_seed + idx,
        )
        stable = sum(int(a == b) for a, b in zip(preds, clean_preds)) / max(len(preds), 1)
        rows.append(
            {
                "sigma2": float(sigma2),
                "stable_fraction": stable,
                "simulatability": simulatability(sim, instances, nles),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# Feature importance agreement
# ---------------------------------------------------------------------------


def importance_scores(
    model: SelfRationalizer,
    instances: Sequence[Instance],
    decode_seed: int = 0,
    batch_size: int = 16,
) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Per-unit gradient-norm importance for the label and the explanation.

    The explanation is generated once (fixed seed), then teacher-forced so
    both likelihoods are differentiable functions of the input content
    embeddings. Returns (label importance, NLE importance) as [n, max_N]
    arrays plus real lengths.
    """
    rng = np.random.default_rng(decode_seed)
    label_rows: list[np.ndarray] = []
    nle_rows: list[np.ndarray] = []
    lengths: list[int] = []
    for batch in _batched(instances, model.vocab, batch_size):
        with torch.no_grad():
            res = model.infer(batch, rng)
        gen_ids = res.nle_ids
        preds = res.predicted_labels
        t = max(len(g) for g in gen_ids)
        b = len(batch)
        nle_in = torch.full((b, 1 + t), model.vocab.pad_id, dtype=torch.long)
        nle_tgt = torch.full((b, t + 1), model.vocab.pad_id, dtype=torch.long)
        nle_mask = torch.zeros(b, t + 1, dtype=torch.bool)
        for i, g in enumerate(gen_ids):
            nle_in[i, 0] = model.vocab.bos_id
            nle_in[i, 1 : 1 + len(g)] = torch.tensor(g)
            nle_tgt[i, : len(g)] = torch.tensor(g)
            nle_tgt[i, len(g)] = model.vocab.eos_id
            nle_mask[i, : len(g) + 1] = True

        sink: list[torch.Tensor] = []
        stages = model.run_stages(batch, z_rationale_source="hard", content_sink=sink)
        states, nll_nle = model.explainer.teacher_forced(
            stages.memory, stages.fused_mask, nle_in, nle_tgt, nle_mask
        )
        keep = torch.arange(t + 1).unsqueeze(0) < (nle_mask.sum(dim=1) - 1).unsqueeze(1)
        logits = model.explainer.label_logits(states[:, : t + 1, :], keep)
        label_nll = torch.nn.functional.cross_entropy(logits, preds, reduction="sum")
        nle_nll = nll_nle.sum()

        label_grads = torch.autograd.grad(label_nll, sink, retain_graph=True, allow_unused=True)
        nle_grads = torch.autograd.grad(nle_nll, sink, allow_unused=True)

        def _norms(grads) -> np.ndarray:
            total = torch.zeros(batch.token_ids.shape)
            for g in grads:
                if g is not None:
                    total = total + g.pow(2).sum(dim=-1)
            return total.sqrt().detach().numpy()

        lab = _norms(label_grads)
        nle = _norms(nle_grads)
        for i in range(b):
            n_real = int(batch.mask[i].sum())
            lengths.append(n_real)
            label_rows.append(lab[i])
            nle_rows.append(nle[i])
    width = max(r.shape[0] for r in label_rows)
    lab_arr = np.zeros((len(label_rows), width))
    nle_arr = np.zeros((len(nle_rows), width))
    for i, (lr, nr) in enumerate(zip(label_rows, nle_rows)):
        lab_arr[i, : lr.shape[0]] = lr
        nle_arr[i, : nr.shape[0]] = nr
    return lab_arr, nle_arr, lengths


def _top_k_sets(scores: np.ndarray, lengths: list[int], k_percent: float) -> list[set[int]]:
    sets = []
    for i, n in enumerate(lengths):
        n_occ = math.ceil(k_percent / 100.0 * n) if k_percent > 0 else 0
        order = np.argsort(-scores[i, :n], kind="stable")
        sets.append({int(j) for j in order[:n_occ]})
    return sets


def _random_sets(
    lengths: list[int], k_percent: float, rng: np.random.Generator
) -> list[set[int]]:
    sets = []
    for n in lengths:
        n_occ = math.ceil(k_percent / 100.0 * n) if k_percent > 0 else 0
        sets.append({int(j) for j in rng.choice(n, size=n_occ, replace=False)})
    return sets


def feature_importance_agreement(
    model: SelfRationalizer,
    sim: Simulator,
    k_grid: Sequence[float],
    instances: Sequence[Instance],
    decode_seed: int = 0,
    random_seed: int = 7,
    batch_size: int = 32,
) -> list[dict[str, float]]:
    """Occlude top-k% units by cross-pathway importance vs random units.

    Units important for the explanation are occluded before measuring label
    accuracy; units important for the label are occluded before measuring
    explanation simulatability. Random occlusions of matched size give the
    baselines.
    """
    label_imp, nle_imp, lengths = importance_scores(
        model, instances, decode_seed, batch_size=min(batch_size, 16)
    )
    rng = np.random.default_rng(random_seed)
    rows = []
    for k in k_grid:
        acc_t, _, _ = prediction_accuracy(
            model,
            instances,
            decode_seed,
            batch_size,
            occlusion_sets=_top_k_sets(nle_imp, lengths, k),
        )
        random_sets = _random_sets(lengths, k, rng)
        acc_r, _, nles_r = prediction_accuracy(
            model, instances, decode_seed, batch_size, occlusion_sets=random_sets
        )
        _, _, nles_t = prediction_accuracy(
            model,
            instances,
            decode_seed,
            batch_size,
            occlusion_sets=_top_k_sets(label_imp, lengths, k),
        )
        rows.append(
            {
                "k_percent": float(k),
                "acc_targeted": acc_t,
                "acc_random": acc_r,
                "sim_targeted": simulatability(sim, instances, nles_t),
                "sim_random": simulatability(sim, instances, nles_r),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# Full report
# ---------------------------------------------------------------------------


@dataclass
class FaithfulnessReport:
    comprehensiveness: float
    sufficiency: float
    simulatability: float
    acc_full: float
    robustness_curve: list[dict[str, float]]
    occlusion_curves: list[dict[str, float]]


def run_faithfulness(
    model: SelfRationalizer,
    test_instances: Sequence[Instance],
    simulator_train: Sequence[Instance],
    sigma_grid: Sequence[float] = DEFAULT_SIGMA_GRID,
    k_grid: Sequence[float] = DEFAULT_K_GRID,
    decode_seed: int = 0,
    seed: int = 0,
    batch_size: int = 32,
) -> FaithfulnessReport:
    sim = train_simulator(simulator_train, model.vocab, model.n_labels, seed=seed)
    cs = comprehensiveness_sufficiency(model, test_instances, decode_seed, batch_size)
    _, _, base_nles = prediction_accuracy(model, test_instances, decode_seed, batch_size)
    return FaithfulnessReport(
        comprehensiveness=cs["comprehensiveness"],
        sufficiency=cs["sufficiency"],
        simulatability=simulatability(sim, test_instances, base_nles),
        acc_full=cs["acc_full"],
        robustness_curve=robustness_equivalence(
            model, sim, sigma_grid, test_instances, decode_seed, batch_size=batch_size
        ),
        occlusion_curves=feature_importance_agreement(
            model, sim, k_grid, test_instances, decode_seed, batch_size=batch_size
        ),
    )
