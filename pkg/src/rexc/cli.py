"""Batch command-line surface for the full pipeline.

Subcommands: gen-data, pretrain-knowledge, train, evaluate, faithfulness.
Every command validates inputs before doing any work, refuses to touch
existing non-empty output directories, snapshots its fully resolved
configuration, and exits 0 on success, 1 on user error, 2 on internal
error. Relative run directories resolve under $REXC_RUN_ROOT when set.
"""

from __future__ import annotations

import json
import os
import sys
import time
from pathlib import Path
from typing import Optional

import click
import numpy as np

from . import faithfulness as faith
from . import objective, runio, synthdata
from .backbone import ModelConfig
from .knowledge import (
    KnowledgeModel,
    PretrainSettings,
    load_knowledge,
    pretrain_knowledge,
    save_knowledge,
)
from .objective import TrainConfig
from .pipeline import SelfRationalizer, load_pipeline, save_pipeline
from .runio import UserError
from .synthdata import WorldSpec
from .vocab import Vocab

VARIANT_FLAGS = {"rexc": "rexc", "rexc-zs": "rexc_zs"}
SURFACE_FLAGS = {"rexc": "rexc", "rexc-plus": "rexc_plus", "rexc-zs": "rexc_zs"}
ABLATION_FLAGS = {"no-cs": "no_cs", "no-rationales": "no_rationales", "no-cs-sel": "no_cs_sel"}


def _resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get("REXC_RUN_ROOT")
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _load_sections(config_path: Optional[str]) -> dict[str, dict[str, str]]:
    if config_path is None:
        return {}
    return runio.read_config_sections(config_path)


def _load_split(data_dir: Path, split: str) -> list[synthdata.Instance]:
    path = data_dir / f"{split}.jsonl"
    if not path.exists():
        raise UserError(f"missing dataset split: {path}")
    return synthdata.load_external(path)


def _load_vocab(data_dir: Path) -> Vocab:
    path = data_dir / "vocab.json"
    if not path.exists():
        raise UserError(f"missing vocabulary file: {path}")
    return Vocab(json.loads(path.read_text()))


@click.group()
def cli() -> None:
    """Self-rationalizing pipeline: data, pretraining, training, evaluation."""


@cli.command("gen-data")
@click.option("--spec", "spec_path", type=str, default=None, help="INI file with a [world] section.")
@click.option("--out", "out_dir", type=str, required=True)
@click.option("--train-size", type=int, default=2000, show_default=True)
@click.option("--val-size", type=int, default=500, show_default=True)
@click.option("--test-size", type=int, default=500, show_default=True)
@click.option("--split-seed", type=int, default=0, show_default=True)
@click.option("--unseen-test-negatives", is_flag=True, default=False)
def gen_data(
    spec_path: Optional[str],
    out_dir: str,
    train_size: int,
    val_size: int,
    test_size: int,
    split_seed: int,
    unseen_test_negatives: bool,
) -> None:
    """Generate the planted world: knowledge base, triple corpus, splits."""
    sections = _load_sections(spec_path)
    spec = runio.dataclass_from_section(WorldSpec, sections.get("world", {}))
    out = runio.ensure_fresh_dir(_resolve_out(out_dir))
    kb = synthdata.gen_world(spec)
    splits = synthdata.gen_dataset(
        kb,
        n_train=train_size,
        n_val=val_size,
        n_test=test_size,
        seed=split_seed,
        unseen_test_negatives=unseen_test_negatives,
    )
    synthdata.save_world(kb, out / "kb.json")
    synthdata.save_corpus(kb.triples, out / "corpus.jsonl")
    vocab = kb.build_vocab()
    (out / "vocab.json").write_text(json.dumps(vocab.id_to_token))
    for split, instances in splits.items():
        synthdata.save_instances(instances, out / f"{split}.jsonl")
    runio.snapshot_config(
        out / "data_config.ini",
        {
            "world": spec,
            "splits": {
                "train_size": train_size,
                "val_size": val_size,
                "test_size": test_size,
                "split_seed": split_seed,
                "unseen_test_negatives": unseen_test_negatives,
            },
        },
    )
    click.echo(f"wrote knowledge base, corpus and splits to {out}")


@cli.command("pretrain-knowledge")
@click.option("--data", "data_dir", type=str, required=True)
@click.option("--config", "config_path", type=str, default=None)
@click.option("--out", "out_dir", type=str, required=True)
def pretrain_knowledge_cmd(data_dir: str, config_path: Optional[str], out_dir: str) -> None:
    """Pretrain the generative knowledge module on the triple corpus."""
    data = Path(data_dir)
    corpus_path = data / "corpus.jsonl"
    if not corpus_path.exists():
        raise UserError(f"missing triple corpus: {corpus_path}")
    triples = synthdata.load_corpus(corpus_path)
    vocab = _load_vocab(data)
    kb = synthdata.load_world(data / "kb.json")
    sections = _load_sections(config_path)
    model_config = runio.dataclass_from_section(
        ModelConfig, sections.get("model", {}), overrides={"vocab_size": len(vocab)}
    )
    settings = runio.dataclass_from_section(PretrainSettings, sections.get("knowledge", {}))
    out = runio.ensure_fresh_dir(_resolve_out(out_dir))
    started = time.monotonic()
    model, log = pretrain_knowledge(
        triples, model_config, vocab, kb.relations, entities=kb.entities, settings=settings
    )
    save_knowledge(model, out / "knowledge.pt")
    runio.write_jsonl(out / "pretrain_log.jsonl", log)
    runio.snapshot_config(out / "config.ini", {"model": model_config, "knowledge": settings})
    click.echo(
        f"pretrained knowledge model in {time.monotonic() - started:.1f}s; "
        f"final loss {log[-1]['loss']:.4f}; wrote {out / 'knowledge.pt'}"
    )


@cli.command("train")
@click.option("--data", "data_dir", type=str, required=True)
@click.option("--knowledge", "knowledge_path", type=str, default=None)
@click.option("--config", "config_path", type=str, default=None)
@click.option("--out", "run_dir", type=str, required=True)
@click.option("--variant", type=click.Choice(sorted(VARIANT_FLAGS)), default="rexc")
@click.option("--ablate", type=click.Choice(sorted(ABLATION_FLAGS)), default=None)
def train_cmd(
    data_dir: str,
    knowledge_path: Optional[str],
    config_path: Optional[str],
    run_dir: str,
    variant: str,
    ablate: Optional[str],
) -> None:
    """Train the pipeline; unset hyperparameters keep their stock defaults."""
    sections = _load_sections(config_path)
    overrides: dict = {"variant": VARIANT_FLAGS[variant]}
    if ablate is not None:
        overrides[ABLATION_FLAGS[ablate]] = True
    train_config = runio.dataclass_from_section(
        TrainConfig, sections.get("train", {}), overrides=overrides
    )
    if knowledge_path is None and not train_config.no_cs:
        raise UserError("--knowledge is required unless --ablate no-cs is given")

    data = Path(data_dir)
    train_instances = _load_split(data, "train")
    val_instances = _load_split(data, "val")
    vocab = _load_vocab(data)
    kb = synthdata.load_world(data / "kb.json")
    model_config = runio.dataclass_from_section(
        ModelConfig,
        sections.get("model", {}),
        overrides={"vocab_size": len(vocab), "seed": train_config.seed},
    )
    if knowledge_path is not None:
        knowledge = load_knowledge(knowledge_path)
        if knowledge.config.vocab_size != len(vocab):
            raise UserError("knowledge checkpoint vocabulary does not match the dataset")
    else:
        # Knowledge is ablated: a frozen random module that is never queried.
        knowledge = KnowledgeModel(model_config, vocab, kb.relations)
        knowledge.freeze()

    run = runio.create_run_dir(_resolve_out(run_dir))
    n_labels = max(ins.label for ins in train_instances) + 1
    model = SelfRationalizer(model_config, vocab, knowledge, n_labels=max(n_labels, 2))
    runio.snapshot_config(
        run / "config.ini",
        {
            "train": train_config,
            "model": model_config,
            "paths": {"data": str(data), "knowledge": knowledge_path or ""},
        },
    )
    started = time.monotonic()
    result = objective.train(model, train_instances, val_instances, train_config)
    runio.write_jsonl(run / "logs" / "steps.jsonl", result.step_log)
    runio.write_jsonl(run / "logs" / "validation.jsonl", result.val_history)
    save_pipeline(result.model, run / "checkpoints" / "best.pt")
    click.echo(
        f"trained {len(result.step_log)} steps in {time.monotonic() - started:.1f}s; "
        f"best epoch {result.best_epoch}; "
        f"{'stopped early; ' if result.stopped_early else ''}run dir {run}"
    )


def _load_run(run_dir: str) -> tuple[Path, SelfRationalizer]:
    run = _resolve_out(run_dir)
    ckpt = Path(run) / "checkpoints" / "best.pt"
    if not ckpt.exists():
        raise UserError(f"missing checkpoint: {ckpt}")
    return Path(run), load_pipeline(ckpt)


@cli.command("evaluate")
@click.option("--run", "run_dir", type=str, required=True)
@click.option("--data", "data_dir", type=str, required=True)
@click.option("--split", type=str, default="test", show_default=True)
@click.option("--surface", type=click.Choice(sorted(SURFACE_FLAGS)), default="rexc")
@click.option("--decode-seed", type=int, default=0, show_default=True)
def evaluate_cmd(
    run_dir: str, data_dir: str, split: str, surface: str, decode_seed: int
) -> None:
    """Rationale, explanation and task metrics plus prediction dumps."""
    run, model = _load_run(run_dir)
    instances = _load_split(Path(data_dir), split)
    surface_key = SURFACE_FLAGS[surface]
    variant = "rexc_zs" if surface_key == "rexc_zs" else "rexc"
    outcome = faith.evaluate_model(
        model, instances, variant=variant, surface=surface_key, decode_seed=decode_seed
    )
    reports = run / "reports"
    reports.mkdir(exist_ok=True)
    runio.write_jsonl(reports / f"predictions_{split}.jsonl", outcome.prediction_rows)
    runio.write_jsonl(reports / f"rationales_{split}.jsonl", outcome.rationale_rows)
    runio.write_jsonl(reports / f"selection_{split}.jsonl", outcome.selection_rows)
    text = runio.render_eval_report(
        outcome,
        {"run": str(run), "split": split, "surface": surface, "decode_seed": decode_seed},
    )
    (reports / f"evaluation_{split}.txt").write_text(text)
    click.echo(text, nl=False)


@cli.command("faithfulness")
@click.option("--run", "run_dir", type=str, required=True)
@click.option("--data", "data_dir", type=str, required=True)
@click.option("--split", type=str, default="test", show_default=True)
@click.option("--sigma-grid", type=str, default="0,1,5,10,25,50,100", show_default=True)
@click.option("--k-grid", type=str, default="0,10,20,50,100", show_default=True)
@click.option("--decode-seed", type=int, default=0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def faithfulness_cmd(
    run_dir: str,
    data_dir: str,
    split: str,
    sigma_grid: str,
    k_grid: str,
    decode_seed: int,
    seed: int,
) -> None:
    """Comprehensiveness, sufficiency, simulatability and agreement curves."""
    run, model = _load_run(run_dir)
    data = Path(data_dir)
    instances = _load_split(data, split)
    simulator_train = _load_split(data, "train")
    try:
        sigmas = [float(x) for x in sigma_grid.split(",") if x.strip()]
        ks = [float(x) for x in k_grid.split(",") if x.strip()]
    except ValueError as exc:
        raise UserError(f"malformed grid: {exc}") from None
    if not sigmas or not ks:
        raise UserError("grids must be non-empty")
    report = faith.run_faithfulness(
        model,
        instances,
        simulator_train,
        sigma_grid=sigmas,
        k_grid=ks,
        decode_seed=decode_seed,
        seed=seed,
    )
    reports = run / "reports"
    reports.mkdir(exist_ok=True)
    runio.write_csv(
        reports / f"robustness_{split}.csv",
        report.robustness_curve,
        ["sigma2", "stable_fraction", "simulatability"],
    )
    runio.write_csv(
        reports / f"occlusion_{split}.csv",
        report.occlusion_curves,
        ["k_percent", "acc_targeted", "acc_random", "sim_targeted", "sim_random"],
    )
    text = runio.render_faithfulness_report(
        report,
        {
            "run": str(run),
            "split": split,
            "decode_seed": decode_seed,
            "simulator_seed": seed,
            "sigma_grid": sigma_grid,
            "k_grid": k_grid,
        },
    )
    (reports / f"faithfulness_{split}.txt").write_text(text)
    click.echo(text, nl=False)


def main(argv: Optional[list[str]] = None) -> int:
    """Entry point with the documented exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return 1
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except click.exceptions.Abort:
        return 1
    except Exception as exc:  # internal failure
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
