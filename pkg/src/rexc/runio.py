"""Run-directory layout, sectioned config files, dumps and reports.

A run directory is created once and never overwritten: config snapshot at
the top, then checkpoints/, logs/, reports/. Config files are INI-style
sectioned key-value text; every hyperparameter appears under its section
with the resolved value, so a snapshot plus the same build reproduces the
run.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, get_args, get_origin

from .backbone import ModelConfig
from .knowledge import PretrainSettings
from .objective import TrainConfig
from .synthdata import WorldSpec


class UserError(ValueError):
    """Invalid input or refusal; maps to exit code 1 at the CLI."""


def create_run_dir(path: Path | str) -> Path:
    run = Path(path)
    if run.exists() and any(run.iterdir()):
        raise UserError(f"refusing to write into existing non-empty directory: {run}")
    for sub in ("checkpoints", "logs", "reports"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    return run


def ensure_fresh_dir(path: Path | str) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        raise UserError(f"refusing to write into existing non-empty directory: {out}")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Sectioned key-value configs
# ---------------------------------------------------------------------------

_SECTION_TYPES = {
    "world": WorldSpec,
    "model": ModelConfig,
    "train": TrainConfig,
    "knowledge": PretrainSettings,
}


def read_config_sections(path: Path | str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser()
    read = parser.read(str(path))
    if not read:
        raise UserError(f"config file not found: {path}")
    return {section: dict(parser[section]) for section in parser.sections()}


def _coerce(raw: str, annotation: Any) -> Any:
    origin = get_origin(annotation)
    if origin is tuple:
        inner = get_args(annotation)[0] if get_args(annotation) else str
        return tuple(_coerce(part.strip(), inner) for part in raw.split(",") if part.strip())
    if annotation is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise UserError(f"cannot parse boolean value: {raw!r}")
    if annotation is int:
        return int(raw)
    if annotation is float:
        return float(raw)
    return raw


def dataclass_from_section(
    cls, section: dict[str, str], overrides: Optional[dict[str, Any]] = None
):
    """Build a config dataclass from string key-values, defaults elsewhere."""
    known = {f.name: f.type for f in dataclasses.fields(cls)}
    type_map = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, raw in section.items():
        if key not in known:
            raise UserError(f"unknown {cls.__name__} key: {key!r}")
        field = type_map[key]
        annotation = field.type
        if isinstance(annotation, str):
            # String annotations from `from __future__ import annotations`.
            annotation = {
                "int": int,
                "float": float,
                "bool": bool,
                "str": str,
                "tuple[str, ...]": tuple[str, ...],
            }.get(annotation, str)
        kwargs[key] = _coerce(raw, annotation)
    if overrides:
        kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid [{cls.__name__}] configuration: {exc}") from None


def snapshot_config(path: Path | str, sections: dict[str, Any]) -> None:
    """Write the fully resolved configuration as sectioned key-values."""
    parser = configparser.ConfigParser()
    for name, obj in sections.items():
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            values = dataclasses.asdict(obj)
        else:
            values = dict(obj)
        parser[name] = {
            k: ",".join(str(x) for x in v) if isinstance(v, (tuple, list)) else str(v)
            for k, v in values.items()
        }
    with open(path, "w") as fh:
        parser.write(fh)


# ---------------------------------------------------------------------------
# Dumps
# ---------------------------------------------------------------------------


def write_jsonl(path: Path | str, rows: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def write_csv(path: Path | str, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in columns})


def render_eval_report(outcome, meta: dict[str, Any]) -> str:
    lines = ["evaluation report", "================="]
    for k, v in meta.items():
        lines.append(f"{k}: {v}")
    lines.append("")
    lines.append(f"instances: {outcome.n_instances}")
    lines.append(f"task_accuracy: {outcome.accuracy:.4f}")
    if outcome.rationale is not None:
        r = outcome.rationale
        lines.append(f"rationale_accuracy_exact_match: {r.accuracy:.4f}")
        lines.append(
            "rationale_token_prf: "
            f"P={r.token.precision:.4f} R={r.token.recall:.4f} F1={r.token.f1:.4f}"
        )
        lines.append(
            "rationale_iou_prf: "
            f"P={r.iou.precision:.4f} R={r.iou.recall:.4f} F1={r.iou.f1:.4f}"
        )
    for k, v in sorted(outcome.nle_metrics.items()):
        lines.append(f"nle_{k}: {v:.4f}")
    if outcome.selection_precision is not None:
        lines.append(f"knowledge_selection_precision: {outcome.selection_precision:.4f}")
    return "\n".join(lines) + "\n"


def render_faithfulness_report(report, meta: dict[str, Any]) -> str:
    lines = ["faithfulness report", "==================="]
    for k, v in meta.items():
        lines.append(f"{k}: {v}")
    lines.append("")
    lines.append(f"acc_full: {report.acc_full:.4f}")
    lines.append(f"comprehensiveness: {report.comprehensiveness:.4f}")
    lines.append(f"sufficiency: {report.sufficiency:.4f}")
    lines.append(f"simulatability: {report.simulatability:.4f}")
    lines.append("")
    lines.append("robustness curve (robustness.csv: sigma2,stable_fraction,simulatability)")
    for row in report.robustness_curve:
        lines.append(
            f"  sigma2={row['sigma2']:g} stable={row['stable_fraction']:.4f} "
            f"sim={row['simulatability']:.4f}"
        )
    lines.append(
        "occlusion curves (occlusion.csv: "
        "k_percent,acc_targeted,acc_random,sim_targeted,sim_random)"
    )
    for row in report.occlusion_curves:
        lines.append(
            f"  k={row['k_percent']:g}% acc_t={row['acc_targeted']:.4f} "
            f"acc_r={row['acc_random']:.4f} sim_t={row['sim_targeted']:.4f} "
            f"sim_r={row['sim_random']:.4f}"
        )
    return "\n".join(lines) + "\n"
