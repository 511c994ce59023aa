"""Artifact writers and summaries.

Every artifact carries the run metadata ``{"config", "seed", "version"}``:
JSON files as a top-level ``run`` entry, CSV files as a single ``#`` header
line. Output is byte-stable for a fixed (config, seed).
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from volterra_lab.analysis import first_moment_bounds
from volterra_lab.model import AssumptionReport
from volterra_lab.scheme import SchemePaths

logger: logging.Logger = logging.getLogger(__name__)

FLOAT_FORMAT: str = "%.17g"


@dataclass(frozen=True)
class RunMetadata:
    config: Dict[str, Any]
    seed: int
    version: str

    def as_dict(self) -> Dict[str, Any]:
        return {"config": self.config, "seed": self.seed, "version": self.version}


def create_metric(value: Any, unit: str, description: str) -> Dict[str, Any]:
    """Standardized metric entry; non-finite or missing values become null."""
    v: Optional[float]
    if value is None:
        v = None
    else:
        try:
            v = float(value)
        except (TypeError, ValueError):
            v = None
        if v is not None and not math.isfinite(v):
            v = None
    return {"value": v, "unit": unit, "description": description}


def to_jsonable(value: Any) -> Any:
    """Plain JSON types; NaN and infinities map to null."""
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        f = float(value)
        return f if math.isfinite(f) else None
    return value


def write_json(out_dir: Path, name: str, payload: Mapping[str, Any], meta: RunMetadata) -> Path:
    target = Path(out_dir) / name
    target.parent.mkdir(parents=True, exist_ok=True)
    document = to_jsonable({**payload, "run": meta.as_dict()})
    target.write_text(json.dumps(document, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    logger.info("Wrote %s", target)
    return target


def write_csv(out_dir: Path, name: str, frame: pd.DataFrame, meta: RunMetadata) -> Path:
    """CSV with a ``# {run metadata}`` first line, floats at full precision."""
    target = Path(out_dir) / name
    target.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(to_jsonable(meta.as_dict()), sort_keys=True, separators=(",", ":"))
    with target.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"# {header}\n")
        frame.to_csv(handle, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info("Wrote %s (%d rows)", target, len(frame))
    return target


def read_csv_artifact(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", float_precision="round_trip")


def paths_frame(paths: SchemePaths, names: Sequence[str], limit: Optional[int] = None) -> pd.DataFrame:
    """Wide dump: one row per (quantity, path), one column per fine-grid time."""
    count = paths.n_paths if limit is None else min(limit, paths.n_paths)
    times = paths.grid.fine_times
    columns = [f"t={t:.12g}" for t in times]
    frames: List[pd.DataFrame] = []
    for name in names:
        values = paths.require(name)[:count]
        frame = pd.DataFrame(values, columns=columns)
        frame.insert(0, "flagged", paths.flagged[:count])
        frame.insert(0, "path", paths.path_indices[:count])
        frame.insert(0, "quantity", name)
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=["quantity", "path", "flagged", *columns])
    return pd.concat(frames, ignore_index=True)


def _finite_min(values: np.ndarray) -> Optional[float]:
    finite = values[np.isfinite(values)]
    return float(np.min(finite)) if finite.size else None


def summarize_paths(paths: SchemePaths, assumptions: Optional[AssumptionReport] = None) -> Dict[str, Any]:
    """Positivity, moment and flag statistics of a split-scheme run."""
    valid = paths.valid
    summary: Dict[str, Any] = {
        "n_paths": paths.n_paths,
        "flagged_paths": paths.flag_count,
        "flag_rate": create_metric(paths.flag_rate, "fraction", "Share of paths aborted by the overflow guard."),
        "grid": {"T": paths.grid.T, "N": paths.grid.N, "n_sub": paths.grid.n_sub},
        "recombination_min": create_metric(
            _finite_min(paths.recombination_min[valid]), "state", "Smallest recombined left limit at a node."
        ),
        "prefloor_min": create_metric(
            _finite_min(paths.prefloor_min[valid]), "state", "Smallest inner Euler state before flooring."
        ),
        "floor_events": int(np.sum(paths.floor_events[valid])),
        "xhat_terminal_mean": create_metric(
            float(np.mean(paths.xi_left[valid, -1])) if np.any(valid) else None,
            "state",
            "Mean of Xhat at T over unflagged paths.",
        ),
    }
    for name, label in (("xi", "xi"), ("xhat", "Xhat"), ("xbar", "Xbar")):
        if getattr(paths, name) is None:
            continue
        values = paths.require(name)[valid]
        summary[f"{name}_min"] = create_metric(
            _finite_min(values), "state", f"Minimum of {label} over unflagged paths and fine-grid times."
        )
        summary[f"{name}_sup_mean"] = create_metric(
            float(np.max(paths.mean_curve(name))) if np.any(valid) else None,
            "state",
            f"Largest mean of {label} over fine-grid times.",
        )
    if "xhat_min" in summary:
        summary["positivity_min"] = summary["xhat_min"]["value"]
    if assumptions is not None:
        summary["assumptions"] = assumptions.as_dict()
        if math.isfinite(assumptions.growth_constant):
            bounds = first_moment_bounds(assumptions.growth_constant, paths.kernel, paths.grid.T, paths.x0)
            summary["moment_bounds"] = {
                "constant": bounds.constant,
                "xi_bound": bounds.xi_bound,
                "xhat_bound": bounds.xhat_bound,
            }
    return summary
