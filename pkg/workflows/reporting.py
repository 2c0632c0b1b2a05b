"""
Report tables and line plots built from pipeline artifacts.
"""

from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from utils.common.errors import ConfigError
from utils.common.logger import get_logger

logger = get_logger(__name__)


def trace_frame(records: Sequence[Mapping[str, Any]]) -> pd.DataFrame:
    """Search trace as a table ordered by iteration (stamp columns dropped)."""
    frame = pd.DataFrame(list(records))
    if frame.empty:
        return frame
    frame = frame.drop(columns=[c for c in ("seed", "config_hash") if c in frame.columns])
    return frame.sort_values("iter").reset_index(drop=True)


def constraint_summary(trace: pd.DataFrame, constraint_ms: float) -> Dict[str, Any]:
    """
    Final predicted-latency error and the multiplier sign check.

    Every multiplier increment must share the sign of LAT - T for the
    latency used in that step; steps with a zero increment (fixed mode,
    clamping) are not counted.
    """
    if trace.empty:
        return {"steps": 0, "final_lat_pred_ms": None, "final_error": None, "sign_violations": 0}
    lam = trace["lambda"].to_numpy(dtype=float)
    lat = trace["lat_pred_ms"].to_numpy(dtype=float)
    increments = np.diff(lam)
    violation = np.sign(lat[1:] - constraint_ms)
    moved = increments != 0
    mismatches = int(np.sum(np.sign(increments[moved]) != violation[moved]))
    final = float(lat[-1])
    return {
        "steps": int(len(trace)),
        "final_lat_pred_ms": final,
        "final_error": abs(final - constraint_ms) / constraint_ms,
        "final_lambda": float(lam[-1]),
        "sign_violations": mismatches,
    }


def check_stamps(stamps: Mapping[str, Optional[Mapping[str, Any]]], force: bool = False) -> Optional[str]:
    """
    Ensure every artifact carries the same config hash.

    Args:
        stamps: Artifact name -> {"seed", "config_hash"} (None when unstamped)
        force: Only warn on a mismatch

    Returns:
        The common hash (None if no artifact is stamped)

    Raises:
        ConfigError: On mismatched hashes unless forced
    """
    hashes = {name: s.get("config_hash") for name, s in stamps.items() if s and s.get("config_hash")}
    distinct = sorted(set(hashes.values()))
    if len(distinct) > 1:
        message = "Artifacts come from different configs: " + ", ".join(f"{k}={v}" for k, v in sorted(hashes.items()))
        if not force:
            raise ConfigError(message + " (use --force to report anyway)", key="config_hash")
        logger.warning(message)
    return distinct[0] if distinct else None


def line_plot(path: Path, x: Sequence[float], series: Mapping[str, Sequence[float]], title: str,
              xlabel: str, ylabel: str, hline: Optional[float] = None) -> Path:
    """
    Write a simple line plot as SVG.

    Falls back to a standalone HTML file when static export is unavailable.
    """
    fig = go.Figure()
    for name, values in series.items():
        fig.add_trace(go.Scatter(x=list(x), y=list(values), mode="lines", name=name))
    if hline is not None:
        fig.add_hline(y=hline, line_dash="dash", annotation_text=f"{hline:.3f}")
    fig.update_layout(title=title, xaxis_title=xlabel, yaxis_title=ylabel, template="simple_white",
                      width=720, height=420)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fig.write_image(str(path), format="svg")
        return path
    except Exception as e:
        fallback = path.with_suffix(".html")
        logger.warning(f"Static plot export unavailable ({e}); writing {fallback.name} instead")
        fig.write_html(str(fallback), include_plotlyjs="cdn")
        return fallback


def build_report(
    output_dir: Path,
    artifacts: Mapping[str, Any],
    force: bool = False,
) -> Dict[str, Any]:
    """
    Summarise whatever artifacts a run has produced.

    Args:
        output_dir: Where the CSV and plots are written
        artifacts: Loaded artifacts; recognised keys are search_result,
            search_trace, train_history, transform, verify, eval and ablation
        force: Report even when the config hashes differ

    Returns:
        Report dictionary (also the content of report.json)
    """
    output_dir = Path(output_dir)
    stamps = {name: _stamp_of(value) for name, value in artifacts.items()}
    report: Dict[str, Any] = {"config_hash": check_stamps(stamps, force), "plots": []}

    result = artifacts.get("search_result")
    trace = trace_frame(artifacts.get("search_trace") or [])
    if result is not None:
        report["search"] = {
            "arch": result["arch"],
            "constraint_ms": result["constraint_ms"],
            "oracle_latency_ms": result["oracle_latency_ms"],
            "latency_error": abs(result["oracle_latency_ms"] - result["constraint_ms"]) / result["constraint_ms"],
            "coverage": result.get("coverage"),
            "coverage_first_epoch": result.get("coverage_first_epoch"),
            **{f"trace_{k}": v for k, v in constraint_summary(trace, result["constraint_ms"]).items()},
        }
    if not trace.empty:
        trace.to_csv(output_dir / "report_trace.csv", index=False)
        report["plots"].append(line_plot(output_dir / "report_lambda.svg", trace["iter"], {"lambda": trace["lambda"]},
                                         "Latency multiplier", "iteration", "lambda").name)
        constraint = result["constraint_ms"] if result is not None else None
        report["plots"].append(line_plot(output_dir / "report_latency.svg", trace["iter"],
                                         {"predicted latency": trace["lat_pred_ms"]},
                                         "Predicted latency during search", "iteration", "ms",
                                         hline=constraint).name)

    history = artifacts.get("train_history")
    if history:
        frame = pd.DataFrame(history)
        report["train"] = {"epochs": int(len(frame)), "final_val_acc": float(frame["val_acc"].iloc[-1])}
        report["plots"].append(line_plot(output_dir / "report_accuracy.svg", frame["epoch"],
                                         {"validation accuracy": frame["val_acc"]},
                                         "Training curve", "epoch", "accuracy").name)

    for key in ("transform", "verify"):
        if artifacts.get(key) is not None:
            report[key] = {k: v for k, v in artifacts[key].items() if k not in ("seed", "config_hash")}

    evaluation = artifacts.get("eval")
    if evaluation is not None:
        rows = evaluation["resolutions"]
        report["eval"] = rows
        series = {"uncalibrated": [r["acc_uncalibrated"] for r in rows]}
        if all("acc_calibrated" in r for r in rows):
            series["calibrated"] = [r["acc_calibrated"] for r in rows]
        report["plots"].append(line_plot(output_dir / "report_elastic.svg", [r["resolution"] for r in rows], series,
                                         "Accuracy across input resolutions", "resolution", "accuracy").name)

    ablation = artifacts.get("ablation")
    if ablation is not None:
        report["ablation"] = {study: body.get("summary") for study, body in ablation.get("studies", {}).items()}
    return report


def _stamp_of(value: Any) -> Optional[Dict[str, Any]]:
    if isinstance(value, Mapping):
        return {"config_hash": value.get("config_hash"), "seed": value.get("seed")}
    if isinstance(value, list) and value and isinstance(value[0], Mapping):
        return {"config_hash": value[0].get("config_hash"), "seed": value[0].get("seed")}
    return None
