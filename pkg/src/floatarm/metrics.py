"""Run-level comparisons between a learning-assisted run and its
model-based baseline.

All metrics are pure functions of RunLogs. To make a summary recomputed
from a persisted CSV bit-identical to one computed in process, every
column is first quantized through the exact CSV number format (9
significant digits); the quantization is idempotent, so CSV-loaded data
passes through unchanged.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field

import numpy as np

from .sim_engine import RunLog
from .truth_plant import Phase

EVAL_PHASES = (int(Phase.NONLINEAR), int(Phase.DISTURBED))
ESTIMATION_WINDOW_S = 60.0


class SchemaMismatch(Exception):
    """The two logs do not share a column schema."""


def quantize(values: np.ndarray) -> np.ndarray:
    """Round through the CSV representation ('%.8e'); idempotent."""
    flat = np.asarray(values, float).ravel()
    out = np.fromiter((float(f"{v:.8e}") for v in flat), dtype=float,
                      count=flat.size)
    return out.reshape(np.shape(values))


@dataclass
class RunSummary:
    """Per-phase scalars for both runs plus the cross-run comparisons."""

    per_phase_dac: dict = field(default_factory=dict)
    per_phase_baseline: dict = field(default_factory=dict)
    tracking_reduction_pct: float = 0.0
    effort_increase_pct: float = 0.0
    est_ratio_B: float = 1.0
    est_ratio_D: float = 1.0

    def to_dict(self) -> dict:
        out = {}
        for side, phases in (("dac", self.per_phase_dac),
                             ("baseline", self.per_phase_baseline)):
            for phase, vals in phases.items():
                for key, val in vals.items():
                    out[f"{side}.{phase}.{key}"] = val
        out["tracking_reduction_pct"] = self.tracking_reduction_pct
        out["effort_increase_pct"] = self.effort_increase_pct
        out["est_ratio_B"] = self.est_ratio_B
        out["est_ratio_D"] = self.est_ratio_D
        return out


def _rms(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(x * x)))


def _phase_stats(log: RunLog) -> dict:
    t = quantize(log.col("t"))
    alpha_err = quantize(log.col("alpha")) - quantize(log.col("alpha_d"))
    chi = quantize(log.col("chi"))
    phase = quantize(log.col("phase")).astype(int)
    n = sum(1 for c in log.columns if c.startswith("u") and c[1:].isdigit())
    u2 = np.zeros(log.rows)
    e2 = np.zeros(log.rows)
    for i in range(n):
        u2 += quantize(log.col(f"u{i+1}")) ** 2
        e2 += quantize(log.col(f"e_tau{i+1}")) ** 2
    enorm = np.sqrt(e2)
    stats = {}
    for ph in sorted(set(phase.tolist())):
        mask = phase == ph
        name = Phase(ph).name.lower()
        effort = float(np.trapezoid(u2[mask], t[mask])) if mask.sum() > 1 else 0.0
        stats[name] = {
            "rms_alpha_err": _rms(alpha_err[mask]),
            "effort": effort,
            "mean_e_tau": float(np.mean(enorm[mask])),
            "final_chi": float(chi[mask][-1]),
        }
    return stats


def _eval_mask(log: RunLog) -> np.ndarray:
    phase = quantize(log.col("phase")).astype(int)
    return np.isin(phase, EVAL_PHASES)


def estimation_ratios(dac: RunLog, window_s: float = ESTIMATION_WINDOW_S):
    """Relative L2 estimation-error ratios at the end of the second
    uncertainty phase, normalized by the first window of the first one."""
    t = quantize(dac.col("t"))
    phase = quantize(dac.col("phase")).astype(int)
    err_b = quantize(dac.col("err_B"))
    err_d = quantize(dac.col("err_D"))
    first = phase == int(Phase.LINEAR)
    second = phase == int(Phase.NONLINEAR)
    if not (np.any(first) and np.any(second)):
        return 1.0, 1.0
    t10 = t[first][0]
    t2e = t[second][-1]
    w0 = first & (t <= t10 + window_s)
    w1 = second & (t >= t2e - window_s)
    rb = _rms(err_b[w1]) / max(_rms(err_b[w0]), 1e-300)
    rd = _rms(err_d[w1]) / max(_rms(err_d[w0]), 1e-300)
    return float(rb), float(rd)


def compare(dac: RunLog, baseline: RunLog) -> RunSummary:
    """Paired comparison; logs must share the column schema and be from
    matched configs (same trajectory and phases), differing only in mode."""
    if dac.columns != baseline.columns:
        raise SchemaMismatch("column schemas differ")
    summary = RunSummary()
    summary.per_phase_dac = _phase_stats(dac)
    summary.per_phase_baseline = _phase_stats(baseline)

    mask_d = _eval_mask(dac)
    mask_b = _eval_mask(baseline)
    ae_d = quantize(dac.col("alpha")) - quantize(dac.col("alpha_d"))
    ae_b = quantize(baseline.col("alpha")) - quantize(baseline.col("alpha_d"))
    rms_d = _rms(ae_d[mask_d])
    rms_b = _rms(ae_b[mask_b])
    summary.tracking_reduction_pct = 100.0 * (1.0 - rms_d / rms_b) \
        if rms_b > 0 else 0.0

    n = sum(1 for c in dac.columns if c.startswith("u") and c[1:].isdigit())
    t_d = quantize(dac.col("t"))
    t_b = quantize(baseline.col("t"))
    u2_d = np.zeros(dac.rows)
    u2_b = np.zeros(baseline.rows)
    for i in range(n):
        u2_d += quantize(dac.col(f"u{i+1}")) ** 2
        u2_b += quantize(baseline.col(f"u{i+1}")) ** 2
    eff_d = float(np.trapezoid(u2_d[mask_d], t_d[mask_d]))
    eff_b = float(np.trapezoid(u2_b[mask_b], t_b[mask_b]))
    summary.effort_increase_pct = 100.0 * (eff_d / eff_b - 1.0) \
        if eff_b > 0 else 0.0

    summary.est_ratio_B, summary.est_ratio_D = estimation_ratios(dac)
    return summary


def write_summary(values: dict, path):
    """key = value lines, one per scalar (shared run/compare format)."""
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(values):
            fh.write(f"{key} = {values[key]!r}\n")


def read_summary(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                key, _, val = line.partition("=")
                out[key.strip()] = ast.literal_eval(val.strip())
    return out
