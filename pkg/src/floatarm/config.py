"""Configuration loading: packaged defaults, optional user file, CLI
overrides, schema validation with error locations, and the round-trip
echo written next to every run's outputs.
"""

from __future__ import annotations

import importlib.resources
from pathlib import Path

import numpy as np
import yaml

from .dynamics import RobotParams
from .lhs_control import LhsGains, ApfConfig
from .sim_engine import (ScenarioConfig, Rates, Trajectory, LearnerConfig)
from .truth_plant import DisturbanceSpec


class ConfigError(Exception):
    """Invalid configuration; the message names the offending key."""


def _get(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"missing key '{where}.{key}'")
    return d[key]


def default_dict() -> dict:
    text = importlib.resources.files("floatarm").joinpath(
        "data/default.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


def merge(base: dict, override: dict, where: str = "") -> dict:
    out = dict(base)
    for key, val in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"'{path}' must be a mapping")
            out[key] = merge(base[key], val, path)
        else:
            out[key] = val
    return out


def from_dict(d: dict) -> ScenarioConfig:
    try:
        rb = _get(d, "robot", "")
        params = RobotParams(
            masses=np.asarray(_get(rb, "masses", "robot"), float),
            lengths=np.asarray(_get(rb, "lengths", "robot"), float),
            inertias=np.asarray(_get(rb, "inertias", "robot"), float),
            mount_offset=float(_get(rb, "mount_offset", "robot")))
        n = params.n
        gd = _get(d, "gains", "")
        gains = LhsGains(
            Kd=float(gd["Kd"]) * np.eye(n) if np.isscalar(gd["Kd"])
            else np.asarray(gd["Kd"], float),
            Lambda=float(gd["Lambda"]), eta=float(gd["eta"]),
            epsilon=float(gd["epsilon"]))
        ad = _get(d, "apf", "")
        apf = ApfConfig(
            obstacle_radius=float(ad["obstacle_radius"]),
            influence_dist=float(ad["influence_dist"]),
            q_lo=np.asarray(ad["q_lo"], float),
            q_hi=np.asarray(ad["q_hi"], float),
            limit_margin=float(ad["limit_margin"]),
            weight_obstacle=float(ad["weight_obstacle"]),
            weight_limits=float(ad["weight_limits"]))
        td = _get(d, "trajectory", "")
        traj = Trajectory(amp=float(td["amp"]), period=float(td["period"]))
        rd = _get(d, "rates", "")
        rates = Rates(plant_hz=int(rd["plant_hz"]), lhs_hz=int(rd["lhs_hz"]),
                      learn_hz=int(rd["learn_hz"]),
                      gains_hz=int(rd["gains_hz"]))
        ld = _get(d, "learner", "")
        learner = LearnerConfig(
            enabled=bool(ld["enabled"]), lr=float(ld["lr"]),
            batch_size=int(ld["batch_size"]),
            buffer_size=int(ld["buffer_size"]),
            expanded_features=bool(ld["expanded_features"]),
            offset_rate=float(ld["offset_rate"]),
            B_init=None if ld.get("B_init") is None
            else np.asarray(ld["B_init"], float),
            D_init_diag=None if ld.get("D_init_diag") is None
            else np.asarray(ld["D_init_diag"], float))
        dd = _get(d, "disturbance", "")
        dist = DisturbanceSpec(step=np.asarray(dd["step"], float),
                               amp=float(dd["amp"]), freq=float(dd["freq"]))
        sd = _get(d, "scenario", "")
        cfg = ScenarioConfig(
            params=params, gains=gains, apf=apf, traj=traj, rates=rates,
            learner=learner, disturbance=dist,
            phase_durations=tuple(float(x)
                                  for x in sd["phase_durations"]),
            warmup_duration=float(sd["warmup_duration"]),
            mode=str(sd["mode"]), seed=int(sd["seed"]),
            q0=np.asarray(sd["q0"], float),
            p0=np.asarray(sd["p0"], float),
            r0=np.asarray(sd["r0"], float),
            theta0=float(sd["theta0"]), Td=float(sd["Td"]),
            log_every=int(sd["log_every"]),
            use_tanh=bool(sd["use_tanh"]),
            trapezoid=bool(sd["trapezoid"]),
            chi_window_s=float(sd["chi_window_s"]),
            gain_slew_tau=float(sd["gain_slew_tau"]),
            freeze_timeout=float(sd["freeze_timeout"]),
            eigen_grid=int(sd["eigen_grid"]))
        cfg.validate()
        return cfg
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def to_dict(cfg: ScenarioConfig) -> dict:
    return {
        "robot": {
            "masses": cfg.params.masses.tolist(),
            "lengths": cfg.params.lengths.tolist(),
            "inertias": cfg.params.inertias.tolist(),
            "mount_offset": cfg.params.mount_offset,
        },
        "gains": {
            "Kd": cfg.gains.Kd.tolist(),
            "Lambda": cfg.gains.Lambda,
            "eta": cfg.gains.eta,
            "epsilon": cfg.gains.epsilon,
        },
        "apf": {
            "obstacle_radius": cfg.apf.obstacle_radius,
            "influence_dist": cfg.apf.influence_dist,
            "q_lo": cfg.apf.q_lo.tolist(),
            "q_hi": cfg.apf.q_hi.tolist(),
            "limit_margin": cfg.apf.limit_margin,
            "weight_obstacle": cfg.apf.weight_obstacle,
            "weight_limits": cfg.apf.weight_limits,
        },
        "trajectory": {"amp": cfg.traj.amp, "period": cfg.traj.period},
        "rates": {
            "plant_hz": cfg.rates.plant_hz, "lhs_hz": cfg.rates.lhs_hz,
            "learn_hz": cfg.rates.learn_hz, "gains_hz": cfg.rates.gains_hz,
        },
        "learner": {
            "enabled": cfg.learner.enabled, "lr": cfg.learner.lr,
            "batch_size": cfg.learner.batch_size,
            "buffer_size": cfg.learner.buffer_size,
            "expanded_features": cfg.learner.expanded_features,
            "offset_rate": cfg.learner.offset_rate,
            "B_init": None if cfg.learner.B_init is None
            else np.asarray(cfg.learner.B_init).tolist(),
            "D_init_diag": None if cfg.learner.D_init_diag is None
            else np.asarray(cfg.learner.D_init_diag).tolist(),
        },
        "disturbance": {
            "step": cfg.disturbance.step.tolist(),
            "amp": cfg.disturbance.amp,
            "freq": cfg.disturbance.freq,
        },
        "scenario": {
            "phase_durations": list(cfg.phase_durations),
            "warmup_duration": cfg.warmup_duration,
            "mode": cfg.mode, "seed": cfg.seed,
            "q0": cfg.q0.tolist(), "p0": cfg.p0.tolist(),
            "r0": cfg.r0.tolist(), "theta0": cfg.theta0, "Td": cfg.Td,
            "log_every": cfg.log_every, "use_tanh": cfg.use_tanh,
            "trapezoid": cfg.trapezoid, "chi_window_s": cfg.chi_window_s,
            "gain_slew_tau": cfg.gain_slew_tau,
            "freeze_timeout": cfg.freeze_timeout,
            "eigen_grid": cfg.eigen_grid,
        },
    }


def load(path: str | Path | None = None, overrides: dict | None = None
         ) -> ScenarioConfig:
    """Effective config = packaged defaults <- file <- overrides."""
    d = default_dict()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            user = yaml.safe_load(fh) or {}
        d = merge(d, user)
    if overrides:
        d = merge(d, overrides)
    return from_dict(d)


def echo(cfg: ScenarioConfig, path: str | Path):
    """Write the effective config; re-running from it reproduces the run."""
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=True)
