"""Command-line entry point: ``twofactor {simulate,filter,estimate,experiment}``.

Exit status is 0 on success, 1 for configuration, input or I/O errors and 2
for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .estimate import (
    DEFAULT_BOX,
    BudgetError,
    EstimationError,
    OptimizerSettings,
    SearchBox,
    TABLE_PARAMS,
    convergence_study,
    error_rows,
    estimate_full,
    table_values,
)
from .kalman import NumericalError, kf_run, state_confidence_band
from .model import TRUE_THETA, ParameterError, ParamVector, StateVec, validate_params
from .simulate import (
    MaturitySchedule,
    RngSeed,
    constant_schedule,
    make_maturity_schedule,
    simulate_observations,
    simulate_states,
)

logger = logging.getLogger("twofactor")

DEFAULT_DT = 1 / 360


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    theta: ParamVector = TRUE_THETA
    dt: float | None = None  # None: 1/360 when simulating, else inferred from panel times
    n_t: int = 2000
    contracts: int = 5
    spacing: float = 1 / 12
    rolling: bool = False
    maturities: tuple[float, ...] | None = None  # explicit constant ladder
    x0: tuple[float, float] | None = None
    box: SearchBox = DEFAULT_BOX
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    seed: int = 0
    out_dir: str = "out"
    sizes: tuple[int, ...] = (500, 1000, 2000, 4000, 6000, 8000)
    replications: int = 10
    threads: int = 1
    level: float = 0.95

    @property
    def sim_dt(self) -> float:
        return DEFAULT_DT if self.dt is None else self.dt

    def schedule(self, n_steps: int) -> MaturitySchedule:
        if self.maturities is not None:
            return constant_schedule(self.maturities, n_steps)
        return make_maturity_schedule(
            self.contracts, self.spacing, n_steps, self.sim_dt, rolling=self.rolling
        )

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.to_dict(),
            "dt": self.dt,
            "n_t": self.n_t,
            "contracts": self.contracts,
            "spacing": self.spacing,
            "rolling": self.rolling,
            "maturities": None if self.maturities is None else list(self.maturities),
            "x0": None if self.x0 is None else list(self.x0),
            "box": self.box.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "seed": self.seed,
            "sizes": list(self.sizes),
            "replications": self.replications,
            "threads": self.threads,
            "level": self.level,
        }


_KEYS = {
    "theta", "dt", "n_t", "contracts", "spacing", "rolling", "maturities", "x0",
    "box", "optimizer", "seed", "out_dir", "sizes", "replications", "threads", "level",
}


def _line_of(text: str, key: str) -> int | None:
    k = re.escape(key)
    match = re.search(rf'(?:^\s*{k}|"{k}")\s*[:=]', text, flags=re.M)
    if match is None:
        return None
    return text.count("\n", 0, match.start()) + 1


def _where(source: str, text: str, key: str) -> str:
    line = _line_of(text, key)
    return f"{source}:{line}" if line else source


def _parse_text(source: str, text: str) -> dict:
    if source.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{source}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be an object")
    return data


def build_config(data: dict, source: str = "<config>", text: str = "") -> RunConfig:
    """Validate a keyed mapping into a RunConfig; errors cite the offending line."""
    unknown = set(data) - _KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{_where(source, text, key)}: unknown key {key!r}")
    kwargs = {}
    current = None
    try:
        for key, value in data.items():
            current = key
            if value is None and key in ("dt", "maturities", "x0"):
                kwargs[key] = None
            elif key == "theta":
                base = TRUE_THETA.to_dict()
                base.update(value)
                kwargs[key] = validate_params(ParamVector.from_dict(base))
            elif key == "box":
                kwargs[key] = SearchBox.from_dict(value)
            elif key == "optimizer":
                kwargs[key] = OptimizerSettings(**value)
            elif key in ("dt", "spacing", "level"):
                kwargs[key] = float(value)
            elif key in ("n_t", "contracts", "seed", "replications", "threads"):
                if isinstance(value, bool) or int(value) != value:
                    raise ValueError(f"{key} must be an integer")
                kwargs[key] = int(value)
            elif key == "rolling":
                if not isinstance(value, bool):
                    raise ValueError("rolling must be true or false")
                kwargs[key] = value
            elif key == "maturities":
                kwargs[key] = tuple(float(v) for v in value)
            elif key == "x0":
                kwargs[key] = (float(value[0]), float(value[1]))
            elif key == "sizes":
                kwargs[key] = tuple(int(v) for v in value)
            elif key == "out_dir":
                kwargs[key] = str(value)
        current = None
        cfg = RunConfig(**kwargs)
        _check(cfg)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError, IndexError) as exc:
        key = _nested_key(str(exc), data.get(current)) or current
        where = _where(source, text, key) if key else source
        raise ConfigError(f"{where}: {exc}") from None
    return cfg


def _nested_key(message: str, value) -> str | None:
    # Point errors inside "theta" or "box" at the sub-key they name.
    if not isinstance(value, dict):
        return None
    keys = set(value) | set(value.get("ranges", {}) if isinstance(value.get("ranges"), dict) else ())
    head = re.split(r"[\s:\[]", message.strip(), maxsplit=1)[0]
    return head if head in keys else None


def _check(cfg: RunConfig) -> None:
    if cfg.dt is not None and not cfg.dt > 0:
        raise ValueError("dt must be positive")
    if cfg.n_t < 1:
        raise ValueError("n_t must be at least 1")
    if cfg.contracts < 1:
        raise ValueError("contracts must be at least 1")
    if not cfg.spacing > 0:
        raise ValueError("spacing must be positive")
    if cfg.maturities is not None and (not cfg.maturities or min(cfg.maturities) < 0):
        raise ValueError("maturities must be a non-empty list of non-negative values")
    if not cfg.sizes or list(cfg.sizes) != sorted(cfg.sizes) or min(cfg.sizes) < 1:
        raise ValueError("sizes must be ascending positive integers")
    if cfg.replications < 1 or cfg.threads < 1:
        raise ValueError("replications and threads must be at least 1")
    if not 0 < cfg.level < 1:
        raise ValueError("level must lie in (0, 1)")
    n = len(cfg.maturities) if cfg.maturities is not None else cfg.contracts
    cfg.theta.noise_sd(n)


def load_config(path: str | None, overrides: dict) -> RunConfig:
    data: dict = {}
    text = ""
    source = "<flags>"
    if path:
        source = str(path)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        data = _parse_text(source, text)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(data, source, text)


def _seeds(cfg: RunConfig) -> tuple[RngSeed, RngSeed]:
    master = RngSeed(cfg.seed)
    return master.child(0), master.child(1)


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _infer_dt(cfg: RunConfig, times: np.ndarray) -> float:
    if cfg.dt is not None:
        return cfg.dt
    steps = np.diff(times)
    if steps.size == 0:
        return float(times[0]) if times[0] > 0 else DEFAULT_DT
    return float(np.median(steps))


def cmd_simulate(cfg: RunConfig) -> dict:
    """Write states.csv, panel.csv and simulation.json."""
    dt = cfg.sim_dt
    state_seed, obs_seed = _seeds(cfg)
    x0 = StateVec(*cfg.x0) if cfg.x0 is not None else None
    path = simulate_states(cfg.theta, x0, dt, cfg.n_t, state_seed)
    panel = simulate_observations(cfg.theta, path, cfg.schedule(cfg.n_t), obs_seed)
    out = _outdir(cfg)
    io.write_states_csv(out / "states.csv", path)
    io.write_panel_csv(out / "panel.csv", panel)
    io.write_json(
        out / "simulation.json",
        {
            "theta": cfg.theta.to_dict(),
            "dt": dt,
            "n_t": cfg.n_t,
            "seed": cfg.seed,
            "streams": {"states": state_seed.stream, "observations": obs_seed.stream},
            "x0": [path.x0.chi, path.x0.xi],
            "schedule": {
                "contracts": panel.n_contracts,
                "spacing": cfg.spacing,
                "rolling": cfg.rolling,
                "maturities": None if cfg.maturities is None else list(cfg.maturities),
            },
        },
    )
    return {"path": path, "panel": panel}


def cmd_filter(cfg: RunConfig, panel_file: str, theta_file: str) -> dict:
    """Filter a panel at the parameters in ``theta_file``; writes filter_output.csv."""
    panel = io.read_panel_csv(panel_file)
    try:
        theta = validate_params(io.read_theta_json(theta_file))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{theta_file}: {exc}") from None
    dt = _infer_dt(cfg, panel.times)
    output = kf_run(theta, panel, dt)
    io.write_filter_csv(_outdir(cfg) / "filter_output.csv", output)
    print(f"NLL {output.nll!r}")
    return {"output": output, "theta": theta, "dt": dt}


def cmd_estimate(cfg: RunConfig, panel_file: str) -> dict:
    """Grid search + constrained MLE; writes estimate.json, filtered_states.csv, table1_row.csv."""
    panel = io.read_panel_csv(panel_file)
    dt = _infer_dt(cfg, panel.times)
    opts = replace(cfg.optimizer, workers=cfg.threads)
    result, output = estimate_full(panel, cfg.box, dt, opts)
    logger.info(
        "best initial values (%s): %s",
        ", ".join(io.TABLE2_HEADER),
        " ".join(f"{v:.4f}" for v in [len(panel), *table_values(result.theta0)]),
    )
    out = _outdir(cfg)
    io.write_json(out / "estimate.json", {"n_t": len(panel), "dt": dt, **result.to_dict()})
    io.write_filter_csv(out / "filtered_states.csv", output)
    row = result.table_row(len(panel))
    io.write_rows_csv(out / "table1_row.csv", io.TABLE1_HEADER, [row])
    print(",".join(io.TABLE1_HEADER))
    print(",".join(io.fmt(v) for v in row))
    return {"result": result, "output": output, "dt": dt}


def cmd_experiment(cfg: RunConfig) -> dict:
    """Convergence study over ``sizes``; writes errors.csv, table1.csv, bands.csv."""
    dt = cfg.sim_dt
    master = RngSeed(cfg.seed)
    maturities = cfg.maturities
    records = convergence_study(
        cfg.theta,
        cfg.sizes,
        cfg.replications,
        master,
        dt=dt,
        n_contracts=cfg.contracts,
        spacing=cfg.spacing,
        rolling=cfg.rolling,
        maturities=maturities,
        box=cfg.box,
        opts=cfg.optimizer,
        workers=cfg.threads,
    )
    out = _outdir(cfg)
    errors = error_rows(records, cfg.theta)
    io.write_rows_csv(out / "errors.csv", ["n_t", "replication", "param", "error"], errors)

    table = []
    for n_t in cfg.sizes:
        done = [r.result for r in records if r.n_t == n_t and r.result is not None]
        if not done:
            table.append([n_t, *([float("nan")] * (len(TABLE_PARAMS) + 1))])
            continue
        values = np.array([table_values(r.theta_hat) + [r.nll] for r in done])
        table.append([n_t, *values.mean(axis=0)])
    io.write_rows_csv(out / "table1.csv", io.TABLE1_HEADER, table)

    # Bands at the true parameters on the largest sample's first replication.
    cell = master.child(len(cfg.sizes) - 1, 0)
    n_t = cfg.sizes[-1]
    path = simulate_states(cfg.theta, None, dt, n_t, cell.child(0))
    schedule = cfg.schedule(n_t)
    panel = simulate_observations(cfg.theta, path, schedule, cell.child(1))
    bands = state_confidence_band(kf_run(cfg.theta, panel, dt), cfg.level)
    io.write_bands_csv(out / "bands.csv", path, bands)
    failed = sum(r.result is None for r in records)
    print(f"{len(records)} runs, {failed} failed; results in {out}")
    return {"records": records, "errors": errors, "table": table, "bands": bands}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON (or .toml) config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--nt", dest="n_t", type=int, help="number of time points")
    common.add_argument("--contracts", type=int)
    common.add_argument("--dt", type=float)
    common.add_argument("--threads", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="twofactor", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate states and a futures panel")
    p = sub.add_parser("filter", parents=[common], help="run the Kalman filter on a panel")
    p.add_argument("panel")
    p.add_argument("theta", help="JSON file with parameters")
    p = sub.add_parser("estimate", parents=[common], help="grid search + MLE on a panel")
    p.add_argument("panel")
    sub.add_parser("experiment", parents=[common], help="run the simulation study")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {
        "seed": args.seed,
        "out_dir": args.out_dir,
        "n_t": args.n_t,
        "contracts": args.contracts,
        "dt": args.dt,
        "threads": args.threads,
    }
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "filter":
            cmd_filter(cfg, args.panel, args.theta)
        elif args.command == "estimate":
            cmd_estimate(cfg, args.panel)
        else:
            cmd_experiment(cfg)
    except (ConfigError, ParameterError, BudgetError, io.PanelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, EstimationError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
