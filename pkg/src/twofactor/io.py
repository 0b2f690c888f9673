"""CSV and JSON readers/writers for paths, panels, filter output and results.

Floats are written with ``repr``, the shortest string that parses back to
the identical double. Missing quotes are empty fields.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kalman import ConfidenceBands, FilterOutput
from .model import ParamVector
from .simulate import MaturitySchedule, ObservationPanel, StatePath

__all__ = [
    "PanelFormatError",
    "fmt",
    "write_states_csv",
    "write_panel_csv",
    "read_panel_csv",
    "write_filter_csv",
    "write_bands_csv",
    "write_rows_csv",
    "write_json",
    "read_theta_json",
    "TABLE1_HEADER",
    "TABLE2_HEADER",
]

TABLE1_HEADER = ["n", "kappa", "gamma", "mu", "sigma_chi", "sigma_xi", "rho", "s", "NLL"]
TABLE2_HEADER = TABLE1_HEADER[:-1]


class PanelFormatError(ValueError):
    """A panel file could not be parsed; the message names the row and column."""


def fmt(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return ""
    return repr(value)


def _open_writer(path: Path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


def write_rows_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    fh, writer = _open_writer(Path(path))
    with fh:
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def write_states_csv(path: str | Path, states: StatePath) -> None:
    rows = zip(states.times, states.chi, states.xi)
    write_rows_csv(path, ["t", "chi", "xi"], rows)


def write_panel_csv(path: str | Path, panel: ObservationPanel) -> None:
    n = panel.n_contracts
    header = ["t", *(f"tau_{i + 1}" for i in range(n)), *(f"y_{i + 1}" for i in range(n))]
    rows = ([t, *tau, *y] for t, tau, y in zip(panel.times, panel.tau, panel.y))
    write_rows_csv(path, header, rows)


def read_panel_csv(path: str | Path) -> ObservationPanel:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelFormatError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        n = (len(header) - 1) // 2
        expected = ["t", *(f"tau_{i + 1}" for i in range(n)), *(f"y_{i + 1}" for i in range(n))]
        if n < 1 or header != expected:
            raise PanelFormatError(
                f"{path}: row 1: header must be t, tau_1..tau_n, y_1..y_n; got {','.join(header)}"
            )
        times, taus, ys = [], [], []
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise PanelFormatError(
                    f"{path}: row {rownum}: expected {len(header)} fields, found {len(row)}"
                )
            values = []
            for col, cell in zip(header, row):
                cell = cell.strip()
                if cell == "" and col.startswith("y_"):
                    values.append(math.nan)
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise PanelFormatError(
                        f"{path}: row {rownum}, column {col}: cannot parse {cell!r} as a number"
                    ) from None
                if col.startswith("tau_") and not values[-1] >= 0:
                    raise PanelFormatError(
                        f"{path}: row {rownum}, column {col}: maturity must be non-negative"
                    )
            times.append(values[0])
            taus.append(values[1 : 1 + n])
            ys.append(values[1 + n :])
    if not times:
        raise PanelFormatError(f"{path}: no data rows")
    t = np.array(times)
    if np.any(np.diff(t) <= 0):
        bad = int(np.argmax(np.diff(t) <= 0)) + 3
        raise PanelFormatError(f"{path}: row {bad}, column t: times must be strictly increasing")
    tau = np.array(taus)
    schedule = MaturitySchedule(tau, rolling=not bool(np.all(tau == tau[:1])))
    return ObservationPanel(times=t, maturities=schedule, y=np.array(ys))


def write_filter_csv(path: str | Path, out: FilterOutput) -> None:
    n = out.e.shape[1]
    header = [
        "t", "a_chi", "a_xi", "P_chi_chi", "P_chi_xi", "P_xi_xi",
        *(f"e_{i + 1}" for i in range(n)), "l_t",
    ]
    rows = (
        [t, a[0], a[1], P[0, 0], P[0, 1], P[1, 1], *e, l]
        for t, a, P, e, l in zip(out.times, out.a, out.P, out.e, out.loglik_terms)
    )
    write_rows_csv(path, header, rows)


def write_bands_csv(path: str | Path, truth: StatePath, bands: ConfidenceBands) -> None:
    header = [
        "t",
        "chi_true", "chi_hat", "chi_lo", "chi_hi",
        "xi_true", "xi_hat", "xi_lo", "xi_hi",
        "S_true", "S_hat", "S_lo", "S_hi",
    ]
    spot = np.exp(truth.chi + truth.xi)
    cols = [
        truth.times,
        truth.chi, bands.chi.mean, bands.chi.lo, bands.chi.hi,
        truth.xi, bands.xi.mean, bands.xi.lo, bands.xi.hi,
        spot, bands.spot.mean, bands.spot.lo, bands.spot.hi,
    ]
    write_rows_csv(path, header, zip(*cols))


def write_json(path: str | Path, data: dict) -> None:
    text = json.dumps(data, indent=2, sort_keys=True, allow_nan=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_theta_json(path: str | Path) -> ParamVector:
    """Parameters from a bare mapping, a simulation sidecar or an estimate file."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("theta_hat", "theta"):
        if isinstance(data, dict) and key in data:
            data = data[key]
            break
    return ParamVector.from_dict(data)
