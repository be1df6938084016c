"""Canonical cycle-data format, validation and synthetic degradation fleets.

A cell lives in a directory holding two CSV files::

    cycles.csv    cycle_index,phase,t_s,voltage_v,current_a,temperature_c
    capacity.csv  cycle_index,discharge_capacity_mah

A fleet is a directory of such cell directories, named by cell id.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (EmptyPhase, InvalidConfig, IoFailure, MalformedRow, MissingFile,
                     NonMonotoneTime)

CYCLES_HEADER = ["cycle_index", "phase", "t_s", "voltage_v", "current_a", "temperature_c"]
CAPACITY_HEADER = ["cycle_index", "discharge_capacity_mah"]
PHASES = ("charge", "discharge")


class PhaseSample(NamedTuple):
    t: float
    voltage: float
    current: float
    temperature: float


@dataclass
class Phase:
    """Column-oriented samples of one charge or discharge phase."""

    t: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    temperature: np.ndarray

    def __post_init__(self):
        for name in ("t", "voltage", "current", "temperature"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> PhaseSample:
        return PhaseSample(self.t[i], self.voltage[i], self.current[i], self.temperature[i])

    @classmethod
    def from_samples(cls, samples) -> "Phase":
        rows = list(samples)
        if not rows:
            return cls.empty()
        arr = np.asarray(rows, dtype=np.float64)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])

    @classmethod
    def empty(cls) -> "Phase":
        z = np.zeros(0)
        return cls(z, z, z, z)

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.t, self.voltage, self.current, self.temperature])


@dataclass
class CycleRecord:
    cycle_index: int
    charge_phase: Phase
    discharge_phase: Phase
    discharge_capacity: float


@dataclass
class CellHistory:
    cell_id: str
    nominal_capacity: float
    cycles: list[CycleRecord] = field(default_factory=list)

    @property
    def fresh_capacity(self) -> float:
        return self.cycles[0].discharge_capacity

    @property
    def cycle_indices(self) -> np.ndarray:
        return np.array([c.cycle_index for c in self.cycles], dtype=np.int64)

    @property
    def capacities(self) -> np.ndarray:
        return np.array([c.discharge_capacity for c in self.cycles])


# --- validation -----------------------------------------------------------------


def _phase_violations(phase: Phase, cycle_index: int, name: str) -> list[str]:
    out = []
    if len(phase) < 2:
        out.append(f"EmptyPhase cycle {cycle_index} {name}")
        return out
    if not np.all(np.diff(phase.t) > 0):
        out.append(f"NonMonotoneTime cycle {cycle_index}")
    if np.any(phase.t < 0):
        out.append(f"NegativeTime cycle {cycle_index} {name}")
    if not np.all(phase.voltage > 0):
        out.append(f"NonPositiveVoltage cycle {cycle_index} {name}")
    if not np.all(np.isfinite(phase.as_array())):
        out.append(f"NonFiniteValue cycle {cycle_index} {name}")
    return out


def validate_history(h: CellHistory) -> list[str]:
    """Every broken invariant as ``"<Rule> cycle <index>"``; empty when valid."""
    problems: list[str] = []
    if not h.cycles:
        return ["NoCycles"]
    prev = None
    for c in h.cycles:
        if prev is not None and c.cycle_index <= prev:
            problems.append(f"NonIncreasingCycleIndex cycle {c.cycle_index}")
        prev = c.cycle_index
        for name, phase in (("charge", c.charge_phase), ("discharge", c.discharge_phase)):
            for v in _phase_violations(phase, c.cycle_index, name):
                if v not in problems:
                    problems.append(v)
        if not (c.discharge_capacity > 0):
            problems.append(f"NonPositiveCapacity cycle {c.cycle_index}")
    return problems


# --- CSV I/O ----------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _fmt_exact(x: float) -> str:
    # capacities are label sources: keep them lossless so SOH/RUL survive a round trip
    return f"{x:.17g}"


def write_cell_history(h: CellHistory, directory_path) -> None:
    d = Path(directory_path)
    try:
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "cycles.csv", "w", encoding="utf-8", newline="\n") as f:
            f.write(",".join(CYCLES_HEADER) + "\n")
            for c in h.cycles:
                for name, phase in (("charge", c.charge_phase), ("discharge", c.discharge_phase)):
                    prefix = f"{c.cycle_index},{name},"
                    f.writelines(
                        prefix + f"{_fmt(t)},{_fmt(v)},{_fmt(i)},{_fmt(T)}\n"
                        for t, v, i, T in zip(phase.t.tolist(), phase.voltage.tolist(),
                                              phase.current.tolist(), phase.temperature.tolist())
                    )
        with open(d / "capacity.csv", "w", encoding="utf-8", newline="\n") as f:
            f.write(",".join(CAPACITY_HEADER) + "\n")
            for c in h.cycles:
                f.write(f"{c.cycle_index},{_fmt_exact(c.discharge_capacity)}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write cell {h.cell_id!r} to {d}: {exc}") from exc


def _read_rows(path: Path, header: list[str]):
    if not path.is_file():
        raise MissingFile(f"missing {path}")
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            first = next(reader)
        except StopIteration:
            raise MalformedRow(path, 1, "(empty file)") from None
        if [x.strip() for x in first] != header:
            raise MalformedRow(path, 1, f"(expected header {','.join(header)})")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedRow(path, lineno, f"(expected {len(header)} fields, got {len(row)})")
            yield lineno, row


def load_cell_history(directory_path, nominal_capacity: float | None = None) -> CellHistory:
    """Read one canonical cell directory.

    ``nominal_capacity`` defaults to the first cycle's measured discharge
    capacity, since the canonical files do not carry a rating.
    """
    d = Path(directory_path)
    cycles_path, cap_path = d / "cycles.csv", d / "capacity.csv"
    if not cycles_path.is_file():
        raise MissingFile(f"missing {cycles_path}")
    if not cap_path.is_file():
        raise MissingFile(f"missing {cap_path}")

    samples: dict[int, dict[str, list]] = {}
    order: list[int] = []
    for lineno, row in _read_rows(cycles_path, CYCLES_HEADER):
        try:
            idx = int(row[0])
            phase = row[1].strip()
            vals = [float(x) for x in row[2:]]
        except ValueError:
            raise MalformedRow(cycles_path, lineno, "(non-numeric field)") from None
        if phase not in PHASES or idx < 0:
            raise MalformedRow(cycles_path, lineno, f"(bad phase {phase!r} or cycle index)")
        if idx not in samples:
            samples[idx] = {"charge": [], "discharge": []}
            order.append(idx)
        samples[idx][phase].append(vals)

    capacity: dict[int, float] = {}
    for lineno, row in _read_rows(cap_path, CAPACITY_HEADER):
        try:
            capacity[int(row[0])] = float(row[1])
        except ValueError:
            raise MalformedRow(cap_path, lineno, "(non-numeric field)") from None

    cycles = []
    for idx in sorted(set(order) | set(capacity)):
        ph = samples.get(idx, {"charge": [], "discharge": []})
        built = {}
        for name in PHASES:
            rows = sorted(ph[name], key=lambda r: r[0])
            if len(rows) < 2:
                raise EmptyPhase(idx, name)
            p = Phase.from_samples(rows)
            if not np.all(np.diff(p.t) > 0):
                raise NonMonotoneTime(idx)
            built[name] = p
        if idx not in capacity:
            raise MalformedRow(cap_path, 0, f"(no capacity for cycle {idx})")
        cycles.append(CycleRecord(idx, built["charge"], built["discharge"], capacity[idx]))
    if not cycles:
        raise EmptyPhase(-1, "no cycles")
    nominal = cycles[0].discharge_capacity if nominal_capacity is None else nominal_capacity
    return CellHistory(d.name, nominal, cycles)


def write_fleet(fleet: list[CellHistory], directory_path) -> None:
    root = Path(directory_path)
    for h in fleet:
        write_cell_history(h, root / h.cell_id)


def load_fleet(directory_path) -> list[CellHistory]:
    root = Path(directory_path)
    if not root.is_dir():
        raise MissingFile(f"fleet directory {root} does not exist")
    cells = sorted(p for p in root.iterdir() if p.is_dir())
    if not cells:
        raise MissingFile(f"no cell directories under {root}")
    return [load_cell_history(p) for p in cells]


# --- synthetic fleets -----------------------------------------------------------


@dataclass
class SyntheticFleetConfig:
    """Parameters of the synthetic capacity-fade generator.

    Capacity follows ``Q_k = Q_0 (1 - a k**b)`` for cycle indices
    ``k = 0 .. cycles_per_cell`` (cycle 0 is the fresh reference). Each cell's
    ``Q_0`` and ``R0`` are jittered by up to ``jitter`` (relative) from
    seeded draws.
    """

    n_cells: int = 8
    cycles_per_cell: int = 200
    fade_a: float = 1e-3
    fade_b: float = 1.0
    resistance_base: float = 0.1
    noise_sigma: float = 0.002
    seed: int = 0
    nominal_capacity: float = 740.0
    sample_period: float = 30.0
    jitter: float = 0.1

    def validate(self) -> None:
        if self.n_cells < 1:
            raise InvalidConfig("n_cells must be positive")
        if self.cycles_per_cell < 1:
            raise InvalidConfig("cycles_per_cell must be positive")
        if self.fade_a < 0 or self.fade_b <= 0:
            raise InvalidConfig("fade law needs a >= 0 and b > 0")
        if self.fade_a * self.cycles_per_cell ** self.fade_b >= 0.5:
            raise InvalidConfig(
                f"fade law drops below 0.5*Q0 within {self.cycles_per_cell} cycles "
                f"(a={self.fade_a}, b={self.fade_b})")
        if self.resistance_base <= 0 or self.noise_sigma < 0 or self.sample_period <= 0:
            raise InvalidConfig("resistance_base and sample_period must be positive, noise_sigma >= 0")
        if not 0 <= self.jitter < 1:
            raise InvalidConfig("jitter must lie in [0, 1)")


def open_circuit_voltage(s):
    """Affine OCV used by the generator; ``s`` is the remaining-charge fraction."""
    return 3.0 + 1.2 * np.asarray(s)


def fade_capacity(q0: float, k, a: float, b: float):
    return q0 * (1.0 - a * np.power(np.asarray(k, dtype=np.float64), b))


def _time_grid(t_end: float, dt: float) -> np.ndarray:
    t = np.arange(0.0, t_end, dt)
    if t_end - t[-1] < 1e-6 * dt:
        t = t[:-1]
    return np.append(t, t_end)


def _synthetic_phase(kind: str, q_k: float, current: float, r_k: float, rho: float,
                     dt: float, noise: np.ndarray | None) -> Phase:
    # Q[mAh] = I[A] * t[s] / 3.6
    t_end = 3.6 * q_k / current
    t = _time_grid(t_end, dt)
    frac = t / t_end
    temp = 25.0 + 8.0 * rho * (1.0 - np.exp(-t / 600.0))
    if kind == "discharge":
        v = open_circuit_voltage(1.0 - frac) - current * r_k
        i = np.full_like(t, -current)
    else:
        v = open_circuit_voltage(frac) + current * r_k
        i = np.full_like(t, current)
    if noise is not None:
        v = v + noise[: len(t)]
    return Phase(t, v, i, temp)


def generate_synthetic_fleet(cfg: SyntheticFleetConfig) -> list[CellHistory]:
    """Deterministic fleet of fading cells; a pure function of ``cfg``."""
    cfg.validate()
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_cells)
    fleet = []
    for c, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        j_q, j_r = rng.uniform(-cfg.jitter, cfg.jitter, size=2)
        q0 = cfg.nominal_capacity * (1.0 + j_q)
        r0 = cfg.resistance_base * (1.0 + j_r)
        current = q0 / 1000.0  # 1C
        # longest phase is the fresh one; draw a fixed-size noise block per phase
        n_max = int(np.ceil(3600.0 / cfg.sample_period)) + 2
        cycles = []
        for k in range(cfg.cycles_per_cell + 1):
            q_k = float(fade_capacity(q0, k, cfg.fade_a, cfg.fade_b))
            r_k = r0 * (1.0 + 0.5 * (1.0 - q_k / q0))
            rho = r_k / r0
            noise = rng.normal(0.0, cfg.noise_sigma, size=(2, n_max)) if cfg.noise_sigma > 0 else None
            ch = _synthetic_phase("charge", q_k, current, r_k, rho, cfg.sample_period,
                                  None if noise is None else noise[0])
            dis = _synthetic_phase("discharge", q_k, current, r_k, rho, cfg.sample_period,
                                   None if noise is None else noise[1])
            cycles.append(CycleRecord(k, ch, dis, q_k))
        fleet.append(CellHistory(f"cell{c + 1:02d}", q0, cycles))
    return fleet


def mid_curve_slope(phase: Phase, lo: float = 0.25, hi: float = 0.75) -> float:
    """Mean |dV/dt| over the middle part (by elapsed-time fraction) of a phase."""
    frac = phase.t / phase.t[-1]
    sel = (frac >= lo) & (frac <= hi)
    dv = np.diff(phase.voltage[sel])
    dt = np.diff(phase.t[sel])
    return float(np.mean(np.abs(dv / dt)))
