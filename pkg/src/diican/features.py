"""Inter/intra-cycle feature sets, labels, min-max scaling and LOOCV splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import CellHistory, CycleRecord, Phase
from .errors import (DegenerateFeature, EmptyPhase, EolNotReached, IndexOutOfRange,
                     TooFewCells, TooFewSamples, ZeroThroughput)

N_GRID = 100
INTER_CHANNELS = ("V_charge", "T_charge", "V_discharge", "T_discharge")
INTRA_COLUMNS = ("voltage", "current", "temperature")


def cumulative_charge(phase: Phase) -> np.ndarray:
    """Trapezoidal running integral of |I| dt, starting at 0 (ampere-seconds)."""
    a = np.abs(phase.current)
    steps = 0.5 * (a[1:] + a[:-1]) * np.diff(phase.t)
    return np.concatenate([[0.0], np.cumsum(steps)])


def capacity_grid(n_grid: int) -> np.ndarray:
    return (np.arange(n_grid) + 0.5) / n_grid


def resample_curve_by_capacity(phase: Phase, n_grid: int = N_GRID) -> np.ndarray:
    """Voltage and temperature re-indexed by transferred-charge fraction.

    Returns a ``[2, n_grid]`` array (V row, T row) sampled at the bin midpoints
    ``(k + 0.5) / n_grid``.
    """
    if len(phase) < 2:
        raise TooFewSamples(f"phase has {len(phase)} samples, need at least 2")
    q = cumulative_charge(phase)
    total = q[-1]
    if not total > 0:
        raise ZeroThroughput("no charge transferred during phase")
    ratio = q / total
    grid = capacity_grid(n_grid)
    return np.vstack([np.interp(grid, ratio, phase.voltage),
                      np.interp(grid, ratio, phase.temperature)])


@dataclass
class InterCycleFeature:
    cycle_index: int
    matrix: np.ndarray  # [4, n_grid]: V^c, T^c, V^d, T^d


def build_inter_cycle_feature(c: CycleRecord, n_grid: int = N_GRID) -> InterCycleFeature:
    rows = []
    for name, phase in (("charge", c.charge_phase), ("discharge", c.discharge_phase)):
        try:
            rows.append(resample_curve_by_capacity(phase, n_grid))
        except (TooFewSamples, ZeroThroughput) as exc:
            raise EmptyPhase(c.cycle_index, name) from exc
    m = np.vstack(rows)
    if not np.all(np.isfinite(m)):
        raise ValueError(f"non-finite inter-cycle feature in cycle {c.cycle_index}")
    return InterCycleFeature(c.cycle_index, m)


@dataclass
class InterCycleSequence:
    features: list[InterCycleFeature]
    initial: InterCycleFeature

    def __post_init__(self):
        if not self.features:
            raise ValueError("an inter-cycle sequence needs at least one feature")

    def stacked(self) -> np.ndarray:
        return np.stack([f.matrix for f in self.features])


# --- labels -------------------------------------------------------------------------


def _position(h: CellHistory, i: int) -> int:
    for pos, c in enumerate(h.cycles):
        if c.cycle_index == i:
            return pos
    raise IndexOutOfRange(f"cell {h.cell_id!r} has no cycle {i}")


def compute_soh(h: CellHistory, i: int) -> float:
    return h.cycles[_position(h, i)].discharge_capacity / h.fresh_capacity


def soh_series(h: CellHistory) -> np.ndarray:
    return h.capacities / h.fresh_capacity


# absorbs last-ulp error of Q_k / Q_0 when the fade law lands exactly on the threshold
_EOL_SLACK = 1e-12


def end_of_life_cycle(h: CellHistory, eol_threshold: float = 0.8) -> int:
    soh = soh_series(h)
    hits = np.nonzero(soh <= eol_threshold + _EOL_SLACK)[0]
    if len(hits) == 0:
        raise EolNotReached(
            f"cell {h.cell_id!r} ends at SOH {soh[-1]:.4f} above threshold {eol_threshold}")
    return int(h.cycles[hits[0]].cycle_index)


def compute_rul(h: CellHistory, i: int, eol_threshold: float = 0.8) -> int:
    _position(h, i)
    return max(end_of_life_cycle(h, eol_threshold) - i, 0)


def rul_series(h: CellHistory, eol_threshold: float = 0.8) -> np.ndarray:
    n_eol = end_of_life_cycle(h, eol_threshold)
    return np.maximum(n_eol - h.cycle_indices, 0).astype(np.float64)


@dataclass
class LabelSet:
    soh: float
    rul: int
    eol_threshold: float


def labels_for(h: CellHistory, i: int, eol_threshold: float = 0.8) -> LabelSet:
    return LabelSet(compute_soh(h, i), compute_rul(h, i, eol_threshold), eol_threshold)


def compute_soc_series(c: CycleRecord) -> np.ndarray:
    """Remaining fraction of the discharge's own throughput at each sample."""
    q = cumulative_charge(c.discharge_phase)
    if not q[-1] > 0:
        raise ZeroThroughput(f"cycle {c.cycle_index}: discharge moved no charge")
    return 1.0 - q / q[-1]


@dataclass
class IntraCycleWindow:
    points: np.ndarray         # [l, 3] voltage, current, temperature
    initial_point: np.ndarray  # [3]
    target_soc: float


def build_intra_windows(c: CycleRecord, l: int = 30, stride: int = 10) -> list[IntraCycleWindow]:
    if stride < 1 or l < 1:
        raise ValueError("window length and stride must be >= 1")
    p = c.discharge_phase
    n = len(p)
    if n < l:
        raise TooFewSamples(f"cycle {c.cycle_index}: {n} discharge samples < window {l}")
    soc = compute_soc_series(c)
    pts = np.column_stack([p.voltage, p.current, p.temperature])
    return [IntraCycleWindow(pts[s:s + l], pts[0], float(soc[s + l - 1]))
            for s in range(0, n - l + 1, stride)]


# --- min-max scaling -------------------------------------------------------------


def fit_minmax(x, axis=None, names=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature (min, max) over ``axis``; rejects constant features."""
    x = np.asarray(x, dtype=np.float64)
    lo = np.min(x, axis=axis)
    hi = np.max(x, axis=axis)
    bad = np.atleast_1d(hi <= lo)
    if bad.any():
        k = int(np.argmax(bad))
        name = names[k] if names is not None else str(k)
        raise DegenerateFeature(name)
    return lo, hi


def apply_minmax(x, lo, hi):
    return (np.asarray(x) - lo) / (hi - lo)


def invert_minmax(x, lo, hi):
    return np.asarray(x) * (hi - lo) + lo


@dataclass
class NormStats:
    inter_min: np.ndarray
    inter_max: np.ndarray
    intra_min: np.ndarray
    intra_max: np.ndarray
    rul_max: float

    def normalize_inter(self, m: np.ndarray) -> np.ndarray:
        """``m[..., 4, n_grid]`` channel-wise scaled."""
        return apply_minmax(m, self.inter_min[:, None], self.inter_max[:, None])

    def normalize_intra(self, x: np.ndarray) -> np.ndarray:
        return apply_minmax(x, self.intra_min, self.intra_max)

    def to_items(self) -> dict[str, str]:
        def enc(a):
            return ",".join(repr(float(v)) for v in np.atleast_1d(a))
        return {"inter_min": enc(self.inter_min), "inter_max": enc(self.inter_max),
                "intra_min": enc(self.intra_min), "intra_max": enc(self.intra_max),
                "rul_max": repr(float(self.rul_max))}

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "NormStats":
        def dec(s):
            return np.array([float(v) for v in s.split(",")])
        return cls(dec(items["inter_min"]), dec(items["inter_max"]),
                   dec(items["intra_min"]), dec(items["intra_max"]), float(items["rul_max"]))


def fit_norm_stats(train: list[CellHistory], n_grid: int = N_GRID,
                   eol_threshold: float = 0.8,
                   inter: dict[str, np.ndarray] | None = None) -> NormStats:
    """Scaling constants from training cells only.

    ``inter`` may carry precomputed ``{cell_id: [n_cycles, 4, n_grid]}``
    matrices to avoid re-resampling.
    """
    mats, pts, ruls = [], [], []
    for h in train:
        m = inter[h.cell_id] if inter is not None else inter_matrices(h, n_grid)
        mats.append(m.transpose(1, 0, 2).reshape(4, -1))
        # both phases: a constant-current discharge alone would make the current column degenerate
        for c in h.cycles:
            for p in (c.charge_phase, c.discharge_phase):
                pts.append(np.column_stack([p.voltage, p.current, p.temperature]))
        ruls.append(rul_series(h, eol_threshold).max())
    imin, imax = fit_minmax(np.concatenate(mats, axis=1), axis=1, names=INTER_CHANNELS)
    xmin, xmax = fit_minmax(np.concatenate(pts), axis=0, names=INTRA_COLUMNS)
    rul_max = float(max(ruls))
    if rul_max <= 0:
        raise DegenerateFeature("rul")
    return NormStats(imin, imax, xmin, xmax, rul_max)


def inter_matrices(h: CellHistory, n_grid: int = N_GRID) -> np.ndarray:
    return np.stack([build_inter_cycle_feature(c, n_grid).matrix for c in h.cycles])


# --- splits ---------------------------------------------------------------------


def make_loocv_splits(fleet: list[CellHistory]) -> list[tuple[list[CellHistory], CellHistory]]:
    if len(fleet) < 2:
        raise TooFewCells(f"leave-one-out needs at least 2 cells, got {len(fleet)}")
    return [([h for j, h in enumerate(fleet) if j != i], test) for i, test in enumerate(fleet)]

