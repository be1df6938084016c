"""Two-stage training (health, then state-coupled SOC), evaluation, LOOCV and
attention export."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .dataset import CellHistory
from .errors import DivergedLoss, EmptyTrainingSet, InvalidBeta, IoFailure, ZeroDenominator
from .features import (NormStats, build_intra_windows, fit_norm_stats, inter_matrices,
                       make_loocv_splits, rul_series, soh_series)
from .metrics import Metrics, evaluate_metrics, r2_score
from .model import DIICAN, ModelConfig
from .optim import AdamW

log = logging.getLogger(__name__)

# MAPE skips near-zero observations, where the ratio blows up
RUL_MAPE_FLOOR = 10.0
SOC_MAPE_FLOOR = 0.05


@dataclass
class TrainConfig:
    learning_rate: float = 0.0008
    batch_size: int = 64
    epochs: int = 100
    dropout: float = 0.4
    loss_weight: float = 0.5
    seed: int = 0
    eol_threshold: float = 0.8
    weight_decay: float = 0.01
    soc_epochs: int | None = None
    soc_cycle_step: int = 1

    @property
    def n_soc_epochs(self) -> int:
        return self.epochs if self.soc_epochs is None else self.soc_epochs


def combined_health_loss(loss_rul, loss_soh, beta: float):
    """``(1 - beta) * loss_RUL + beta * loss_SOH``."""
    if not 0.0 <= beta <= 1.0:
        raise InvalidBeta(f"loss weight must lie in [0, 1], got {beta}")
    return (1.0 - beta) * loss_rul + beta * loss_soh


def mae_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return ad.absolute(pred - Tensor(np.asarray(target, dtype=pred.dtype))).mean()


# --- per-cell tensors -----------------------------------------------------------------


@dataclass
class CellData:
    """Normalised model inputs and raw labels of one cell."""

    cell_id: str
    cycle_index: np.ndarray
    inter: np.ndarray                  # [n_cycles, 4, n_grid]
    soh: np.ndarray
    rul: np.ndarray                    # cycles
    win_points: np.ndarray = field(default=None)   # [m, l, 3]
    win_anchor: np.ndarray = field(default=None)   # [m, 3]
    win_soc: np.ndarray = field(default=None)      # [m]
    win_cycle: np.ndarray = field(default=None)    # [m] position into cycles


class FeatureCache:
    """Raw (un-normalised) inter-cycle matrices, computed once per cell."""

    def __init__(self, n_grid: int):
        self.n_grid = n_grid
        self._store: dict[str, np.ndarray] = {}

    def get(self, h: CellHistory) -> np.ndarray:
        if h.cell_id not in self._store:
            self._store[h.cell_id] = inter_matrices(h, self.n_grid)
        return self._store[h.cell_id]

    def as_dict(self, cells) -> dict[str, np.ndarray]:
        return {h.cell_id: self.get(h) for h in cells}


def prepare_cell(h: CellHistory, stats: NormStats, mcfg: ModelConfig, eol_threshold: float,
                 cache: FeatureCache | None = None, windows: bool = True,
                 cycle_step: int = 1) -> CellData:
    raw = cache.get(h) if cache is not None else inter_matrices(h, mcfg.n_grid)
    data = CellData(h.cell_id, h.cycle_indices, stats.normalize_inter(raw).astype(np.float32),
                    soh_series(h), rul_series(h, eol_threshold))
    if windows:
        pts, anc, soc, pos = [], [], [], []
        for k in range(0, len(h.cycles), cycle_step):
            ws = build_intra_windows(h.cycles[k], mcfg.window_len, mcfg.window_stride)
            pts.extend(w.points for w in ws)
            anc.extend(w.initial_point for w in ws)
            soc.extend(w.target_soc for w in ws)
            pos.extend([k] * len(ws))
        data.win_points = stats.normalize_intra(np.array(pts)).astype(np.float32)
        data.win_anchor = stats.normalize_intra(np.array(anc)).astype(np.float32)
        data.win_soc = np.array(soc)
        data.win_cycle = np.array(pos, dtype=np.int64)
    return data


def _sequence_index(cells: list[CellData], L: int) -> np.ndarray:
    """(cell, end position) pairs of every full-length history window."""
    rows = [(c, pos) for c, d in enumerate(cells) for pos in range(L - 1, len(d.soh))]
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def _gather_sequences(cells: list[CellData], idx: np.ndarray, L: int):
    seq = np.stack([cells[c].inter[pos - L + 1:pos + 1] for c, pos in idx])
    init = np.stack([cells[c].inter[0] for c, _ in idx])
    return seq, init


def _rngs(seed: int):
    order, drop = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(order), np.random.default_rng(drop)


def _check_finite(value: float, epoch: int):
    if not np.isfinite(value):
        raise DivergedLoss(f"loss became non-finite at epoch {epoch}")


# --- stage 1: SOH / RUL ------------------------------------------------------------------


def train_health(fleet_train: list[CellHistory], cfg: TrainConfig, mcfg: ModelConfig | None = None,
                 stats: NormStats | None = None, cache: FeatureCache | None = None,
                 model: DIICAN | None = None):
    """Fit the inter-cycle branch; returns ``(model, per-epoch mean losses)``."""
    if not fleet_train:
        raise EmptyTrainingSet("no training cells")
    mcfg = replace(mcfg or ModelConfig(), dropout=cfg.dropout, loss_weight=cfg.loss_weight)
    cache = cache or FeatureCache(mcfg.n_grid)
    if stats is None:
        stats = fit_norm_stats(fleet_train, mcfg.n_grid, cfg.eol_threshold, cache.as_dict(fleet_train))
    cells = [prepare_cell(h, stats, mcfg, cfg.eol_threshold, cache, windows=False) for h in fleet_train]
    L = mcfg.history_len
    index = _sequence_index(cells, L)
    if len(index) == 0:
        raise EmptyTrainingSet(f"no cell has {L} cycles for a full history window")

    model = model or DIICAN(mcfg, seed=cfg.seed)
    model.norm_stats = stats
    params = model.inter_params()
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    order_rng, drop_rng = _rngs(cfg.seed)
    losses = []
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(index))
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            batch = index[perm[start:start + cfg.batch_size]]
            seq, init = _gather_sequences(cells, batch, L)
            soh_t = np.array([cells[c].soh[p] for c, p in batch])
            rul_t = np.array([cells[c].rul[p] for c, p in batch]) / stats.rul_max
            opt.zero_grad()
            soh, rul, _, _ = model.forward_inter(seq, init, training=True, rng=drop_rng)
            loss = combined_health_loss(mae_loss(rul, rul_t), mae_loss(soh, soh_t), cfg.loss_weight)
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(batch)
        mean_loss = total / len(index)
        _check_finite(mean_loss, epoch)
        losses.append(mean_loss)
        log.info("health epoch %d loss %.6f", epoch + 1, mean_loss)
    return model, losses


def predict_health(model: DIICAN, cell: CellData, chunk: int = 256):
    """SOH and RUL (cycles) for every full history window of ``cell``."""
    L = model.config.history_len
    idx = _sequence_index([cell], L)
    soh, rul, h2, alpha = [], [], [], []
    with no_grad():
        for s in range(0, len(idx), chunk):
            seq, init = _gather_sequences([cell], idx[s:s + chunk], L)
            a, b, c, d = model.forward_inter(seq, init)
            soh.append(a.data)
            rul.append(b.data)
            h2.append(c.data)
            alpha.append(d.data)
    if not soh:
        return np.zeros(0), np.zeros(0), np.zeros((0, model.config.inter_hidden)), np.zeros((0, L)), idx[:, 1]
    return (np.concatenate(soh).astype(np.float64),
            np.concatenate(rul).astype(np.float64) * model.norm_stats.rul_max,
            np.concatenate(h2), np.concatenate(alpha), idx[:, 1])


def coupling_states(model: DIICAN, cell: CellData) -> np.ndarray:
    """Final inter-cycle AUGRU state for every cycle of ``cell``.

    Cycles with fewer than ``history_len`` predecessors use the shorter
    history available up to them.
    """
    L = model.config.history_len
    n = len(cell.soh)
    out = np.zeros((n, model.config.inter_hidden), dtype=np.float32)
    with no_grad():
        for pos in range(min(L - 1, n)):
            _, _, h2, _ = model.forward_inter(cell.inter[None, :pos + 1], cell.inter[None, 0])
            out[pos] = h2.data[0]
    if n >= L:
        _, _, h2, _, pos = predict_health(model, cell)
        out[pos] = h2
    return out


# --- stage 2: SOC ---------------------------------------------------------------------------


def _soc_tables(model: DIICAN, cells: list[CellData]):
    points = np.concatenate([c.win_points for c in cells])
    anchors = np.concatenate([c.win_anchor for c in cells])
    soc = np.concatenate([c.win_soc for c in cells])
    coupling = np.concatenate([coupling_states(model, c)[c.win_cycle] for c in cells])
    return points, anchors, soc, coupling


def train_soc(fleet_train: list[CellHistory], inter_model: DIICAN, cfg: TrainConfig,
              coupling: bool = True, cache: FeatureCache | None = None,
              prepared: list[CellData] | None = None):
    """Fit the intra-cycle branch against a frozen inter-cycle branch.

    Returns ``(model, per-epoch mean losses)``; the returned model is a copy
    whose inter-cycle parameters equal ``inter_model``'s.
    """
    if not fleet_train:
        raise EmptyTrainingSet("no training cells")
    model = inter_model.copy()
    mcfg = model.config
    mcfg.dropout = cfg.dropout
    stats = model.norm_stats
    if prepared is None:
        prepared = [prepare_cell(h, stats, mcfg, cfg.eol_threshold, cache,
                                 cycle_step=cfg.soc_cycle_step) for h in fleet_train]
    points, anchors, soc, coup = _soc_tables(model, prepared)
    if len(soc) == 0:
        raise EmptyTrainingSet("no intra-cycle windows")
    opt = AdamW(model.intra_params(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    order_rng, drop_rng = _rngs(cfg.seed)
    losses = []
    for epoch in range(cfg.n_soc_epochs):
        perm = order_rng.permutation(len(soc))
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            b = perm[start:start + cfg.batch_size]
            opt.zero_grad()
            pred = model.forward_intra(points[b], anchors[b], coup[b], training=True,
                                       rng=drop_rng, coupling=coupling)
            loss = mae_loss(pred, soc[b])
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(b)
        mean_loss = total / len(soc)
        _check_finite(mean_loss, epoch)
        losses.append(mean_loss)
        log.info("soc epoch %d loss %.6f", epoch + 1, mean_loss)
    return model, losses


def predict_soc(model: DIICAN, cell: CellData, coupling: bool = True, chunk: int = 512) -> np.ndarray:
    coup = coupling_states(model, cell)[cell.win_cycle]
    out = []
    with no_grad():
        for s in range(0, len(cell.win_soc), chunk):
            sl = slice(s, s + chunk)
            out.append(model.forward_intra(cell.win_points[sl], cell.win_anchor[sl], coup[sl],
                                           coupling=coupling).data)
    return np.concatenate(out).astype(np.float64)


# --- evaluation ------------------------------------------------------------------------------


@dataclass
class ReportRow:
    target: str
    cell_id: str
    metrics: Metrics
    r2_alt: float = float("nan")   # the other R^2 definition, for verbose output

    def csv_fields(self) -> list[str]:
        m = self.metrics
        return [self.target, self.cell_id] + [f"{v:.10g}" for v in (m.mae, m.mape, m.rmse, m.r2)]


REPORT_HEADER = ["target", "cell_id", "mae", "mape", "rmse", "r2"]


def _row(target, cell_id, y, y_hat, conventional_r2, mape_mask=None) -> ReportRow:
    try:
        alt = r2_score(y, y_hat, not conventional_r2)
    except ZeroDenominator:
        alt = float("nan")
    return ReportRow(target, cell_id, evaluate_metrics(y, y_hat, conventional_r2, mape_mask), alt)


def evaluate_health(model: DIICAN, cell: CellData, conventional_r2: bool = False) -> list[ReportRow]:
    soh_hat, rul_hat, _, _, pos = predict_health(model, cell)
    soh, rul = cell.soh[pos], cell.rul[pos]
    return [
        _row("soh", cell.cell_id, soh, soh_hat, conventional_r2),
        _row("rul", cell.cell_id, rul, rul_hat, conventional_r2, rul >= RUL_MAPE_FLOOR),
    ]


def evaluate_soc(model: DIICAN, cell: CellData, coupling: bool = True, conventional_r2: bool = False,
                 target: str = "soc") -> ReportRow:
    pred = predict_soc(model, cell, coupling)
    y = cell.win_soc
    return _row(target, cell.cell_id, y, pred, conventional_r2, y >= SOC_MAPE_FLOOR)


def aggregate_rows(rows: list[ReportRow]) -> list[ReportRow]:
    """Mean of each metric per target, as extra ``cell_id='mean'`` rows."""
    out = []
    for target in dict.fromkeys(r.target for r in rows):
        ms = np.array([tuple(r.metrics) for r in rows if r.target == target])
        alt = float(np.nanmean([r.r2_alt for r in rows if r.target == target]))
        out.append(ReportRow(target, "mean", Metrics(*np.nanmean(ms, axis=0).tolist()), alt))
    return out


def write_report(rows: list[ReportRow], path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in rows:
                w.writerow(r.csv_fields())
    except OSError as exc:
        raise IoFailure(f"cannot write report {path}: {exc}") from exc


def write_loss_curve(losses, path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("epoch,loss\n")
            for k, v in enumerate(losses, start=1):
                f.write(f"{k},{v:.10g}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write loss curve {path}: {exc}") from exc


@dataclass
class SplitResult:
    rows: list[ReportRow]
    health_losses: list[float]
    soc_losses: dict[str, list[float]]


def run_split(train: list[CellHistory], test: CellHistory, cfg: TrainConfig, mcfg: ModelConfig,
              with_soc: bool = True, conventional_r2: bool = False) -> SplitResult:
    """Train on ``train`` and evaluate every target on the held-out ``test`` cell."""
    cache = FeatureCache(mcfg.n_grid)
    stats = fit_norm_stats(train, mcfg.n_grid, cfg.eol_threshold, cache.as_dict(train))
    model, h_losses = train_health(train, cfg, mcfg, stats=stats, cache=cache)
    test_data = prepare_cell(test, stats, model.config, cfg.eol_threshold, cache, windows=with_soc)
    rows = evaluate_health(model, test_data, conventional_r2)
    soc_losses = {}
    if with_soc:
        prepared = [prepare_cell(h, stats, model.config, cfg.eol_threshold, cache,
                                 cycle_step=cfg.soc_cycle_step) for h in train]
        for name, coupled in (("soc", True), ("soc_ablated", False)):
            soc_model, soc_losses[name] = train_soc(train, model, cfg, coupling=coupled,
                                                    prepared=prepared)
            rows.append(evaluate_soc(soc_model, test_data, coupled, conventional_r2, target=name))
    return SplitResult(rows, h_losses, soc_losses)


def _split_job(args):
    fleet, i, cfg, mcfg, with_soc, conventional_r2 = args
    train, test = make_loocv_splits(fleet)[i]
    return run_split(train, test, cfg, mcfg, with_soc, conventional_r2)


def run_loocv(fleet: list[CellHistory], cfg: TrainConfig, mcfg: ModelConfig | None = None,
              with_soc: bool = True, conventional_r2: bool = False, jobs: int = 1) -> list[ReportRow]:
    """Leave-one-cell-out protocol; rows are grouped by target, cells in fleet order."""
    mcfg = mcfg or ModelConfig()
    splits = make_loocv_splits(fleet)
    jobs_args = [(fleet, i, cfg, mcfg, with_soc, conventional_r2) for i in range(len(splits))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_split_job, jobs_args))
    else:
        results = [_split_job(a) for a in jobs_args]
    rows = [r for res in results for r in res.rows]
    targets = list(dict.fromkeys(r.target for r in rows))
    return [r for t in targets for r in rows if r.target == t]


# --- attention export ----------------------------------------------------------------------


def attention_trace(model: DIICAN, cell: CellHistory, eol_threshold: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Last-step attention weight of every full history window, by cycle index."""
    stats = model.norm_stats
    raw = inter_matrices(cell, model.config.n_grid)
    data = CellData(cell.cell_id, cell.cycle_indices, stats.normalize_inter(raw).astype(np.float32),
                    soh_series(cell), np.zeros(len(cell.cycles)))
    _, _, _, alpha, pos = predict_health(model, data)
    return cell.cycle_indices[pos], alpha[:, -1].astype(np.float64)


def export_attention(model: DIICAN, cell: CellHistory, out_path) -> np.ndarray:
    cycles, alpha = attention_trace(model, cell)
    try:
        with open(out_path, "w", encoding="utf-8", newline="\n") as f:
            f.write("cycle_index,alpha\n")
            for c, a in zip(cycles.tolist(), alpha.tolist()):
                f.write(f"{c},{a:.10g}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write attention trace {out_path}: {exc}") from exc
    return alpha
