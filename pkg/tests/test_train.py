from __future__ import annotations

import numpy as np
import pytest

from diican import autodiff as ad
from diican.dataset import SyntheticFleetConfig, generate_synthetic_fleet
from diican.errors import DivergedLoss, EmptyTrainingSet, InvalidBeta
from diican.features import fit_norm_stats
from diican.model import DIICAN, ModelConfig
from diican.train import (REPORT_HEADER, FeatureCache, TrainConfig, aggregate_rows, attention_trace,
                          combined_health_loss, export_attention, mae_loss, prepare_cell, run_loocv,
                          train_health, train_soc, write_loss_curve, write_report)


def tiny_model_config(**kw):
    base = dict(intra_hidden=8, sda_intra=(8, 2), coupling_dim=4, soc_hidden=4, history_len=4)
    base.update(kw)
    return ModelConfig.scaled(16, 20, **base)


@pytest.fixture(scope="module")
def fleet():
    return generate_synthetic_fleet(SyntheticFleetConfig(n_cells=3, cycles_per_cell=40, fade_a=5e-3, seed=5))


@pytest.fixture(scope="module")
def health_model(fleet):
    cfg = TrainConfig(epochs=3, batch_size=32, seed=1)
    model, _ = train_health(fleet[:2], cfg, tiny_model_config())
    return model


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.epochs, cfg.dropout) == (0.0008, 64, 100, 0.4)
    assert cfg.loss_weight == 0.5 and cfg.eol_threshold == 0.8


def test_combined_loss():
    assert combined_health_loss(0.2, 0.4, 0.5) == pytest.approx(0.3)
    assert combined_health_loss(0.2, 0.4, 1.0) == 0.4
    assert combined_health_loss(0.2, 0.4, 0.0) == 0.2
    for beta in (-0.1, 1.5):
        with pytest.raises(InvalidBeta):
            combined_health_loss(0.2, 0.4, beta)


@pytest.mark.parametrize("beta,silent", [(1.0, "inter.rul."), (0.0, "inter.soh.")])
def test_beta_annihilates_one_head(beta, silent, rng):
    model = DIICAN(tiny_model_config(), seed=2, dtype=np.float64)
    seq = rng.uniform(0, 1, (5, 4, 4, 20))
    soh, rul, _, _ = model.forward_inter(seq, seq[:, 0])
    loss = combined_health_loss(mae_loss(rul, rng.uniform(0, 1, 5)), mae_loss(soh, rng.uniform(0, 1, 5)), beta)
    ad.backward(loss)
    for name, p in model.params.items():
        if name.startswith(silent):
            assert np.all(p.grad == 0), name
    other = "inter.soh." if silent == "inter.rul." else "inter.rul."
    assert any(np.any(p.grad != 0) for n, p in model.params.items() if n.startswith(other))


def test_training_progress(fleet):
    train = generate_synthetic_fleet(SyntheticFleetConfig(n_cells=11, cycles_per_cell=40, fade_a=5e-3, seed=8))
    model, losses = train_health(train, TrainConfig(epochs=30, seed=0), tiny_model_config())
    assert len(losses) == 30
    assert losses[-1] < losses[0]


def test_health_determinism(fleet):
    cfg = TrainConfig(epochs=2, batch_size=32, seed=4)
    m1, l1 = train_health(fleet[:2], cfg, tiny_model_config())
    m2, l2 = train_health(fleet[:2], cfg, tiny_model_config())
    assert l1 == l2
    for k in m1.params:
        assert m1.params[k].data.tobytes() == m2.params[k].data.tobytes()


def test_zero_lr_keeps_parameters(fleet):
    mcfg = tiny_model_config()
    start = DIICAN(mcfg, seed=0)
    before = start.state_arrays()
    model, _ = train_health(fleet[:2], TrainConfig(epochs=2, learning_rate=0.0, seed=0), mcfg,
                            model=start)
    for k, v in before.items():
        np.testing.assert_array_equal(model.params[k].data, v)
    soc_model, _ = train_soc(fleet[:2], model, TrainConfig(epochs=1, learning_rate=0.0, soc_cycle_step=10))
    for k, v in before.items():
        np.testing.assert_array_equal(soc_model.params[k].data, v)


def test_health_errors(fleet):
    with pytest.raises(EmptyTrainingSet):
        train_health([], TrainConfig(epochs=1))
    with pytest.raises(EmptyTrainingSet):
        train_health(fleet[:1], TrainConfig(epochs=1), tiny_model_config(history_len=50))
    broken = DIICAN(tiny_model_config(), seed=0)
    broken.params["inter.soh.fc2.bias"].data[:] = np.nan
    with pytest.raises(DivergedLoss):
        train_health(fleet[:2], TrainConfig(epochs=1), tiny_model_config(), model=broken)


def test_soc_stage_freezes_health_branch(fleet, health_model):
    cfg = TrainConfig(epochs=4, soc_cycle_step=5, seed=0, learning_rate=0.003)
    soc_model, losses = train_soc(fleet[:2], health_model, cfg)
    for k, p in health_model.params.items():
        if k.startswith("inter."):
            assert soc_model.params[k].data.tobytes() == p.data.tobytes()
    assert any(not np.array_equal(soc_model.params[k].data, p.data)
               for k, p in health_model.params.items() if k.startswith("intra."))
    assert losses[-1] < losses[0]
    with pytest.raises(EmptyTrainingSet):
        train_soc([], health_model, cfg)


def test_ablation_shares_data_order(fleet, health_model, monkeypatch):
    seen = {True: [], False: []}
    original = DIICAN.forward_intra

    def spy(self, points, initial_point, h2_inter, training=False, rng=None, coupling=True):
        if training:
            seen[coupling].append(np.asarray(points).tobytes())
        return original(self, points, initial_point, h2_inter, training, rng, coupling)

    monkeypatch.setattr(DIICAN, "forward_intra", spy)
    cfg = TrainConfig(epochs=2, soc_cycle_step=10, seed=3)
    train_soc(fleet[:2], health_model, cfg, coupling=True)
    train_soc(fleet[:2], health_model, cfg, coupling=False)
    assert seen[True] and seen[True] == seen[False]


def test_prepare_cell_windows(fleet, health_model):
    data = prepare_cell(fleet[2], health_model.norm_stats, health_model.config, 0.8, cycle_step=10)
    assert data.inter.shape == (41, 4, 20)
    assert len(data.win_soc) == len(data.win_points) == len(data.win_cycle)
    assert set(data.win_cycle.tolist()) == {0, 10, 20, 30, 40}


def test_loocv_two_cells_tiny(fleet):
    rows = run_loocv(fleet[:2], TrainConfig(epochs=1, soc_cycle_step=10), tiny_model_config())
    assert [(r.target, r.cell_id) for r in rows] == [
        (t, c) for t in ("soh", "rul", "soc", "soc_ablated") for c in ("cell01", "cell02")]
    for r in rows:
        assert r.metrics.mae >= 0 and r.metrics.rmse >= 0 and r.metrics.r2 <= 1
    means = aggregate_rows(rows)
    assert [m.cell_id for m in means] == ["mean"] * 4


def test_attention_export(tmp_path, fleet, health_model):
    out = tmp_path / "att.csv"
    alpha = export_attention(health_model, fleet[2], out)
    lines = out.read_text().splitlines()
    assert lines[0] == "cycle_index,alpha"
    assert len(lines) - 1 == len(alpha) == 41 - health_model.config.history_len + 1
    assert lines[1].startswith(f"{health_model.config.history_len - 1},")
    assert np.all((alpha > 0) & (alpha < 1))
    cycles, a2 = attention_trace(health_model, fleet[2])
    np.testing.assert_array_equal(a2, alpha)


def test_csv_writers(tmp_path, fleet):
    rows = run_loocv(fleet[:2], TrainConfig(epochs=1), tiny_model_config(), with_soc=False)
    write_report(rows, tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text().splitlines()
    assert text[0] == ",".join(REPORT_HEADER) and len(text) == 5
    write_loss_curve([0.5, 0.25], tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text() == "epoch,loss\n1,0.5\n2,0.25\n"


def test_stats_come_from_training_cells(fleet):
    cache = FeatureCache(20)
    a = fit_norm_stats(fleet[:2], 20, inter=cache.as_dict(fleet[:2]))
    b = fit_norm_stats(fleet[:2], 20)
    assert a.to_items() == b.to_items()
