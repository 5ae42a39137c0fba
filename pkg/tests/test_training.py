import csv
import math

import numpy as np
import pytest
import torch

from zdc_corrvae.datasets import EmptyDataset, empty_dataset, synthesize_toy_dataset
from zdc_corrvae.model import ModelConfig, init_model, load_checkpoint
from zdc_corrvae.training import (
    HISTORY_COLUMNS, LengthMismatch, LossWeights, NonFiniteLoss, TrainConfig, kl_standard_normal,
    property_loss, reconstruction_loss, total_loss, train,
)


def tiny_cfg(**kw):
    base = dict(dim_w=2, dim_z=2, dim_c=2, architecture="mlp", mlp_widths=(16,), c_width=4, head_width=4)
    base.update(kw)
    return ModelConfig(**base)


def test_kl_closed_form():
    assert kl_standard_normal(torch.zeros(1), torch.zeros(1)).item() == 0.0
    assert kl_standard_normal(torch.ones(1), torch.zeros(1)).item() == 0.5
    rng = np.random.default_rng(0)
    m, lv = rng.normal(size=(20, 5)), rng.uniform(-3, 3, size=(20, 5))
    got = kl_standard_normal(torch.tensor(m, dtype=torch.float32), torch.tensor(lv, dtype=torch.float32)).numpy()
    for r in range(20):
        want = sum(0.5 * (m[r, k] ** 2 + math.exp(lv[r, k]) - lv[r, k] - 1) for k in range(5))
        assert got[r] == pytest.approx(want, abs=1e-5)


def test_reconstruction_and_property_losses():
    zero, ones = torch.zeros(1, 44, 44), torch.ones(1, 44, 44)
    assert reconstruction_loss(zero, ones).item() == 1.0
    assert property_loss(torch.tensor([[0.5, -0.5]]), torch.tensor([[0.0, 0.0]])).item() == 0.25
    with pytest.raises(LengthMismatch):
        property_loss(torch.zeros(1, 2), torch.zeros(1, 3))


def test_total_loss_is_weighted_sum():
    cfg = tiny_cfg()
    model = init_model(cfg, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    x = torch.rand(3, 44, 44, generator=g, dtype=torch.float64)
    out = model(x, torch.randn(3, 9, generator=g, dtype=torch.float64),
                torch.randn(3, 2, generator=g, dtype=torch.float64), torch.randn(3, 2, generator=g, dtype=torch.float64))
    t = torch.zeros(3, 2, dtype=torch.float64)
    w = LossWeights(2.0, 0.5, 7.0)
    terms = total_loss(x, t, out, w)
    assert terms.total.item() == pytest.approx(
        terms.recon.item() + 2 * terms.kl_w.item() + 0.5 * terms.kl_z.item() + 7 * terms.prop.item(), abs=1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(validation_fraction=1.0)
    with pytest.raises(ValueError):
        LossWeights(beta_w=-1)


def test_train_writes_checkpoint_and_history(tmp_path):
    ds = synthesize_toy_dataset(80, seed=0)
    res = train(ds, tiny_cfg(), TrainConfig(epochs=3, batch_size=16), out_dir=tmp_path, extra={"tag": 1})
    assert len(res.history) == 3 and 1 <= res.best_epoch <= 3
    ck = load_checkpoint(tmp_path / "checkpoint.zdc1")
    assert ck.extra["best_epoch"] == res.best_epoch and ck.extra["tag"] == 1
    with open(tmp_path / "history.csv") as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0]) == HISTORY_COLUMNS and len(rows) == 3
    # the returned model is the best-epoch model
    for k, v in res.model.state_dict().items():
        assert torch.equal(v, ck.model.state_dict()[k])


def test_train_is_deterministic(tmp_path):
    ds = synthesize_toy_dataset(40, seed=1)
    a = train(ds, tiny_cfg(), TrainConfig(epochs=2, batch_size=8), out_dir=tmp_path / "a")
    b = train(ds, tiny_cfg(), TrainConfig(epochs=2, batch_size=8), out_dir=tmp_path / "b")
    for k, v in a.model.state_dict().items():
        assert torch.equal(v, b.model.state_dict()[k])
    assert [r["total"] for r in a.history] == [r["total"] for r in b.history]


def test_training_reduces_loss():
    ds = synthesize_toy_dataset(200, seed=2)
    res = train(ds, tiny_cfg(), TrainConfig(epochs=6, batch_size=32, patience=0))
    assert res.history[-1]["total"] < res.history[0]["total"]


def test_without_validation_data():
    ds = synthesize_toy_dataset(20, seed=0)
    res = train(ds, tiny_cfg(), TrainConfig(epochs=1, validation_fraction=0.0))
    assert res.history[0]["val_recon"] is None


def test_early_stopping():
    ds = synthesize_toy_dataset(40, seed=0)
    # with a negligible step the validation score stalls and patience runs out
    res = train(ds, tiny_cfg(), TrainConfig(epochs=20, learning_rate=1e-12, patience=2))
    assert len(res.history) < 20


def test_non_finite_loss_reports_last_good_epoch():
    ds = synthesize_toy_dataset(40, seed=0)
    with pytest.raises(NonFiniteLoss) as info:
        train(ds, tiny_cfg(), TrainConfig(epochs=3, learning_rate=1e30), LossWeights(lambda_prop=1e30))
    assert info.value.last_good_epoch >= 0


def test_empty_dataset_rejected():
    with pytest.raises(EmptyDataset):
        train(empty_dataset(), tiny_cfg(), TrainConfig(epochs=1))
