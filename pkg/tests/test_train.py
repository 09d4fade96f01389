import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from octfp.core import AnnotationMask, BScan, OctInstance
from octfp.network import load_checkpoint
from octfp.train import (
    TRACE_COLUMNS,
    EpochRecord,
    TrainConfig,
    assemble_training_arrays,
    gradient_check,
    loss_reconstruction,
    loss_segmentation,
    loss_total,
    make_folds,
    one_hot_labels,
    train_fold,
    write_trace_csv,
)
from oracles import cross_entropy_scalar, l2_loss_scalar

HW = (32, 96)


def tiny_cfg(**kw):
    base = dict(batch_size=4, epochs=2, seed=3, fold_count=5)
    base.update(kw)
    return TrainConfig(**base)


def random_data(n=20, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.random((n, *HW), dtype=np.float32)
    labels = rng.integers(0, 4, (n, *HW)).astype(np.uint8)
    return images, labels


# --- config ---------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    {"learning_rate": 0.0},
    {"weight_decay": -1e-5},
    {"batch_size": 0},
    {"epochs": 0},
    {"fold_count": 1},
    {"loss_weights": (1.0, 0.0)},
])
def test_config_rejects_nonpositive(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# --- folds ----------------------------------------------------------------

def test_folds_ten_items_five_folds():
    plan = make_folds(10, 5, seed=0)
    assert [len(f) for f in plan.folds] == [2] * 5


def test_folds_eleven_items_sizes():
    plan = make_folds(11, 5, seed=4)
    assert sorted(len(f) for f in plan.folds) == [2, 2, 2, 2, 3]


@given(n=st.integers(5, 60), k=st.integers(2, 5), seed=st.integers(0, 99))
@settings(max_examples=40, deadline=None)
def test_folds_partition_dataset(n, k, seed):
    if k > n:
        return
    plan = make_folds(n, k, seed)
    pooled = sorted(i for f in plan.folds for i in f)
    assert pooled == list(range(n))
    for fold in range(k):
        train = set(plan.train_indices(fold).tolist())
        test = set(plan.test_indices(fold).tolist())
        assert not train & test
        assert train | test == set(range(n))


def test_folds_deterministic_and_seed_sensitive():
    assert make_folds(23, 5, 7) == make_folds(23, 5, 7)
    assert make_folds(23, 5, 7) != make_folds(23, 5, 8)


def test_folds_reject_too_few_items():
    with pytest.raises(ValueError):
        make_folds(3, 5)


# --- losses ---------------------------------------------------------------

def test_recon_loss_identity_is_zero():
    x = torch.rand(2, 3, 8, 8)
    assert float(loss_reconstruction(x, x)) == 0.0


def test_recon_loss_unit_gap_closed_form():
    x = torch.zeros(2, 3, 4, 4)
    assert float(loss_reconstruction(x, torch.ones_like(x))) == pytest.approx(
        math.sqrt(48), rel=1e-6)


def test_recon_loss_matches_oracle():
    rng = np.random.default_rng(1)
    x = rng.random((3, 2, 5, 7))
    xr = rng.random((3, 2, 5, 7))
    want = l2_loss_scalar(list(x), list(xr))
    got = float(loss_reconstruction(torch.from_numpy(x), torch.from_numpy(xr)))
    assert got == pytest.approx(want, abs=1e-6)


def test_recon_loss_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        loss_reconstruction(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


def test_seg_loss_perfect_prediction_near_zero():
    labels = torch.from_numpy(np.random.default_rng(0).integers(0, 4, (2, 6, 6)))
    y = one_hot_labels(labels)
    assert float(loss_segmentation(y, y)) <= 1e-6


def test_seg_loss_uniform_is_ln4():
    labels = torch.zeros(1, 4, 4, dtype=torch.long)
    y = one_hot_labels(labels)
    p = torch.full_like(y, 0.25)
    assert float(loss_segmentation(y, p)) == pytest.approx(math.log(4), rel=1e-6)


def test_seg_loss_matches_oracle():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 4, (3, 4, 5))
    y = one_hot_labels(torch.from_numpy(labels))
    raw = rng.random((3, 4, 4, 5))
    p = torch.from_numpy(raw / raw.sum(axis=1, keepdims=True))
    want = cross_entropy_scalar(
        list(y.permute(0, 2, 3, 1).numpy()), list(p.permute(0, 2, 3, 1).numpy()))
    assert float(loss_segmentation(y, p)) == pytest.approx(want, abs=1e-6)


def test_seg_loss_rejects_bad_probabilities():
    y = one_hot_labels(torch.zeros(1, 3, 3, dtype=torch.long))
    with pytest.raises(ValueError):
        loss_segmentation(y, 2.0 * torch.ones_like(y))


def test_total_loss_is_weighted_sum():
    x = torch.zeros(1, 3, 4, 4)
    xr = torch.ones_like(x)
    y = one_hot_labels(torch.zeros(1, 4, 4, dtype=torch.long))
    p = torch.full_like(y, 0.25)
    a = float(loss_reconstruction(x, xr))
    b = float(loss_segmentation(y, p))
    assert float(loss_total(x, xr, y, p)) == pytest.approx(a + b, rel=1e-6)
    assert float(loss_total(x, xr, y, p, (2.0, 0.5))) == pytest.approx(
        2 * a + 0.5 * b, rel=1e-6)
    assert float(loss_total(x, x, y, y)) <= 1e-6


# --- optimizer ------------------------------------------------------------

def test_adamw_zero_grad_step_is_pure_decay():
    lr, wd = 1e-2, 1e-3
    p = torch.nn.Parameter(torch.tensor([2.0, -3.0, 0.5]))
    opt = torch.optim.AdamW([p], lr=lr, betas=(0.9, 0.999), weight_decay=wd)
    before = p.detach().clone()
    (0.0 * p.sum()).backward()
    opt.step()
    torch.testing.assert_close(p.detach(), before * (1.0 - lr * wd))


# --- gradient check -------------------------------------------------------

def test_gradient_check_passes_on_reduced_net():
    report = gradient_check(in_hw=HW, base=4, n_params=24, seed=0)
    assert len(report["checks"]) >= 20
    assert report["max_rel_error"] <= 1e-3


# --- data assembly --------------------------------------------------------

def test_assemble_pools_and_resizes():
    rng = np.random.default_rng(5)
    scans = tuple(BScan(rng.random((48, 128)), i + 1) for i in range(3))
    masks = [AnnotationMask(rng.integers(0, 4, (48, 128)).astype(np.uint8))
             for _ in range(3)]
    inst = OctInstance(scans, "s1", "f1")
    images, labels = assemble_training_arrays([(inst, masks)], out_hw=HW)
    assert images.shape == (3, *HW) and images.dtype == np.float32
    assert labels.shape == (3, *HW) and labels.dtype == np.uint8
    assert set(np.unique(labels)) <= {0, 1, 2, 3}


def test_assemble_rejects_count_mismatch():
    b = BScan(np.zeros((8, 8)))
    inst = OctInstance((b, b), "s", "f")
    with pytest.raises(ValueError):
        assemble_training_arrays([(inst, [AnnotationMask(np.zeros((8, 8), np.uint8))])])


# --- training loop --------------------------------------------------------

def test_train_fold_smoke(tmp_path):
    images, labels = random_data()
    cfg = tiny_cfg()
    plan = make_folds(images.shape[0], cfg.fold_count, cfg.seed)
    ckpt = tmp_path / "fold0.ckpt"
    net, records = train_fold(images, labels, plan, 0, cfg, base=4,
                              checkpoint_path=ckpt)
    assert len(records) == 2
    for r in records:
        assert math.isfinite(r.l_total) and r.l_d >= 0 and r.l_s >= 0
        assert 0.0 <= r.test_miou <= 1.0 and 0.0 <= r.test_pa <= 1.0
    loaded, meta = load_checkpoint(ckpt)
    assert meta["fold"] == 0 and meta["epochs_run"] == 2
    assert meta["best_epoch"] in (1, 2)


def test_train_fold_deterministic():
    images, labels = random_data()
    cfg = tiny_cfg()
    plan = make_folds(images.shape[0], cfg.fold_count, cfg.seed)
    n1, r1 = train_fold(images, labels, plan, 1, cfg, base=4)
    n2, r2 = train_fold(images, labels, plan, 1, cfg, base=4)
    assert [r.l_total for r in r1] == [r.l_total for r in r2]
    assert [r.test_miou for r in r1] == [r.test_miou for r in r2]
    s1, s2 = n1.state_dict(), n2.state_dict()
    for k in s1:
        assert torch.equal(s1[k], s2[k]), k


def test_train_fold_early_stops_on_target():
    images, labels = random_data()
    cfg = tiny_cfg(epochs=5, stop_at_miou=0.0, stop_at_pa=0.0)
    plan = make_folds(images.shape[0], cfg.fold_count, cfg.seed)
    _, records = train_fold(images, labels, plan, 0, cfg, base=4)
    assert len(records) == 1


def test_train_fold_respects_time_budget():
    images, labels = random_data()
    cfg = tiny_cfg(epochs=50, time_budget_s=1e-3)
    plan = make_folds(images.shape[0], cfg.fold_count, cfg.seed)
    _, records = train_fold(images, labels, plan, 0, cfg, base=4)
    assert len(records) == 1


def test_trace_csv_columns(tmp_path):
    rec = EpochRecord(0, 1, 0.5, 0.4, 0.9, 0.7, 0.8)
    path = write_trace_csv(tmp_path / "log.csv", [rec])
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",") == list(TRACE_COLUMNS)
    assert lines[1].startswith("0,1,0.5,0.4,0.9")
