"""Training loop for the dual-branch network.

Five-fold cross-validation over annotated bonafide B-scans. The objective
combines a per-sample L2 reconstruction loss with per-pixel categorical
cross-entropy on the segmentation probabilities; optimization is Adam with
decoupled weight decay. Per epoch the held-out fold is scored with mIOU and
pixel accuracy, and the parameters of the best-mIOU epoch are kept.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import N_CLASSES, NET_SHAPE, resize_to_network
from .metrics import confusion_matrix, miou, pixel_accuracy
from .network import REFERENCE_BASE, SegmentationNet, build_network, save_checkpoint

PROB_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-5
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    fold_count: int = 5
    loss_weights: tuple = (1.0, 1.0)
    # Optional bounds on a run: stop after the first epoch that exhausts the
    # wall-clock budget, or once every provided quality target is met.
    time_budget_s: Optional[float] = None
    stop_at_miou: Optional[float] = None
    stop_at_pa: Optional[float] = None

    def __post_init__(self):
        positives = {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
        }
        for name, v in positives.items():
            if v <= 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if self.fold_count < 2:
            raise ValueError(f"fold_count must be at least 2, got {self.fold_count}")
        w_d, w_s = self.loss_weights
        if w_d <= 0 or w_s <= 0:
            raise ValueError(f"loss weights must be positive, got {self.loss_weights}")


@dataclass(frozen=True)
class FoldPlan:
    """Test-index lists per fold; training uses the complement."""

    folds: tuple
    size: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.asarray(self.folds[fold], dtype=np.int64)

    def train_indices(self, fold: int) -> np.ndarray:
        held = set(self.folds[fold])
        return np.asarray([i for i in range(self.size) if i not in held],
                          dtype=np.int64)


def make_folds(n: int, fold_count: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle, then deal round-robin so remainders spread one per fold."""
    if fold_count > n:
        raise ValueError(f"cannot split {n} items into {fold_count} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = tuple(tuple(sorted(int(i) for i in perm[k::fold_count]))
                  for k in range(fold_count))
    return FoldPlan(folds=folds, size=n)


# ---------------------------------------------------------------------------
# losses


def loss_reconstruction(x: torch.Tensor, x_recon: torch.Tensor) -> torch.Tensor:
    """Per-sample root of the summed squared error, averaged over the batch."""
    if x.shape != x_recon.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_recon.shape)}")
    d = (x - x_recon).reshape(x.shape[0], -1)
    return d.pow(2).sum(dim=1).sqrt().mean()


def loss_segmentation(target: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Categorical cross-entropy against one-hot targets, mean over every
    pixel of every sample. Probabilities are clamped away from 0 and 1."""
    if target.shape != probs.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(probs.shape)}")
    p_range = probs.detach()
    if float(p_range.min()) < -1e-6 or float(p_range.max()) > 1.0 + 1e-6:
        raise ValueError("predicted probabilities outside [0,1]")
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(target * p.log()).sum(dim=1).mean()


def loss_total(x, x_recon, target, probs, weights=(1.0, 1.0)) -> torch.Tensor:
    w_d, w_s = weights
    return (w_d * loss_reconstruction(x, x_recon)
            + w_s * loss_segmentation(target, probs))


def one_hot_labels(labels: torch.Tensor) -> torch.Tensor:
    """(B,H,W) integer labels to (B,C,H,W) float one-hot."""
    return F.one_hot(labels.long(), N_CLASSES).permute(0, 3, 1, 2).float()


# ---------------------------------------------------------------------------
# data assembly


def assemble_training_arrays(pairs, out_hw=NET_SHAPE):
    """Pool every annotated B-scan into flat arrays sized for the network.

    pairs: iterable of (OctInstance, masks). Returns (images float32 NxHxW,
    labels uint8 NxHxW).
    """
    images, labels = [], []
    for instance, masks in pairs:
        if len(masks) != len(instance):
            raise ValueError(
                f"{instance.instance_id}: {len(masks)} masks for "
                f"{len(instance)} B-scans")
        for b, m in zip(instance.bscans, masks):
            rb, rm = resize_to_network(b, m, out_hw)
            images.append(rb.pixels.astype(np.float32))
            labels.append(rm.labels)
    if not images:
        raise ValueError("no annotated B-scans to train on")
    return np.stack(images), np.stack(labels)


def _batches(indices: np.ndarray, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def _gather_batch(images: torch.Tensor, idx: np.ndarray) -> torch.Tensor:
    x = images[torch.from_numpy(idx)].unsqueeze(1)
    return x.expand(-1, 3, -1, -1).contiguous(memory_format=torch.channels_last)


def evaluate_segmentation(net: SegmentationNet, images: torch.Tensor,
                          labels: torch.Tensor, indices: np.ndarray,
                          batch_size: int) -> tuple[float, float]:
    """mIOU and pixel accuracy over one confusion matrix for all indices."""
    net.eval()
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    with torch.no_grad():
        for idx in _batches(indices, batch_size):
            pred = net(_gather_batch(images, idx))["seg"].argmax(dim=1)
            true = labels[torch.from_numpy(idx)]
            cm += confusion_matrix(true.numpy().ravel(),
                                   pred.numpy().ravel(), N_CLASSES)
    return miou(cm), pixel_accuracy(cm)


@dataclass
class EpochRecord:
    fold: int
    epoch: int
    l_d: float
    l_s: float
    l_total: float
    test_miou: float
    test_pa: float


TRACE_COLUMNS = ("fold", "epoch", "L_D", "L_S", "L", "test_mIOU", "test_PA")


def write_trace_csv(path: Path, records: Sequence[EpochRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACE_COLUMNS)
        for r in records:
            w.writerow([r.fold, r.epoch, repr(r.l_d), repr(r.l_s),
                        repr(r.l_total), repr(r.test_miou), repr(r.test_pa)])
    return path


def train_fold(images: np.ndarray, labels: np.ndarray, plan: FoldPlan,
               fold: int, cfg: TrainConfig, base: int = REFERENCE_BASE,
               checkpoint_path: Optional[Path] = None,
               log=None) -> tuple[SegmentationNet, list]:
    """Train one fold to the best-test-mIOU parameters.

    Returns (net loaded with the best parameters, per-epoch records). NaN
    loss aborts with the offending epoch and batch in the message.
    """
    if images.shape != labels.shape:
        raise ValueError(f"images {images.shape} vs labels {labels.shape}")
    if images.shape[0] != plan.size:
        raise ValueError(f"plan covers {plan.size} scans, data has {images.shape[0]}")
    in_hw = images.shape[1:]
    net = build_network(in_hw, base, seed=cfg.seed * 1009 + fold)
    net = net.to(memory_format=torch.channels_last)
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.learning_rate,
                            betas=(cfg.beta1, cfg.beta2),
                            weight_decay=cfg.weight_decay)

    images_t = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    labels_t = torch.from_numpy(np.ascontiguousarray(labels))
    train_idx = plan.train_indices(fold)
    test_idx = plan.test_indices(fold)

    records: list[EpochRecord] = []
    best_miou = -1.0
    best_state = None
    best_epoch = -1
    started = time.monotonic()

    for epoch in range(1, cfg.epochs + 1):
        net.train()
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, fold, epoch])).permutation(train_idx)
        sum_d = sum_s = 0.0
        n_batches = 0
        for bi, idx in enumerate(_batches(order, cfg.batch_size)):
            x = _gather_batch(images_t, idx)
            y = one_hot_labels(labels_t[torch.from_numpy(idx)])
            out = net(x)
            l_d = loss_reconstruction(x, out["recon"])
            l_s = loss_segmentation(y, out["seg"])
            loss = cfg.loss_weights[0] * l_d + cfg.loss_weights[1] * l_s
            f_d, f_s = float(l_d.detach()), float(l_s.detach())
            if not math.isfinite(float(loss.detach())):
                raise RuntimeError(
                    f"non-finite loss at fold {fold} epoch {epoch} batch {bi}: "
                    f"L_D={f_d} L_S={f_s}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sum_d += f_d
            sum_s += f_s
            n_batches += 1

        m, pa = evaluate_segmentation(net, images_t, labels_t, test_idx,
                                      cfg.batch_size)
        mean_d, mean_s = sum_d / n_batches, sum_s / n_batches
        rec = EpochRecord(fold, epoch, mean_d, mean_s,
                          cfg.loss_weights[0] * mean_d + cfg.loss_weights[1] * mean_s,
                          m, pa)
        records.append(rec)
        if log is not None:
            log(rec)
        if m > best_miou:
            best_miou = m
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}

        targets_met = ((cfg.stop_at_miou is None or m >= cfg.stop_at_miou)
                       and (cfg.stop_at_pa is None or pa >= cfg.stop_at_pa))
        has_targets = cfg.stop_at_miou is not None or cfg.stop_at_pa is not None
        if has_targets and targets_met:
            break
        if (cfg.time_budget_s is not None
                and time.monotonic() - started >= cfg.time_budget_s):
            break

    net.load_state_dict(best_state)
    net.eval()
    if checkpoint_path is not None:
        save_checkpoint(net, Path(checkpoint_path),
                        meta={"fold": fold, "best_epoch": best_epoch,
                              "test_miou": best_miou,
                              "epochs_run": len(records)})
    return net, records


def run_cross_validation(images, labels, cfg: TrainConfig, base: int,
                         out_dir: Path, log=None) -> dict:
    """All folds end to end: checkpoints, one merged trace CSV, and a
    summary with per-fold and mean/std test metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = make_folds(images.shape[0], cfg.fold_count, cfg.seed)
    all_records = []
    summary = {"folds": []}
    for fold in range(cfg.fold_count):
        net, records = train_fold(
            images, labels, plan, fold, cfg, base=base,
            checkpoint_path=out_dir / f"fold_{fold}.ckpt", log=log)
        all_records.extend(records)
        best = max(records, key=lambda r: r.test_miou)
        summary["folds"].append({
            "fold": fold, "best_epoch": best.epoch, "epochs_run": len(records),
            "test_miou": best.test_miou, "test_pa": best.test_pa})
    write_trace_csv(out_dir / "training_log.csv", all_records)
    mious = [f["test_miou"] for f in summary["folds"]]
    pas = [f["test_pa"] for f in summary["folds"]]
    summary["miou_mean"] = float(np.mean(mious))
    summary["miou_std"] = float(np.std(mious))
    summary["pa_mean"] = float(np.mean(pas))
    summary["pa_std"] = float(np.std(pas))
    return summary


# ---------------------------------------------------------------------------
# gradient verification


def gradient_check(in_hw=(32, 96), base: int = 4, n_params: int = 24,
                   step: float = 1e-6, seed: int = 0) -> dict:
    """Central finite differences against autograd on a reduced float64 net.

    Checks the largest-gradient coordinate of n_params distinct parameter
    tensors spread across the model; eval mode keeps BatchNorm a fixed
    affine map. The step must stay small: the loss is only piecewise smooth
    in the parameters (ReLU), and a large interval straddles kinks, which
    biases the difference quotient roughly linearly in the step.
    """
    net = build_network(in_hw, base, seed=seed).double().eval()
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.random((2, 3, *in_hw))).double()
    y = one_hot_labels(torch.from_numpy(
        rng.integers(0, N_CLASSES, (2, *in_hw)))).double()

    def objective():
        out = net(x)
        return loss_total(x, out["recon"], y, out["seg"])

    loss = objective()
    net.zero_grad()
    loss.backward()
    params = [(name, p) for name, p in net.named_parameters() if p.grad is not None]
    chosen = rng.choice(len(params), size=min(n_params, len(params)),
                        replace=False)
    results = []
    with torch.no_grad():
        for pi in chosen:
            name, p = params[pi]
            flat = p.grad.reshape(-1)
            ci = int(flat.abs().argmax())
            analytic = float(flat[ci])
            orig = float(p.reshape(-1)[ci])
            p.reshape(-1)[ci] = orig + step
            hi = float(objective())
            p.reshape(-1)[ci] = orig - step
            lo = float(objective())
            p.reshape(-1)[ci] = orig
            numeric = (hi - lo) / (2.0 * step)
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
            results.append({"param": name, "analytic": analytic,
                            "numeric": numeric, "rel_error": rel})
    return {"checks": results,
            "max_rel_error": max(r["rel_error"] for r in results)}
