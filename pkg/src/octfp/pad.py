"""One-class presentation attack detection on latent codes.

A reference code is the pooled encoder bottleneck averaged over held-out
bonafide scans; an instance's spoof score is the mean L2 distance of its
per-slice pooled codes to that reference. Large scores mean attack-like.
Rates are reported in percent with the decision rule score > t => attack.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch

from .core import (
    BONAFIDE,
    LatentCode,
    OctInstance,
    ReferenceCode,
    SpoofScore,
    resize_to_network,
)
from .network import SegmentationNet


def pool_latent(z) -> np.ndarray:
    """Global average pooling: channelwise mean of an HxWxC latent."""
    t = z.tensor if isinstance(z, LatentCode) else np.asarray(z, dtype=np.float64)
    if t.ndim != 3:
        raise ValueError(f"latent must be HxWxC, got shape {t.shape}")
    return t.mean(axis=(0, 1))


def encode_instance(net: SegmentationNet, instance: OctInstance,
                    batch_size: int = 8) -> np.ndarray:
    """Pooled latent code of every B-scan, as an (n_slices, C) array."""
    net.eval()
    scans = [resize_to_network(b, out_hw=net.in_hw)[0].pixels.astype(np.float32)
             for b in instance.bscans]
    pooled = []
    with torch.no_grad():
        for start in range(0, len(scans), batch_size):
            x = torch.from_numpy(np.stack(scans[start:start + batch_size]))
            x = x.unsqueeze(1).expand(-1, 3, -1, -1).contiguous(
                memory_format=torch.channels_last)
            z, _ = net.encode(x)
            pooled.append(z.mean(dim=(2, 3)).numpy().astype(np.float64))
    return np.concatenate(pooled, axis=0)


def build_reference(instances: Sequence[OctInstance], net: SegmentationNet,
                    batch_size: int = 8) -> ReferenceCode:
    """Mean pooled code over every B-scan of every reference instance.
    Averaging commutes with pooling, so this equals pooling the mean latent."""
    if not instances:
        raise ValueError("reference set is empty")
    for inst in instances:
        if inst.label != BONAFIDE:
            raise ValueError(
                f"{inst.instance_id} is not bonafide; reference data must be")
    codes = [encode_instance(net, inst, batch_size) for inst in instances]
    stacked = np.concatenate(codes, axis=0)
    return ReferenceCode(pooled=stacked.mean(axis=0),
                         source_count=stacked.shape[0])


def score_from_codes(per_slice_pooled: np.ndarray,
                     ref_pooled: np.ndarray) -> SpoofScore:
    """Mean L2 distance of per-slice codes to the reference code."""
    codes = np.asarray(per_slice_pooled, dtype=np.float64)
    ref = np.asarray(ref_pooled, dtype=np.float64)
    if codes.ndim != 2 or codes.shape[1] != ref.shape[0]:
        raise ValueError(
            f"codes {codes.shape} do not match reference length {ref.shape}")
    d = np.linalg.norm(codes - ref[None, :], axis=1)
    return SpoofScore(value=float(d.mean()), per_slice=d)


def spoof_score(instance: OctInstance, ref: ReferenceCode,
                net: SegmentationNet, batch_size: int = 8) -> SpoofScore:
    if ref is None:
        raise ValueError("missing reference code")
    return score_from_codes(encode_instance(net, instance, batch_size),
                            ref.pooled)


# ---------------------------------------------------------------------------
# threshold metrics (percent)


def _rates(bona: np.ndarray, attack: np.ndarray, t: float) -> tuple[float, float]:
    apcer = float((attack <= t).sum()) / attack.size * 100.0
    bpcer = float((bona > t).sum()) / bona.size * 100.0
    return apcer, bpcer


def det_curve(bonafide_scores, pa_scores) -> list:
    """(threshold, APCER%, BPCER%) rows over every distinct score plus a
    sentinel below all of them, thresholds ascending."""
    bona = np.asarray(bonafide_scores, dtype=np.float64)
    attack = np.asarray(pa_scores, dtype=np.float64)
    if bona.size == 0 or attack.size == 0:
        raise ValueError("both score lists must be non-empty")
    cands = np.unique(np.concatenate([bona, attack]))
    cands = np.concatenate([[cands[0] - 1.0], cands])
    return [(float(t), *_rates(bona, attack, t)) for t in cands]


def pad_metrics(bonafide_scores, pa_scores,
                acc_threshold: Optional[float] = None) -> dict:
    """Acc, BPCER10, BPCER20, D-EER and the DET polyline.

    Acc is evaluated at acc_threshold when given, otherwise at the
    accuracy-maximizing threshold of this score set.
    """
    bona = np.asarray(bonafide_scores, dtype=np.float64)
    attack = np.asarray(pa_scores, dtype=np.float64)
    curve = det_curve(bona, attack)

    def bpcer_at(apcer_target):
        # APCER rises with t, so qualifying thresholds are a prefix; the
        # best (lowest) BPCER among them sits at the largest qualifying t.
        return min(b for _, a, b in curve if a <= apcer_target)

    best = min(curve, key=lambda p: (abs(p[1] - p[2]), p[0]))
    d_eer = (best[1] + best[2]) / 2.0

    if acc_threshold is None:
        # ties resolved toward the smallest threshold
        acc, neg_t = max((_accuracy(bona, attack, t), -t) for t, _, _ in curve)
        acc_threshold_used = -neg_t
    else:
        acc = _accuracy(bona, attack, acc_threshold)
        acc_threshold_used = float(acc_threshold)

    return {
        "acc": acc,
        "bpcer10": bpcer_at(10.0),
        "bpcer20": bpcer_at(5.0),
        "d_eer": d_eer,
        "acc_threshold": acc_threshold_used,
        "det_curve": curve,
    }


def _accuracy(bona: np.ndarray, attack: np.ndarray, t: float) -> float:
    correct = int((bona <= t).sum()) + int((attack > t).sum())
    return correct / (bona.size + attack.size) * 100.0
