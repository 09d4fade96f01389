"""Command-line pipeline driver.

Subcommands cover the full workflow: phantom dataset generation, five-fold
training, one-class attack scoring, subsurface fingerprint reconstruction,
and recomputing metrics from a persisted score table. Every command is
deterministic for a fixed (config, seed, inputs) triple; artifacts carry
no timestamps.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    BONAFIDE,
    NET_SHAPE,
    OctInstance,
    load_instance,
    resize_to_network,
)
from .network import REFERENCE_BASE, infer_bscan, load_checkpoint
from .pad import (
    build_reference,
    encode_instance,
    pad_metrics,
    score_from_codes,
    spoof_score,
)
from .phantom import (
    PARTITIONS,
    PhantomConfig,
    desk_config,
    generate_dataset,
    load_manifest,
    manifest_instances,
)
from .reconstruct import export_layers, reconstruct_instance
from .train import TrainConfig, assemble_training_arrays, run_cross_validation

DESK_COUNTS = {"reference": 2, "test_bonafide": 4, "test_pa": 4, "annotated": 4}
FULL_COUNTS = {"reference": 16, "test_bonafide": 32, "test_pa": 32,
               "annotated": 16}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; the contract reserves 2 for runtime
    def error(self, message):
        raise UsageError(message)


def _read_config(path: Optional[str]) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            cp.read(p)
        except configparser.Error as exc:
            raise UsageError(f"bad config {p}: {exc}")
    return cp


def _get(cp, section, key, cast, default):
    try:
        raw = cp.get(section, key, fallback=None)
        if raw is None or raw.strip() == "":
            return default
        return cast(raw)
    except ValueError:
        raise UsageError(f"config [{section}] {key}: cannot parse {raw!r}")


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    cp = _read_config(args.config)
    seed = args.seed if args.seed is not None else _get(cp, "dataset", "seed", int, 0)
    counts = dict(DESK_COUNTS if args.scale == "desk" else FULL_COUNTS)
    for name in PARTITIONS:
        counts[name] = _get(cp, "dataset", name, int, counts[name])

    if args.scale == "desk":
        base = desk_config(seed=seed,
                           n_bscans=_get(cp, "dataset", "n_bscans", int, 40))
        overrides = {}
        for key, cast in (("height", int), ("width", int),
                          ("noise_sigma", float), ("ridge_period", float),
                          ("ridge_amplitude", float), ("surface_tilt", float)):
            v = _get(cp, "dataset", key, cast, None)
            if v is not None:
                overrides[key] = v
        if overrides:
            base = PhantomConfig(**{**asdict(base), **overrides})
    else:
        base = PhantomConfig(
            seed=seed,
            n_bscans=_get(cp, "dataset", "n_bscans", int, 400),
            noise_sigma=_get(cp, "dataset", "noise_sigma", float, 0.0))

    try:
        manifest_path = generate_dataset(counts, base, Path(args.out))
    except ValueError as exc:
        raise UsageError(str(exc))
    total = sum(counts.values())
    print(f"wrote {total} instances to {args.out}")
    for name in PARTITIONS:
        print(f"  {name}: {counts[name]} x {base.n_bscans} B-scans")
    print(f"manifest: {manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# train


def _train_config(cp, seed_override) -> TrainConfig:
    seed = seed_override if seed_override is not None else _get(cp, "train", "seed", int, 0)
    return TrainConfig(
        learning_rate=_get(cp, "train", "learning_rate", float, 1e-4),
        weight_decay=_get(cp, "train", "weight_decay", float, 5e-5),
        batch_size=_get(cp, "train", "batch_size", int, 16),
        epochs=_get(cp, "train", "epochs", int, 100),
        seed=seed,
        fold_count=_get(cp, "train", "fold_count", int, 5),
        time_budget_s=_get(cp, "train", "time_budget_s", float, None),
        stop_at_miou=_get(cp, "train", "stop_at_miou", float, None),
        stop_at_pa=_get(cp, "train", "stop_at_pa", float, None),
    )


def cmd_train(args) -> int:
    cp = _read_config(args.config)
    cfg = _train_config(cp, args.seed)
    base = _get(cp, "train", "base_channels", int, REFERENCE_BASE)
    max_scans = _get(cp, "train", "max_scans", int, 0)

    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    dirs = manifest_instances(manifest, "annotated")
    if not dirs:
        raise UsageError("manifest has no annotated partition")
    pairs = [load_instance(d, with_masks=True) for d in dirs]
    images, labels = assemble_training_arrays(pairs, out_hw=NET_SHAPE)
    if max_scans:
        images, labels = images[:max_scans], labels[:max_scans]

    out_dir = Path(args.out)

    def log(rec):
        print(f"fold {rec.fold} epoch {rec.epoch}: "
              f"L={rec.l_total:.4f} mIOU={rec.test_miou:.4f} PA={rec.test_pa:.4f}",
              flush=True)

    summary = run_cross_validation(images, labels, cfg, base, out_dir, log=log)
    _write_summary(out_dir, summary)
    print(f"mean test mIOU {summary['miou_mean']:.4f} "
          f"(std {summary['miou_std']:.4f}), "
          f"mean PA {summary['pa_mean']:.4f} (std {summary['pa_std']:.4f})")
    return 0


def _write_summary(out_dir: Path, summary: dict):
    with open(out_dir / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["fold", "best_epoch", "test_mIOU", "test_PA"])
        for row in summary["folds"]:
            w.writerow([row["fold"], row["best_epoch"],
                        repr(row["test_miou"]), repr(row["test_pa"])])
        w.writerow(["Mean", "", repr(summary["miou_mean"]), repr(summary["pa_mean"])])
        w.writerow(["Std", "", repr(summary["miou_std"]), repr(summary["pa_std"])])
    (out_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# pad


def _load_partition(manifest, partition):
    dirs = manifest_instances(manifest, partition)
    if not dirs:
        raise ValueError(f"manifest has no {partition!r} partition")
    return [load_instance(d)[0] for d in dirs]


def cmd_pad(args) -> int:
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    net, _ = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    reference = _load_partition(manifest, "reference")
    bona = _load_partition(manifest, "test_bonafide")
    attacks = _load_partition(manifest, "test_pa")

    ref = build_reference(reference, net)
    np.save(out_dir / "reference_code.npy", ref.pooled)

    rows = []
    for inst in bona + attacks:
        s = spoof_score(inst, ref, net)
        rows.append((inst.instance_id, inst.label, s.value))
        print(f"scored {inst.instance_id} ({inst.label}): {s.value:.6f}",
              flush=True)
    with open(out_dir / "scores.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["instance_id", "label", "score"])
        for r in rows:
            w.writerow([r[0], r[1], repr(r[2])])

    bona_scores = [r[2] for r in rows if r[1] == BONAFIDE]
    pa_scores = [r[2] for r in rows if r[1] != BONAFIDE]
    report = pad_metrics(bona_scores, pa_scores)
    (out_dir / "metrics.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n")
    if args.plot:
        _plot_det(report["det_curve"], out_dir / "det.png")
    print(f"Acc {report['acc']:.2f}%  BPCER10 {report['bpcer10']:.2f}%  "
          f"BPCER20 {report['bpcer20']:.2f}%  D-EER {report['d_eer']:.2f}%")
    return 0


def _plot_det(curve, path: Path):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise RuntimeError(
            "matplotlib is not installed; install the 'plot' extra")
    apcer = [p[1] for p in curve]
    bpcer = [p[2] for p in curve]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(apcer, bpcer)
    ax.set_xlabel("APCER (%)")
    ax.set_ylabel("BPCER (%)")
    ax.set_title("DET")
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# reconstruct


def cmd_reconstruct(args) -> int:
    instance_dir = Path(args.instance)
    if not instance_dir.is_dir():
        raise UsageError(f"instance directory not found: {instance_dir}")
    net, _ = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    out_dir = Path(args.out)

    instance, gt_masks = load_instance(instance_dir,
                                       with_masks=args.use_gt_masks)
    metadata = {"instance_id": instance.instance_id, "label": instance.label,
                "masks": "ground_truth" if args.use_gt_masks else "predicted"}

    if args.pad_dir is not None:
        flagged, score, threshold = _pad_gate(Path(args.pad_dir), net, instance)
        metadata["spoof_score"] = score
        metadata["pad_threshold"] = threshold
        metadata["pa_warning"] = flagged
        if flagged and not args.force:
            raise RuntimeError(
                f"{instance.instance_id} scores {score:.4f}, above the PAD "
                f"threshold {threshold:.4f}; pass --force to reconstruct anyway")

    slices, masks = [], []
    for i, b in enumerate(instance.bscans):
        if args.use_gt_masks:
            rb, rm = resize_to_network(b, gt_masks[i])
        else:
            rb, _ = resize_to_network(b, out_hw=net.in_hw)
            rm = infer_bscan(net, rb).segmentation.argmax_mask()
        slices.append(rb)
        masks.append(rm)

    layers = reconstruct_instance(
        OctInstance(tuple(slices), instance.subject_id, instance.finger_id,
                    instance.session, instance.label), masks)
    written = export_layers(layers, out_dir)
    (out_dir / "metadata.json").write_text(
        json.dumps(metadata, sort_keys=True, indent=2) + "\n")
    for p in written:
        print(f"wrote {p}")
    return 0


def _pad_gate(pad_dir: Path, net, instance):
    ref_path = pad_dir / "reference_code.npy"
    metrics_path = pad_dir / "metrics.json"
    if not ref_path.is_file() or not metrics_path.is_file():
        raise UsageError(f"{pad_dir} is not a pad output directory")
    ref = np.load(ref_path)
    threshold = float(json.loads(metrics_path.read_text())["acc_threshold"])
    score = score_from_codes(encode_instance(net, instance), ref).value
    return score > threshold, score, threshold


# ---------------------------------------------------------------------------
# metrics


def cmd_metrics(args) -> int:
    scores_path = _require_file(args.scores, "score table")
    bona, attacks = [], []
    with open(scores_path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["instance_id", "label", "score"]:
            raise UsageError(
                f"{scores_path}: expected columns instance_id,label,score")
        for row in reader:
            (bona if row["label"] == BONAFIDE else attacks).append(
                float(row["score"]))
    if not bona or not attacks:
        raise RuntimeError(
            "score table needs both bonafide and attack rows; got "
            f"{len(bona)} bonafide, {len(attacks)} attack")
    report = pad_metrics(bona, attacks)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"Acc {report['acc']:.2f}%  D-EER {report['d_eer']:.2f}%  "
          f"-> {out}")
    return 0


# ---------------------------------------------------------------------------


def _require_file(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def build_parser() -> _Parser:
    parser = _Parser(prog="octfp",
                     description="OCT fingerprint pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=out_required, help="output directory")

    g = sub.add_parser("generate", help="write a phantom dataset")
    common(g)
    g.add_argument("--scale", choices=("desk", "full"), default="desk")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="five-fold training on the annotated set")
    t.add_argument("manifest", help="dataset manifest.json")
    common(t)
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("pad", help="score test instances against a reference")
    p.add_argument("manifest")
    p.add_argument("checkpoint")
    common(p)
    p.add_argument("--plot", action="store_true", help="write a DET plot")
    p.set_defaults(func=cmd_pad)

    r = sub.add_parser("reconstruct", help="subsurface fingerprints of one instance")
    r.add_argument("instance", help="instance directory")
    r.add_argument("checkpoint")
    common(r)
    r.add_argument("--use-gt-masks", action="store_true",
                   help="use stored annotation masks instead of inference")
    r.add_argument("--pad-dir", help="pad output dir; gate on its threshold")
    r.add_argument("--force", action="store_true",
                   help="reconstruct even when flagged as an attack")
    r.set_defaults(func=cmd_reconstruct)

    m = sub.add_parser("metrics", help="recompute metrics from a score table")
    m.add_argument("scores", help="scores.csv from the pad command")
    m.add_argument("--out", required=True, help="output JSON path")
    m.set_defaults(func=cmd_metrics)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
