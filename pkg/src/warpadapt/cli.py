"""Command-line pipeline driver.

Subcommands cover the whole study: generate the paired dataset, warp
single images, train the rectilinear baseline, adapt it to the warped
domain, evaluate checkpoints, run the full mode/placement sweep with the
few-shot curve, and compute the warped-prediction upper bound.

Exit codes: 0 success, 1 validation or usage failure, 2 training
divergence.  Artifacts (CSV, PNG, checkpoints, config echoes) are
byte-identical across reruns with the same config and seed; wall-clock
information appears only in log lines on stderr.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import config as C
from . import data as D
from . import engine as E
from . import geometry as G
from . import metrics as M
from . import model as Mo

log = logging.getLogger(__name__)

RECT_DIR = "rect"
FISHEYE_DIR = "fisheye"
CONFIG_ECHO = "config.resolved"


class UsageError(ValueError):
    """Bad flags or tokens; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_out_seed(sub, need_out=True):
    sub.add_argument("--config", help="path to a section.key = value file "
                                      "(defaults used when omitted)")
    if need_out:
        sub.add_argument("--out", required=True,
                         help="output directory for artifacts")
    sub.add_argument("--seed", type=int,
                     help="master seed overriding run.seed from the config")


def build_parser():
    parser = _Parser(prog="warpadapt",
                     description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("gen-data", help="generate the paired dataset",
                              description=(
        "Generate the synthetic rectilinear dataset and its fisheye "
        "counterpart warped with the configured distortion."))
    _add_config_out_seed(sub)
    sub.set_defaults(handler=cmd_gen_data)

    sub = commands.add_parser("warp", help="warp one image to fisheye geometry",
                              description=(
        "Warp one rectilinear image (and optionally its label map) to "
        "fisheye geometry; writes the PNGs plus the warp-field sidecar."))
    sub.add_argument("--in", dest="input", required=True,
                     help="input rectilinear image (PNG)")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--f", type=float, required=True,
                     help="distortion focal parameter (smaller = stronger)")
    sub.add_argument("--k1", type=float, default=0.0, help="radial term 1")
    sub.add_argument("--k2", type=float, default=0.0, help="radial term 2")
    sub.add_argument("--k3", type=float, default=0.0, help="radial term 3")
    sub.add_argument("--k4", type=float, default=0.0, help="radial term 4")
    sub.add_argument("--labels", help="optional label-map PNG to warp too")
    sub.set_defaults(handler=cmd_warp)

    sub = commands.add_parser("train", help="train the rectilinear baseline",
                              description=(
        "Train the rectilinear baseline on the generated dataset "
        "(location taken from run.data_dir in the config)."))
    _add_config_out_seed(sub)
    sub.set_defaults(handler=cmd_train)

    sub = commands.add_parser("adapt", help="adapt a baseline to the fisheye domain",
                              description=(
        "Adapt a trained baseline to the fisheye domain by training "
        "offsets and/or batch-norm only."))
    sub.add_argument("--baseline", required=True,
                     help="baseline checkpoint path")
    _add_config_out_seed(sub)
    sub.add_argument("--mode", choices=E.MODES,
                     help="what to adapt (default from config)")
    sub.add_argument("--placement", choices=("ENCODER", "DECODER", "BOTH"),
                     help="where to adapt (default from config)")
    sub.add_argument("--n", help="few-shot train subset size, or 'full'")
    sub.set_defaults(handler=cmd_adapt)

    sub = commands.add_parser("eval", help="evaluate a checkpoint on a test split",
                              description=(
        "Evaluate a checkpoint on the test split of a manifest; prints "
        "mean and per-class IoU."))
    sub.add_argument("--model", required=True, help="checkpoint path")
    sub.add_argument("--manifest", required=True, help="manifest.tsv path")
    sub.add_argument("--variant", required=True,
                     choices=(D.VARIANT_RECT, D.VARIANT_FISHEYE),
                     help="which image variant to evaluate on")
    sub.set_defaults(handler=cmd_eval)

    sub = commands.add_parser("sweep", help="run the mode/placement ablation and few-shot curve",
                              description=(
        "Run every adaptation mode x placement plus the few-shot curve; "
        "writes sweep.csv, fewshot.csv and summary plots."))
    sub.add_argument("--baseline", required=True,
                     help="baseline checkpoint path")
    _add_config_out_seed(sub)
    sub.set_defaults(handler=cmd_sweep)

    sub = commands.add_parser("bound", help="compute the warped-prediction upper bound",
                              description=(
        "Upper bound on adapted fisheye mIoU: score warped rectilinear "
        "predictions against warped groundtruth."))
    sub.add_argument("--baseline", required=True,
                     help="baseline checkpoint path")
    sub.add_argument("--manifest", required=True,
                     help="manifest.tsv with a rectilinear test split")
    sub.add_argument("--f", type=float, required=True,
                     help="distortion focal parameter")
    sub.add_argument("--k1", type=float, default=0.0, help="radial term 1")
    sub.add_argument("--k2", type=float, default=0.0, help="radial term 2")
    sub.add_argument("--k3", type=float, default=0.0, help="radial term 3")
    sub.add_argument("--k4", type=float, default=0.0, help="radial term 4")
    sub.set_defaults(handler=cmd_bound)
    return parser


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _resolve(args, need_out=True):
    cfg = C.load_config(getattr(args, "config", None))
    seed = args.seed if getattr(args, "seed", None) is not None \
        else cfg["run.seed"]
    cfg.set("run.seed", int(seed))
    if need_out:
        os.makedirs(args.out, exist_ok=True)
    return cfg, int(seed)


def _echo_config(cfg, out_dir):
    cfg.write_resolved(os.path.join(out_dir, CONFIG_ECHO))


def _manifest_path(cfg, variant_dir):
    return os.path.join(cfg["run.data_dir"], variant_dir, D.MANIFEST_NAME)


def _data_seed(seed):
    # scene generation derives its own per-index streams, so give it a
    # scalar drawn from the named sub-stream rather than the raw seed
    return int(E.substream(seed, "data").integers(2 ** 31))


def _save_report(report, out_dir):
    report.write_history_csv(os.path.join(out_dir, "history.csv"))
    report.write_summary_json(os.path.join(out_dir, "summary.json"))


def _history_plot(report, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    epochs = [row["epoch"] for row in report.history]
    fig, ax_loss = plt.subplots(figsize=(6, 4))
    ax_loss.plot(epochs, [r["train_loss"] for r in report.history],
                 color="tab:red", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss", color="tab:red")
    ax_iou = ax_loss.twinx()
    ax_iou.plot(epochs, [r["val_miou"] for r in report.history],
                color="tab:blue", label="val mIoU")
    ax_iou.set_ylabel("val mIoU", color="tab:blue")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    cfg, seed = _resolve(args)
    spec = cfg.dataset_spec(_data_seed(seed))
    rect = D.generate_dataset(spec, os.path.join(args.out, RECT_DIR))
    params = cfg.distortion_params()
    D.derive_fisheye_dataset(rect, params,
                             os.path.join(args.out, FISHEYE_DIR))
    _echo_config(cfg, args.out)
    log.info("wrote %d rect scenes and fisheye pairs under %s",
             spec.total, args.out)
    return 0


def cmd_warp(args):
    image = D.load_image_png(args.input)
    labels = D.load_labels_png(args.labels) if args.labels else None
    height, width = image.shape[:2]
    params = G.fisheye_params(args.f, k1=args.k1, k2=args.k2,
                              k3=args.k3, k4=args.k4)
    field = G.build_warp_field((height, width), (height, width), params)
    sample = D.SegmentationSample(
        image, labels if labels is not None
        else np.zeros((height, width), dtype=np.uint8))
    warped = D.derive_fisheye(sample, params, field=field)
    os.makedirs(args.out, exist_ok=True)
    D.save_image_png(os.path.join(args.out, "image.png"), warped.image)
    if labels is not None:
        D.save_labels_png(os.path.join(args.out, "labels.png"),
                          warped.labels)
    G.save_warp_field(field, os.path.join(args.out, D.FIELD_SIDECAR_NAME))
    log.info("warped %s at f=%g into %s", args.input, args.f, args.out)
    return 0


def cmd_train(args):
    cfg, seed = _resolve(args)
    manifest = D.load_manifest(_manifest_path(cfg, RECT_DIR))
    model, report = E.train_baseline(manifest, cfg.baseline_config(seed))
    Mo.save_checkpoint(model, os.path.join(args.out, "baseline.ckpt"))
    _save_report(report, args.out)
    _history_plot(report, os.path.join(args.out, "curves.png"))
    _echo_config(cfg, args.out)
    print(f"test_miou {report.final_test_miou:.6f}")
    return 0


def cmd_adapt(args):
    cfg, seed = _resolve(args)
    mode = args.mode or cfg["adapt.mode"]
    placement = args.placement or cfg["adapt.placement"]
    if args.n is None or args.n == "full":
        subset_n = None
    else:
        try:
            subset_n = int(args.n)
        except ValueError:
            raise UsageError(f"--n must be an integer or 'full', "
                             f"got {args.n!r}") from None
    acfg = cfg.adaptation_config(mode, placement, subset_n, seed)
    manifest = D.load_manifest(_manifest_path(cfg, FISHEYE_DIR))
    model, report = E.adapt(args.baseline, manifest, acfg)
    Mo.save_checkpoint(model, os.path.join(args.out, "adapted.ckpt"))
    _save_report(report, args.out)
    _history_plot(report, os.path.join(args.out, "curves.png"))
    _echo_config(cfg, args.out)
    print(f"test_miou {report.final_test_miou:.6f}")
    return 0


def cmd_eval(args):
    model = Mo.load_checkpoint(args.model)
    manifest = D.load_manifest(args.manifest)
    mean, matrix = E.evaluate_split(model, manifest, "test", args.variant)
    print(f"mean_iou {mean:.6f}")
    for c, iou in enumerate(matrix.per_class_iou()):
        shown = "absent" if np.isnan(iou) else f"{iou:.6f}"
        print(f"class_{c} {shown}")
    return 0


def _median_by(rows, key_fields):
    import statistics
    groups = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in key_fields),
                          []).append(row["miou"])
    return {key: statistics.median(vals) for key, vals in groups.items()}


def _sweep_plots(result, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    medians = _median_by(result["sweep"], ("mode", "placement"))
    placements = ("ENCODER", "DECODER", "BOTH")
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.25
    for i, mode in enumerate(E.MODES):
        xs = [j + (i - 1) * width for j in range(len(placements))]
        ax.bar(xs, [medians[(mode, p)] for p in placements],
               width=width, label=mode)
    ax.set_xticks(range(len(placements)))
    ax.set_xticklabels(placements)
    ax.set_ylabel("test mIoU (median over seeds)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "sweep.png"),
                metadata={"Software": None})
    plt.close(fig)

    medians = _median_by(result["fewshot"], ("n",))
    order = sorted(medians, key=lambda k: float("inf")
                   if k[0] == "full" else k[0])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([str(k[0]) for k in order], [medians[k] for k in order],
            marker="o")
    ax.set_xlabel("train subset size")
    ax.set_ylabel("test mIoU (median over seeds)")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "fewshot.png"),
                metadata={"Software": None})
    plt.close(fig)


def cmd_sweep(args):
    cfg, seed = _resolve(args)
    manifest = D.load_manifest(_manifest_path(cfg, FISHEYE_DIR))
    result = E.run_ablation_suite(
        args.baseline, manifest, args.out,
        seeds=cfg["sweep.seeds"], epochs=cfg["adapt.epochs"],
        batch_size=cfg["adapt.batch_size"],
        lr_encoder=cfg["adapt.lr_encoder"],
        lr_decoder=cfg["adapt.lr_decoder"],
        warmup_epochs=cfg["adapt.warmup_epochs"],
        fewshot_sizes=cfg.fewshot_sizes(), augment=cfg.augment_config())
    _sweep_plots(result, args.out)
    _echo_config(cfg, args.out)
    print(f"sweep_rows {len(result['sweep'])}")
    print(f"fewshot_rows {len(result['fewshot'])}")
    return 0


def cmd_bound(args):
    model = Mo.load_checkpoint(args.baseline)
    manifest = D.load_manifest(args.manifest)
    pairs = E.split_pairs(manifest, "test", D.VARIANT_RECT)
    params = G.fisheye_params(args.f, k1=args.k1, k2=args.k2,
                              k3=args.k3, k4=args.k4)
    bound, _ = M.upper_bound(model, pairs, params=params)
    print(f"upper_bound {bound:.6f}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None):
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except E.DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
