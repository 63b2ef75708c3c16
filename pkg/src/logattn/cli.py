"""Command-line entry point: ``logattn <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical-check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import attention, pnm
from .annotations import AnnotationError, load_annotations, split_train_val, stats_report
from .attention import AttentionKind, NonFiniteInput
from .detector import (
    DEFAULT_CONF_THRESHOLD,
    DEFAULT_NMS_THRESHOLD,
    BackboneConfig,
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    dump_activations,
    load_weights,
    predict,
    save_weights,
    train,
)
from .evaluation import DEFAULT_IOU_THRESHOLD, EvalReport, comparison_csv, comparison_table, evaluate
from .rng import DEFAULT_SEED, make_rng
from .synth import PlacementError, SceneSpec, generate_dataset, load_dataset, load_spec

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_N_IMAGES = 128
GRADCHECK_TOLERANCE = 1e-6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _say(args, *parts) -> None:
    if not args.quiet:
        print(*parts)


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _dtype(args):
    return np.float32 if args.precision == "f32" else np.float64


def _stage_list(text: str | None, n_stages: int) -> frozenset[int]:
    if text is None:
        # gate the features the head consumes
        return frozenset({n_stages - 1})
    try:
        return frozenset(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"invalid stage list {text!r}") from None


def _backbone(args, kind: str, stages_text: str | None) -> BackboneConfig:
    base = BackboneConfig()
    try:
        return BackboneConfig(
            attention_kind=AttentionKind(kind),
            attention_after_stage=_stage_list(stages_text, len(base.stages)) if kind != "none" else frozenset(),
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _train_config(args, seed: int) -> TrainConfig:
    try:
        return TrainConfig(
            learning_rate=args.lr,
            momentum=args.momentum,
            epochs=args.epochs,
            batch_size=args.batch_size,
            seed=seed,
            dtype=args.precision,
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _labeled(scenes, dtype):
    return [(s.to_chw(dtype), s.annotation) for s in scenes]


def _evaluate(det, scenes, args) -> EvalReport:
    dets = [predict(det, s.to_chw(det.dtype), args.conf_thresh, args.nms_thresh) for s in scenes]
    return evaluate(dets, [s.annotation.boxes for s in scenes], args.iou_thresh, args.interpolation, args.sweep)


# -- commands --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = load_spec(args.spec) if args.spec else SceneSpec()
    out = _out(args)
    _, manifest = generate_dataset(spec, args.n, args.seed, out)
    _write(out / "spec.json", json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    _say(args, f"wrote {len(manifest)} scenes and {out / 'manifest.txt'}")
    return EXIT_OK


def cmd_stats(args) -> int:
    report = stats_report(load_annotations(args.data))
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    _write(_out(args) / "stats.json", text)
    _say(args, text.rstrip())
    return EXIT_OK


def cmd_train(args) -> int:
    scenes = load_dataset(args.data)
    if not scenes:
        raise AnnotationError("manifest lists no images")
    backbone = _backbone(args, args.attention, args.stages)
    det, log = train(_labeled(scenes, _dtype(args)), _train_config(args, args.seed), backbone)
    out = _out(args)
    weights, sidecar = save_weights(det, out / "weights.bin")
    _write(out / "train_log.csv", log.to_csv())
    _say(args, f"trained {args.epochs} epochs; loss {log.epoch_losses[0]:.4f} -> {log.epoch_losses[-1]:.4f}")
    _say(args, f"wrote {weights}, {sidecar}, {out / 'train_log.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    det = load_weights(args.weights)
    scenes = load_dataset(args.data)
    report = _evaluate(det, scenes, args)
    out = _out(args)
    _write(out / "eval_report.json", report.to_json())
    _write(out / "pr_curve.csv", report.pr_csv())
    _say(args, comparison_table([("model", report.to_dict())]).rstrip())
    return EXIT_OK


def _parse_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"range must look like lo:hi, got {text!r}") from None
    if not lo < hi:
        raise UsageError("range needs lo < hi")
    return lo, hi


def cmd_gradcheck(args) -> int:
    lo, hi = _parse_range(args.range)
    if args.samples < 1 or args.eps <= 0:
        raise UsageError("need --samples >= 1 and --eps > 0")
    points = make_rng(args.seed).uniform(lo, hi, args.samples)
    rows = attention.gradient_check(points, args.eps)
    worst = sorted(rows, key=lambda r: -r.rel_err)[: args.worst]
    max_err = max((r.rel_err for r in rows), default=0.0)
    negative = [r for r in rows if r.f < 0]
    zero_ok = all(r.analytic == 0.0 for r in negative)

    table = ["f,analytic,numeric,rel_err"] + [f"{r.f!r},{r.analytic!r},{r.numeric!r},{r.rel_err!r}" for r in worst]
    disc = attention.eq2_discrepancy_report(0.0, 5.0, 51)
    by_f = {r.f: r for r in disc}
    eq2_ok = by_f[1.0].abs_diff == 0.0 and abs(by_f[5.0].abs_diff - 2.0 / 3.0) <= 1e-9
    passed = max_err <= GRADCHECK_TOLERANCE and zero_ok and eq2_ok

    out = _out(args)
    _write(out / "gradcheck_worst.csv", "\n".join(table) + "\n")
    _write(out / "eq2_discrepancy.csv", attention.discrepancy_csv(disc))
    summary = {
        "range": [lo, hi],
        "samples": len(rows),
        "eps": args.eps,
        "max_rel_err": max_err,
        "tolerance": GRADCHECK_TOLERANCE,
        "negative_points": len(negative),
        "negative_branch_exactly_zero": zero_ok,
        "eq2_diff_at_1": by_f[1.0].abs_diff,
        "eq2_diff_at_5": by_f[5.0].abs_diff,
        "passed": passed,
    }
    _write(out / "gradcheck.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _say(args, f"{'PASS' if passed else 'FAIL'}: max rel err {max_err:.3e} over {len(rows)} points in [{lo}, {hi}]")
    if negative:
        _say(args, f"analytic gradient exactly 0 on {len(negative)} negative points: {zero_ok}")
    _say(args, f"eq2 discrepancy: diff {by_f[1.0].abs_diff:.3g} at f=1, {by_f[5.0].abs_diff:.12f} at f=5")
    _say(args, "worst cases:\n" + "\n".join(table[: 1 + min(5, len(worst))]))
    return EXIT_OK if passed else EXIT_NUMERIC


def _row(report: EvalReport) -> dict:
    return {k: getattr(report, k) for k in ("ap", "mean_iou", "ap_small", "ap_medium", "ap_large")}


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def cmd_compare(args) -> int:
    scenes = load_dataset(args.data)
    train_set, val_set = split_train_val(scenes, args.split, args.seed)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"invalid seed list {args.seeds!r}") from None
    kinds = [k.strip() for k in args.attention_list.split(",") if k.strip()]
    if not seeds or not kinds:
        raise UsageError("need at least one seed and one attention variant")
    for k in kinds:
        if k not in {a.value for a in AttentionKind}:
            raise UsageError(f"unknown attention variant {k!r}")

    data = _labeled(train_set, _dtype(args))
    runs = []
    for kind in kinds:
        backbone = _backbone(args, kind, args.stages)
        for seed in seeds:
            t0 = time.perf_counter()
            det, log = train(data, _train_config(args, seed), backbone)
            report = _evaluate(det, val_set, args)
            losses = {"first_loss": log.epoch_losses[0], "final_loss": log.epoch_losses[-1]}
            runs.append({"attention": kind, "seed": seed, **losses, **_row(report)})
            _say(args, f"{kind:>8} seed {seed}: AP {report.ap:.4f} AP^S {report.ap_small} ({time.perf_counter() - t0:.0f}s)")

    rows = [(f"{r['attention']}/seed{r['seed']}", r) for r in runs]
    means = {}
    for kind in kinds:
        sel = [r for r in runs if r["attention"] == kind]
        means[kind] = {c: _mean(r[c] for r in sel) for c in ("ap", "mean_iou", "ap_small", "ap_medium", "ap_large")}
        if len(seeds) > 1:
            rows.append((f"{kind}/mean", means[kind]))

    summary = {"train_images": len(train_set), "val_images": len(val_set), "seeds": seeds, "runs": runs, "means": means}
    if "log" in means and "none" in means and means["log"]["ap_small"] is not None and means["none"]["ap_small"] is not None:
        delta = means["log"]["ap_small"] - means["none"]["ap_small"]
        summary["ap_small_delta_log_minus_none"] = delta
        summary["directional_win"] = delta > 0
        summary["within_tolerance"] = delta >= -0.01

    out = _out(args)
    _write(out / "comparison.csv", comparison_csv(rows))
    _write(out / "comparison.txt", comparison_table(rows))
    _write(out / "comparison.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _say(args, comparison_table(rows).rstrip())
    if "ap_small_delta_log_minus_none" in summary:
        verdict = "win" if summary["directional_win"] else "no win"
        _say(args, f"mean AP^S log - none = {summary['ap_small_delta_log_minus_none']:+.4f} ({verdict})")
    return EXIT_OK


def cmd_dump_activations(args) -> int:
    det = load_weights(args.weights)
    img = pnm.read(args.image).astype(det.dtype) / 255.0
    chw = img[None] if img.ndim == 2 else img.transpose(2, 0, 1)
    if not 0 <= args.stage < len(det.config.stages):
        raise UsageError(f"invalid stage {args.stage}; backbone has {len(det.config.stages)} stages")
    maps = dump_activations(det, chw, args.stage)
    out = _out(args) / "activations"
    out.mkdir(parents=True, exist_ok=True)
    for c, m in enumerate(maps):
        pnm.write(out / f"stage{args.stage}_ch{c:02d}.pgm", m)
    _say(args, f"wrote {len(maps)} maps to {out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"master seed (default {DEFAULT_SEED})")
    p.add_argument("--out-dir", default="out", help="directory for all artifacts (created if absent)")
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p.add_argument("--quiet", action="store_true")
    return p


def _train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--stages", default=None, help="comma-separated stage indices to gate (default: last stage only; '' for none)")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iou-thresh", type=float, default=DEFAULT_IOU_THRESHOLD)
    p.add_argument("--conf-thresh", type=float, default=DEFAULT_CONF_THRESHOLD)
    p.add_argument("--nms-thresh", type=float, default=DEFAULT_NMS_THRESHOLD)
    p.add_argument("--interpolation", choices=("coco101", "voc11"), default="coco101")
    p.add_argument("--sweep", action="store_true", help="also report AP averaged over IoU 0.50:0.95")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="logattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--spec", help="JSON scene spec (default: built-in)")
    p.add_argument("--n", type=int, default=DEFAULT_N_IMAGES)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", parents=[common], help="size-bin statistics of a dataset")
    p.add_argument("--data", required=True, help="manifest file")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", parents=[common], help="train the toy detector")
    p.add_argument("--data", required=True)
    p.add_argument("--attention", choices=[a.value for a in AttentionKind], default="none")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate trained weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    _eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="check the log attention gradient")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--range", default="0.01:10")
    p.add_argument("--worst", type=int, default=20, help="rows in the worst-case table")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare", parents=[common], help="baseline vs attention over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--attention-list", default="log,none")
    p.add_argument("--split", type=float, default=0.8, help="train fraction")
    _train_flags(p)
    _eval_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("dump-activations", parents=[common], help="write per-channel stage activations as PGM")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--stage", type=int, required=True)
    p.set_defaults(func=cmd_dump_activations)
    return parser


def _join_range(argv: list[str]) -> list[str]:
    # "--range -5:-0.1" would otherwise be read as a flag by argparse
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--range" and i + 1 < len(argv):
            out.append(f"--range={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(_join_range(argv))
    except SystemExit as exc:  # argparse exits on --help and on bad flags
        return exc.code
    if args.command in ("eval", "compare"):
        for name in ("iou_thresh", "nms_thresh"):
            if not 0.0 < getattr(args, name) <= 1.0:
                print(f"logattn: --{name.replace('_', '-')} must be in (0, 1]", file=sys.stderr)
                return EXIT_USAGE
        if not 0.0 <= args.conf_thresh <= 1.0:
            print("logattn: --conf-thresh must be in [0, 1]", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"logattn: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteInput, TrainingDiverged) as exc:
        print(f"logattn: training diverged ({exc}); try a lower --lr or fewer gated stages", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, AnnotationError, PlacementError, ValueError) as exc:
        print(f"logattn: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
