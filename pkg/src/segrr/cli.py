"""Command-line interface.

Subcommands: gen (synthetic dataset), train, eval, gradcheck, compare
(the six-configuration sweep), inspect (recalibration heatmaps). Exit
codes: 0 success, 1 usage error, 2 validation error, 3 numerical
failure. Every output directory receives the resolved configuration.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data as dio
from . import gradcheck as gc
from .blocks import parameter_count
from .metrics import evaluate_labels
from .network import build_network
from .tensor import Tensor
from .train import AdamState, NonFiniteLossError, predict_labels, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class CliError(Exception):
    def __init__(self, message, code=EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


def _load_config(path):
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file not found: {path}", EXIT_USAGE)
    try:
        return cfgmod.parse_config_file(path)
    except cfgmod.ConfigError as e:
        raise CliError(f"invalid config {path}: {e}") from e


def _prepare_out_dir(out_dir, force):
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise CliError(f"output directory {out_dir} is not empty (use --force)", EXIT_USAGE)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


# ----------------------------------------------------------------------

def cmd_gen(args):
    net_cfg, manifest, phantom = _load_config(args.config)
    out_dir = _prepare_out_dir(args.out_dir, args.force)
    dio.write_dataset(out_dir, phantom, args.count)
    (out_dir / "resolved.cfg").write_text(cfgmod.resolve_config_text(net_cfg, manifest, phantom))
    print(f"wrote {args.count} samples to {out_dir}")
    return EXIT_OK


def cmd_train(args):
    net_cfg, manifest, phantom = _load_config(args.config)
    data_dir = Path(args.data_dir)
    dataset = dio.read_dataset(data_dir)
    if not dataset:
        raise CliError(f"no samples in {data_dir}")
    out_dir = _prepare_out_dir(args.out_dir, args.force)
    resolved = cfgmod.resolve_config_text(net_cfg, manifest, phantom)
    (out_dir / "resolved.cfg").write_text(resolved)

    net = build_network(net_cfg, seed=manifest.seed)
    opt = AdamState(lr=manifest.lr, weight_decay=manifest.weight_decay)
    if args.resume:
        dio.load_checkpoint_into(Path(args.resume), net, opt)

    ckpt_path = out_dir / "checkpoint.sgck"
    trace_path = out_dir / "loss_trace.txt"
    if not args.resume:
        trace_path.write_text("")

    def on_step(step, value):
        with open(trace_path, "a") as f:
            f.write(f"{step} {float(np.float32(value))!r}\n")
        cadence = manifest.checkpoint_every
        if cadence and (step + 1) % cadence == 0:
            dio.write_checkpoint(ckpt_path, net, opt, resolved)

    try:
        train(net, dataset, manifest, opt=opt, on_step=on_step)
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    dio.write_checkpoint(ckpt_path, net, opt, resolved)
    print(f"trained {manifest.iterations} iterations -> {ckpt_path}")
    return EXIT_OK


def load_network_from_checkpoint(path):
    entries_manifest = dio.read_checkpoint_entries(Path(path))
    manifest_text = entries_manifest[1]
    net_cfg, manifest, phantom = cfgmod.parse_config_text(manifest_text)
    net = build_network(net_cfg, seed=manifest.seed)
    dio.load_checkpoint_into(Path(path), net)
    return net, net_cfg, manifest, phantom


def _evaluate_checkpoint(ckpt, data_dir):
    net, net_cfg, _, _ = load_network_from_checkpoint(ckpt)
    dataset = dio.read_dataset(Path(data_dir))
    if not dataset:
        raise CliError(f"no samples in {data_dir}")
    images = [img for img, _ in dataset]
    refs = [lab for _, lab in dataset]
    preds = predict_labels(net, images)
    return evaluate_labels(preds, refs, net_cfg.num_classes), net_cfg


def _fmt(v, nd=4):
    return "undef" if v is None else f"{v:.{nd}f}"


def _report_lines(report):
    lines = ["class  dc      ppv     sens    hd95    assd"]
    for i, cls in enumerate(report.class_ids):
        lines.append(f"{cls:<6d} {_fmt(report.dc[i])}  {_fmt(report.ppv[i])}  "
                     f"{_fmt(report.sensitivity[i])}  {_fmt(report.hd95[i])}  {_fmt(report.assd[i])}")
    agg = report.aggregates()
    lines.append(f"mean   {_fmt(agg['dc'])}  {_fmt(agg['ppv'])}  {_fmt(agg['sensitivity'])}  "
                 f"{_fmt(agg['hd95'])}  {_fmt(agg['assd'])}")
    return lines


def _machine_record(report):
    lines = []
    for i, cls in enumerate(report.class_ids):
        for metric, values in (("dc", report.dc), ("ppv", report.ppv),
                               ("sensitivity", report.sensitivity),
                               ("hd95", report.hd95), ("assd", report.assd)):
            v = values[i]
            lines.append(f"class.{cls}.{metric} = {'undef' if v is None else repr(v)}")
    for metric, v in report.aggregates().items():
        lines.append(f"mean.{metric} = {'undef' if v is None else repr(v)}")
    return "\n".join(lines) + "\n"


def cmd_eval(args):
    report, _ = _evaluate_checkpoint(args.checkpoint, args.data_dir)
    table = "\n".join(_report_lines(report)) + "\n"
    print(table, end="")
    if args.report:
        path = Path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(table)
        path.with_suffix(path.suffix + ".rec").write_text(_machine_record(report))
    return EXIT_OK


def cmd_gradcheck(args):
    scopes = [args.scope] if args.scope else ["layer", "block", "network"]
    failed = False
    for scope in scopes:
        results, ok = gc.run_suite(scope)
        for name, err in results:
            status = "pass" if err < gc.TOLERANCE else "FAIL"
            print(f"{status}  {name:<28s} max_rel_err={err:.3e}")
        failed = failed or not ok
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_compare(args):
    out_dir = _prepare_out_dir(args.out, args.force)
    train_dir, eval_dir = Path(args.data_dir), Path(args.eval_dir)
    rows = []
    for cfg_path in args.configs:
        cfg_path = Path(cfg_path)
        name = cfg_path.stem
        run_dir = out_dir / name
        ns = argparse.Namespace(config=str(cfg_path), data_dir=str(train_dir),
                                out_dir=str(run_dir), force=True, resume=None)
        code = cmd_train(ns)
        if code != EXIT_OK:
            raise CliError(f"training failed for {name}", code)
        report, _ = _evaluate_checkpoint(run_dir / "checkpoint.sgck", eval_dir)
        rows.append((name, report))

    header = ("# sequential runs with one shared seed and shared data; "
              "single-seed comparison, no statistical averaging\n")
    lines = []
    for name, report in rows:
        agg = report.aggregates()
        per_class = "  ".join(
            f"c{cls}:dc={_fmt(report.dc[i])},ppv={_fmt(report.ppv[i])},"
            f"sens={_fmt(report.sensitivity[i])},hd95={_fmt(report.hd95[i])}"
            for i, cls in enumerate(report.class_ids))
        lines.append(f"{name:<16s} mean_dc={_fmt(agg['dc'])}  {per_class}")
    table = header + "\n".join(lines) + "\n"
    (out_dir / "comparison.txt").write_text(table)
    for name, report in rows:
        (out_dir / f"{name}.rec").write_text(_machine_record(report))
    print(table, end="")
    return EXIT_OK


def cmd_inspect(args):
    net, net_cfg, _, _ = load_network_from_checkpoint(args.checkpoint)
    net.eval()
    dataset = dio.read_dataset(Path(args.data_dir))
    if not 0 <= args.sample < len(dataset):
        raise CliError(f"sample index {args.sample} out of range (dataset has {len(dataset)})")
    image, label = dataset[args.sample]

    blocks = {name: child for name, child in net._children.items() if name.startswith("rr")}
    if args.layer not in blocks:
        raise CliError(f"unknown layer {args.layer!r}; available: {', '.join(sorted(blocks))}")
    block = blocks[args.layer]
    if block.config.kind in ("none", "recomb_only"):
        raise CliError(f"block {args.layer!r} (kind {block.config.kind}) has no recalibration stage")

    captured = {}
    original_forward = block.forward

    def capturing_forward(x):
        pre = block.expand(x)
        s = block.recal.excitation(pre)
        captured["pre"] = pre.data[0]
        captured["s"] = np.broadcast_to(s.data[0], pre.data[0].shape).copy()
        return block.compress(pre * s)

    block.forward = capturing_forward
    try:
        net(Tensor(image.data[None]))
    finally:
        block.forward = original_forward

    out_dir = _prepare_out_dir(args.out_dir, args.force)
    pre, s = captured["pre"], captured["s"]
    # post maps are rendered from the quantized pre and S values so the
    # emitted files satisfy post == pre * S exactly at the PGM level
    for c in range(pre.shape[0]):
        lo = min(float(pre[c].min()), 0.0)
        hi = max(float(pre[c].max()), 0.0)
        dio.write_heatmap_pgm(out_dir / f"ch{c:03d}_pre.pgm", pre[c], fixed_range=(lo, hi))
        dio.write_heatmap_pgm(out_dir / f"ch{c:03d}_excite.pgm", s[c], fixed_range=(0.0, 1.0))
        pre_q = dio.read_pgm(out_dir / f"ch{c:03d}_pre.pgm").astype(np.float64)
        s_q = dio.read_pgm(out_dir / f"ch{c:03d}_excite.pgm").astype(np.float64)
        span = (hi - lo) if hi > lo else 1.0
        pre_rec = lo + pre_q / 255.0 * span
        s_rec = s_q / 255.0
        dio.write_heatmap_pgm(out_dir / f"ch{c:03d}_post.pgm", pre_rec * s_rec, fixed_range=(lo, hi))
    dio.write_heatmap_pgm(out_dir / "label.pgm", np.asarray(label, dtype=np.float64))
    count = 3 * pre.shape[0] + 1
    print(f"wrote {count} heatmaps to {out_dir}")
    return EXIT_OK


# ----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="segrr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic phantom dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--config", required=True)
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-dir", required=True)
    e.add_argument("--report", default=None)
    e.set_defaults(fn=cmd_eval)

    gr = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gr.add_argument("--scope", choices=["layer", "block", "network"], default=None)
    gr.set_defaults(fn=cmd_gradcheck)

    c = sub.add_parser("compare", help="train and evaluate several configs")
    c.add_argument("--configs", nargs="+", required=True)
    c.add_argument("--data-dir", required=True)
    c.add_argument("--eval-dir", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--force", action="store_true")
    c.set_defaults(fn=cmd_compare)

    i = sub.add_parser("inspect", help="emit recalibration heatmaps")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data-dir", required=True)
    i.add_argument("--sample", type=int, default=0)
    i.add_argument("--layer", required=True)
    i.add_argument("--out-dir", required=True)
    i.add_argument("--force", action="store_true")
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
