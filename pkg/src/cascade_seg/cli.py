"""``cascade-seg`` command line: gen-phantom, train, predict, evaluate.

Exit codes: 0 success, 2 configuration, 3 I/O, 4 training, 5 channels,
6 evaluation pairing.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys

import numpy as np

from . import metrics, plotting
from .config import load_config
from .errors import (
    ChannelMismatch,
    CheckpointError,
    ConfigError,
    DegenerateVariance,
    EmptyPatchSet,
    MissingFlairChannel,
    MissingMask,
    MvolError,
    NoPositives,
    SingleClassData,
)
from .inference import (
    ProbabilityMap,
    binarize_and_filter,
    case_stack,
    dsc_grid,
    predict_probability,
    roc_csv,
    roc_sweep,
)
from .phantom import generate_cohort
from .trainer import load_model, save_model, train_cascade
from .volume import (
    Volume,
    case_ids,
    load_case,
    load_mask,
    load_volume,
    normalize_case,
    save_volume,
)

log = logging.getLogger("cascade_seg")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRAIN, EXIT_CHANNEL, EXIT_PAIRING = 0, 2, 3, 4, 5, 6
DEFAULT_CHANNELS = ("T1", "FLAIR")
PARAMS_FILE = "params.txt"


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _thread_limit():
    n = os.environ.get("CASCADE_SEG_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(1, int(n)))


def _writable_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot create directory {path}: {exc.strerror}")
    if not os.access(path, os.W_OK):
        raise CommandError(EXIT_IO, f"directory {path} is not writable")
    return path


def _readable_dir(path: str) -> str:
    if not path or not os.path.isdir(path):
        raise CommandError(EXIT_IO, f"no such directory: {path}")
    return path


def _path(arg, cfg, key, flag):
    value = arg or cfg.paths.get(key)
    if not value:
        raise CommandError(EXIT_CONFIG, f"{flag} not given and paths.{key} not set")
    return value


def _channels(cfg):
    return list(cfg.train.channel_order or DEFAULT_CHANNELS)


# ------------------------------------------------------------------ commands

def cmd_gen_phantom(args, cfg) -> int:
    out = _writable_dir(_path(args.out, cfg, "out_dir", "--out"))
    try:
        cases = generate_cohort(cfg.phantom, args.n, out, start=args.start)
    except OSError as exc:
        raise CommandError(EXIT_IO, f"cannot write to {out}: {exc.strerror}")
    print(f"wrote {len(cases)} cases to {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    data = _readable_dir(_path(args.data, cfg, "data_dir", "--data"))
    model_dir = _writable_dir(_path(args.model, cfg, "model_dir", "--model"))
    channels = _channels(cfg)
    ids = case_ids(data, "", channels)
    if not ids:
        raise CommandError(EXIT_IO, f"no cases in {data}")
    cases = []
    for cid in ids:
        case = load_case(data, cid, channels, with_mask=True)
        missing = [c for c in channels if c not in case.channel_names]
        if missing:
            raise CommandError(EXIT_CHANNEL, f"case {cid} lacks channel(s) {', '.join(missing)}")
        cases.append(normalize_case(case))
    model = train_cascade(cases, cfg.train)
    save_model(model, model_dir)
    for name, logs in model.logs.items():
        best = min(logs, key=lambda e: e.val_loss)
        print(f"{name}: {len(logs)} epochs, best validation loss {best.val_loss:.6f} (epoch {best.epoch})")
    print(f"t_bin={model.t_bin:.2f} l_min={model.l_min}")
    print(f"model written to {model_dir}")
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    model_dir = _readable_dir(_path(args.model, cfg, "model_dir", "--model"))
    src = _readable_dir(_path(args.cases, cfg, "data_dir", "--cases"))
    out = _writable_dir(_path(args.out, cfg, "out_dir", "--out"))
    want_prob, want_bin = args.prob, args.binary
    if not (want_prob or want_bin):
        want_prob = want_bin = True
    model = load_model(model_dir)
    ids = case_ids(src, "", model.channel_order + [cfg.train.flair_channel])
    if not ids:
        raise CommandError(EXIT_IO, f"no cases in {src}")
    for cid in ids:
        case = load_case(src, cid, model.channel_order, with_mask=False)
        case_stack(case, model.channel_order)
        prob = predict_probability(model, normalize_case(case), cfg.train.chunk)
        if want_prob:
            save_volume(Volume(prob.data, case.voxel_size), os.path.join(out, f"{cid}_prob.mvol"))
        if want_bin:
            seg = binarize_and_filter(prob, model.t_bin, model.l_min)
            save_volume(seg.binary, os.path.join(out, f"{cid}_seg.mvol"))
            log.info("%s: %d regions, %d voxels", cid, len(seg.regions), seg.binary.count())
    with open(os.path.join(out, PARAMS_FILE), "w") as fh:
        fh.write(f"t_bin={model.t_bin!r}\nl_min={model.l_min}\n")
    print(f"predicted {len(ids)} cases into {out}")
    return EXIT_OK


def _read_params(directory):
    values = {}
    path = os.path.join(directory, PARAMS_FILE)
    if os.path.exists(path):
        with open(path) as fh:
            for line in fh:
                key, _, value = line.strip().partition("=")
                if key:
                    values[key] = value
    return values


def _table(reports, r) -> str:
    head = f"{'case':<12}{'VD':>9}{'TPR':>9}{'FPR':>9}{'DSC':>9}{'PPV':>9}{'seg ml':>10}{'gt ml':>10}"
    rows = [head]
    for rep in reports:
        rows.append(f"{rep.case_id:<12}{rep.vd:>9.2f}{rep.tpr:>9.2f}{rep.fpr:>9.2f}{rep.dsc:>9.2f}"
                    f"{rep.ppv:>9.2f}{rep.seg_vol_ml:>10.3f}{rep.gt_vol_ml:>10.3f}")
    cols = np.array([[x.vd, x.tpr, x.fpr, x.dsc, x.ppv, x.seg_vol_ml, x.gt_vol_ml] for x in reports])
    m = cols.mean(axis=0)
    rows.append(f"{'mean':<12}" + "".join(f"{v:>9.2f}" for v in m[:5]) + f"{m[5]:>10.3f}{m[6]:>10.3f}")
    rows.append(f"Pearson r (volumes): {'undefined' if r is None else f'{r:.4f}'}")
    return "\n".join(rows)


def cmd_evaluate(args, cfg) -> int:
    pred = _readable_dir(args.pred)
    gt = _readable_dir(args.gt)
    report = args.report
    report_dir = _writable_dir(os.path.dirname(os.path.abspath(report)))
    stem = os.path.splitext(os.path.basename(report))[0]
    pred_ids, gt_ids = case_ids(pred, "_seg.mvol"), case_ids(gt, "_mask.mvol")
    if set(pred_ids) != set(gt_ids) or not pred_ids:
        only_p = sorted(set(pred_ids) - set(gt_ids))
        only_g = sorted(set(gt_ids) - set(pred_ids))
        raise CommandError(EXIT_PAIRING, "case ids do not pair up: "
                           f"predictions only {only_p or '-'}, ground truth only {only_g or '-'}")
    reports, probs, masks = [], {}, {}
    for cid in pred_ids:
        seg = load_mask(os.path.join(pred, f"{cid}_seg.mvol"))
        mask = load_mask(os.path.join(gt, f"{cid}_mask.mvol"))
        if seg.dims != mask.dims:
            raise CommandError(EXIT_PAIRING, f"case {cid}: prediction {seg.dims} vs ground truth {mask.dims}")
        reports.append(metrics.evaluate_case(seg, mask, cid, mask.voxel_size, cfg.min_overlap))
        masks[cid] = mask
        if args.roc:
            path = os.path.join(pred, f"{cid}_prob.mvol")
            if not os.path.exists(path):
                raise CommandError(EXIT_IO, f"--roc needs probability map {path}")
            probs[cid] = ProbabilityMap(load_volume(path).data)
    with open(report, "w") as fh:
        fh.write(metrics.report_csv(reports))
    seg_ml = [r.seg_vol_ml for r in reports]
    gt_ml = [r.gt_vol_ml for r in reports]
    try:
        r = metrics.pearson_r(seg_ml, gt_ml)
    except DegenerateVariance as exc:
        log.warning("Pearson r undefined: %s", exc)
        r = None
    means = np.array([[x.vd, x.tpr, x.fpr, x.dsc, x.ppv] for x in reports]).mean(axis=0)
    with open(os.path.join(report_dir, f"{stem}_summary.txt"), "w") as fh:
        fh.write(f"n_cases={len(reports)}\n")
        fh.write(f"pearson_r={'nan' if r is None else repr(float(r))}\n")
        for name, v in zip(("vd", "tpr", "fpr", "dsc", "ppv"), means):
            fh.write(f"mean_{name}={float(v)!r}\n")
    print(_table(reports, r))
    figures = []
    if not args.no_plots:
        figures.append(plotting.volume_figure(seg_ml, gt_ml, os.path.join(report_dir, f"{stem}_volumes.png"), r))
    if args.roc:
        params = _read_params(pred)
        l_min = int(params.get("l_min", cfg.roc_l_min))
        t_grid, l_grid = cfg.train.t_bin_grid, cfg.train.l_min_grid
        sweeps, grid = {}, np.zeros((len(t_grid), len(l_grid)))
        for cid in pred_ids:
            rows = roc_sweep(probs[cid], masks[cid], l_min, t_grid)
            sweeps[cid] = rows
            with open(os.path.join(report_dir, f"{cid}_roc.csv"), "w") as fh:
                fh.write(roc_csv(rows))
            grid += dsc_grid(probs[cid], masks[cid], t_grid, l_grid)
        grid /= len(pred_ids)
        if not args.no_plots:
            i, j = np.unravel_index(np.argmax(grid), grid.shape)
            figures.append(plotting.roc_figure(sweeps, os.path.join(report_dir, f"{stem}_roc.png"), l_min))
            figures.append(plotting.sweep_figure(t_grid, l_grid, grid, os.path.join(report_dir, f"{stem}_sweep.png"),
                                                 (t_grid[i], l_grid[j], grid[i, j])))
    for f in figures:
        log.info("figure written: %s", f)
    print(f"report written to {report}")
    return EXIT_OK


# ---------------------------------------------------------------- plumbing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascade-seg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a configuration key (repeatable)")

    p = sub.add_parser("gen-phantom", help="write a synthetic cohort")
    common(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("-n", type=int, default=20, help="number of cases (default 20)")
    p.add_argument("--start", type=int, default=0, help="first case index (default 0)")
    p.set_defaults(func=cmd_gen_phantom)

    p = sub.add_parser("train", help="train the two-network cascade")
    common(p)
    p.add_argument("--data", help="directory of training cases with masks")
    p.add_argument("--model", help="output model directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="probability maps and binary masks for new cases")
    common(p)
    p.add_argument("--model", help="trained model directory")
    p.add_argument("--cases", help="directory of cases")
    p.add_argument("--out", help="output directory")
    p.add_argument("--prob", action="store_true", help="write probability maps")
    p.add_argument("--binary", action="store_true", help="write filtered binary masks")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    common(p)
    p.add_argument("--pred", required=True, help="directory with <id>_seg.mvol files")
    p.add_argument("--gt", required=True, help="directory with <id>_mask.mvol files")
    p.add_argument("--report", required=True, help="CSV report path; figures go alongside")
    p.add_argument("--roc", action="store_true", help="also write per-case ROC sweeps")
    p.add_argument("--no-plots", action="store_true", help="skip the figures")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        with _thread_limit():
            return args.func(args, cfg)
    except CommandError as exc:
        code, msg = exc.code, str(exc)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except (ChannelMismatch, MissingFlairChannel) as exc:
        code, msg = EXIT_CHANNEL, str(exc)
    except (MissingMask, NoPositives, SingleClassData, EmptyPatchSet) as exc:
        code, msg = EXIT_TRAIN, str(exc)
    except (MvolError, CheckpointError, OSError) as exc:
        code, msg = EXIT_IO, str(exc)
    print(f"cascade-seg: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
