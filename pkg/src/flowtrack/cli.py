"""Operator entry points: generate, train, track, evaluate, benchmark, plot.

Every command is deterministic given --seed and its inputs; artifact
outputs (scenario files, checkpoints, track files, reports, SVG plots)
are written atomically and byte-identical across reruns. The training
loss log contains wall-clock times and is the one output excluded from
the byte-identity guarantee.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import io as fio
from .assoc import build_graph, derive_gold
from .baselines import AFFINITY_KINDS, affinity, fit_threshold, rule_error
from .datagen import generate, make_benchmark
from .errors import DataFormatError, FlowTrackError, NumericalError
from .features import compute_graph_features
from .learning import (
    AdamState,
    TrainConfig,
    ValBundle,
    match_scorer_forward,
    prepare_instances,
    train_end_to_end,
    train_piecewise,
)
from .metrics import (
    aggregate_reports,
    evaluate,
    matching_accuracy,
    report_to_json,
    report_to_text,
    trajectories_to_box_tracks,
)
from .scoring import ScorerConfig
from .solver import solve

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse with the documented usage exit code (1, not 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path: str | None) -> fio.RunConfig:
    return fio.read_config(path) if path else fio.RunConfig.defaults()


def _load_dataset(directory: str, cfg: fio.RunConfig, need_gt: bool):
    names = fio.sequence_names(directory)
    if not names:
        raise DataFormatError(f"no sequences (*.dets.txt) found in {directory}")
    data = []
    for name in names:
        seq, gt = fio.read_scenario(directory, name,
                                    cfg.features.appearance_blocks,
                                    cfg.features.block_len)
        if need_gt and gt is None:
            raise DataFormatError(f"sequence {name} has no ground-truth labels")
        data.append((name, seq, gt))
    return data


# --- gen -------------------------------------------------------------------

def _cmd_gen(args) -> int:
    configs = make_benchmark(args.profile, seed_offset=args.seed)
    for i, cfg in enumerate(configs):
        seq, gt_tracks, _ = generate(cfg)
        fio.write_scenario(args.out, f"{i:04d}", seq, gt_tracks)
    print(f"wrote {len(configs)} sequences to {args.out}")
    return EXIT_OK


# --- train -----------------------------------------------------------------

def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = cfg.train.seed if args.seed is None else args.seed
    data = _load_dataset(args.data, cfg, need_gt=True)
    pairs = [(seq, gt) for _, seq, gt in data]

    train_cfg = TrainConfig(window_len=cfg.train.window_len,
                            batch_size=cfg.train.batch_size,
                            iterations=cfg.train.iterations,
                            seed=seed,
                            init_std=cfg.train.init_std)
    scorer_cfg = cfg.scorer
    instances = prepare_instances(pairs, cfg.features, cfg.train.window_len,
                                  cfg.gate, cfg.gold_iou_threshold)
    if not instances:
        raise DataFormatError("no trainable windows in the dataset")

    log_path = args.out + ".log"
    header = [f"# mode = {args.mode}", f"# seed = {seed}"]
    header += [f"# {line}" for line in fio.echo_config(cfg).strip().splitlines()
               if line.startswith("train.")]
    log_lines = list(header)

    if args.mode == "end2end":
        adam = AdamState(lr=cfg.train.lr, beta1=cfg.train.beta1,
                         beta2=cfg.train.beta2, epsilon=cfg.train.epsilon)
        result = train_end_to_end(instances, train_cfg, cfg.features, scorer_cfg,
                                  adam=adam)
        log_lines += result.log_lines
        model = result.model
    else:
        # last fifth of the sequences (at least one) validates the line search
        n_val = max(1, len(pairs) // 5)
        val_bundles = []
        for _, seq, gt in data[-n_val:]:
            graph = build_graph(seq, (0, seq.n_frames), cfg.gate)
            features = compute_graph_features(graph, seq, cfg.features)
            val_bundles.append(ValBundle(seq, gt, graph, features))
        model = train_piecewise(instances, val_bundles, train_cfg, cfg.features,
                                scorer_cfg, lr=cfg.train.lr,
                                epochs=cfg.train.iterations,
                                iou_threshold=cfg.metrics.iou_threshold)
    fio.save_checkpoint(model, args.out)
    fio.atomic_write(log_path, "".join(line + "\n" for line in log_lines))
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


# --- track -----------------------------------------------------------------

def _track_sequence(seq, model, cfg: fio.RunConfig):
    graph = build_graph(seq, (0, seq.n_frames), cfg.gate)
    from .scoring import score_graph

    theta, _ = score_graph(model, graph, seq, cfg.features)
    solution = solve(graph.with_costs(theta))
    return solution


def _cmd_track(args) -> int:
    cfg = _load_config(args.config)
    model = fio.load_checkpoint(args.model)
    data = _load_dataset(args.data, cfg, need_gt=False)
    single_file = len(data) == 1 and args.out.endswith(".txt")
    for name, seq, _ in data:
        solution = _track_sequence(seq, model, cfg)
        records = fio.trajectories_to_records(solution.trajectories, seq)
        path = args.out if single_file else os.path.join(args.out, f"{name}.txt")
        fio.write_kitti_labels(records, path)
    print(f"tracked {len(data)} sequences")
    return EXIT_OK


# --- eval ------------------------------------------------------------------

def _label_sources(path: str) -> list[tuple[str, str]]:
    """(name, file) pairs from a single label file or a directory of them."""
    if os.path.isdir(path):
        names = sorted(f for f in os.listdir(path) if f.endswith(".txt"))
        if not names:
            raise DataFormatError(f"no label files in {path}")
        return [(os.path.splitext(n)[0], os.path.join(path, n)) for n in names]
    return [(os.path.splitext(os.path.basename(path))[0], path)]


def _cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    hyp_sources = dict(_label_sources(args.hyp))
    gt_sources = dict(_label_sources(args.gt))
    if set(hyp_sources) != set(gt_sources):
        # allow a gt data directory with *.gt suffixed names
        remap = {}
        for name, path in gt_sources.items():
            remap[name[:-3] if name.endswith(".gt") else name] = path
        gt_sources = remap
    missing = sorted(set(gt_sources) - set(hyp_sources))
    if missing:
        raise DataFormatError(f"no hypothesis for sequences: {missing}")
    reports = []
    for name in sorted(gt_sources):
        gt_tracks, _ = fio.records_to_ground_truth(fio.read_kitti_labels(gt_sources[name]))
        hyp_tracks, _ = fio.records_to_ground_truth(fio.read_kitti_labels(hyp_sources[name]))
        reports.append(evaluate(hyp_tracks, gt_tracks,
                                iou_threshold=cfg.metrics.iou_threshold,
                                mode=cfg.metrics.mode,
                                dist_threshold_m=cfg.metrics.dist_threshold_m))
    report = reports[0] if len(reports) == 1 else aggregate_reports(reports)
    fio.atomic_write(args.out + ".txt", report_to_text(report))
    fio.atomic_write(args.out + ".json", report_to_json(report))
    print(report_to_text(report), end="")
    return EXIT_OK


# --- match-bench -------------------------------------------------------------

def _collect_pairs(data, cfg: fio.RunConfig):
    """Per sequence: (detection pair list, features, labels) over all links."""
    out = []
    for _, seq, gt in data:
        graph = build_graph(seq, (0, seq.n_frames), cfg.gate)
        if not graph.layout.links:
            continue
        features = compute_graph_features(graph, seq, cfg.features)
        gold = derive_gold(graph, seq, gt, cfg.gold_iou_threshold)
        layout = graph.layout
        labels = np.array([gold.assignment.values[layout.link_var(l)]
                           for l in range(len(layout.links))], dtype=bool)
        dets = [(seq.detection(layout.det_keys[j][1]), seq.detection(layout.det_keys[k][1]))
                for j, k in layout.links]
        out.append((dets, features, labels))
    return out


def _cmd_match_bench(args) -> int:
    cfg = _load_config(args.config)
    model = fio.load_checkpoint(args.model)
    data = _load_dataset(args.data, cfg, need_gt=True)
    per_seq = _collect_pairs(data, cfg)
    if not per_seq:
        raise DataFormatError("dataset has no linkable pairs")

    n = len(per_seq)
    if n >= 4:
        # documented split: first half fits thresholds, next quarter
        # validates them, the final quarter reports the errors
        fit_end = n // 2
        val_end = fit_end + max(1, n // 4)
    else:
        fit_end, val_end = n, n  # tiny datasets: fit = val = eval
    groups = {
        "fit": per_seq[:fit_end] or per_seq,
        "val": per_seq[fit_end:val_end] or per_seq,
        "eval": per_seq[val_end:] or per_seq,
    }

    def stack_labels(chunk):
        return np.concatenate([labels for _, _, labels in chunk])

    rows = []
    eval_labels = stack_labels(groups["eval"])
    for kind in AFFINITY_KINDS:
        values = {part: np.array([affinity(a, b, kind)
                                  for dets, _, _ in chunk for a, b in dets])
                  for part, chunk in groups.items()}
        fit_n = len(values["fit"])
        joined = np.concatenate([values["fit"], values["val"]])
        labels = np.concatenate([stack_labels(groups["fit"]), stack_labels(groups["val"])])
        rule = fit_threshold(joined, labels,
                             (np.arange(fit_n), np.arange(fit_n, len(joined))))
        err = rule_error(rule, values["eval"], eval_labels)
        rows.append((kind, err, f"thr={rule.threshold:.6g} "
                                f"dir={'above' if rule.predict_above else 'below'}"))

    scores = np.concatenate([match_scorer_forward(model, feats)
                             for _, feats, _ in groups["eval"]])
    rows.append(("learned_matcher", matching_accuracy(scores, eval_labels), "thr=0"))

    lines = [f"{name}\t{err:.6f}\t{info}" for name, err, info in rows]
    fio.atomic_write(args.out, "".join(line + "\n" for line in lines))
    print("\n".join(lines))
    return EXIT_OK


# --- plot --------------------------------------------------------------------

_PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4",
            "#f032e6", "#bfef45", "#fabed4", "#469990", "#9a6324", "#808000")

_SVG_W, _SVG_H = 480, 560
_X_RANGE = (0.0, 42.0)    # forward, drawn bottom to top
_Y_RANGE = (-18.0, 18.0)  # left, drawn right to left


def render_tracks_svg(points_by_track: dict[int, list[tuple[float, float]]]) -> str:
    """Bird's-eye SVG: one polyline per trajectory, colors keyed by id."""
    def to_svg(x: float, y: float) -> tuple[float, float]:
        sx = (_Y_RANGE[1] - y) / (_Y_RANGE[1] - _Y_RANGE[0]) * _SVG_W
        sy = (_X_RANGE[1] - x) / (_X_RANGE[1] - _X_RANGE[0]) * _SVG_H
        return sx, sy

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="#ffffff"/>',
    ]
    for track_id in sorted(points_by_track):
        pts = points_by_track[track_id]
        if not pts:
            continue
        color = _PALETTE[track_id % len(_PALETTE)]
        coords = " ".join(f"{sx:.2f},{sy:.2f}" for sx, sy in (to_svg(x, y) for x, y in pts))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" '
                     f'points="{coords}"/>')
        sx, sy = to_svg(*pts[0])
        parts.append(f'<circle cx="{sx:.2f}" cy="{sy:.2f}" r="3" fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _cmd_plot(args) -> int:
    records = fio.read_kitti_labels(args.tracks)
    points: dict[int, list[tuple[float, float]]] = {}
    for rec in sorted(records, key=lambda r: (r.track_id, r.frame)):
        if rec.dont_care:
            continue
        box3d, _ = fio.record_to_boxes(rec)
        points.setdefault(rec.track_id, []).append((box3d.center_x, box3d.center_y))
    fio.atomic_write(args.out, render_tracks_svg(points))
    print(f"plotted {len(points)} trajectories to {args.out}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="flowtrack",
                     description="Min-cost-flow multi-object tracking with "
                                 "learned cost functions.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[], help="generate a synthetic benchmark",
                       description="Write a named benchmark profile (smoke, "
                                   "standard, hard) as scenario files.")
    p.add_argument("--profile", required=True, choices=("smoke", "standard", "hard"))
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0,
                   help="offset added to every scenario seed (default 0)")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a cost model",
                       description="Train end-to-end (structured hinge through "
                                   "the solver) or piecewise (independent "
                                   "classifiers + line search; the last fifth "
                                   "of the sequences validates the scalars).")
    p.add_argument("--data", required=True, help="dataset directory with labels")
    p.add_argument("--config", help="run-config file (defaults when omitted)")
    p.add_argument("--mode", choices=("end2end", "piecewise"), default="end2end")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--seed", type=int, help="override the config training seed")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("track", help="associate detections into trajectories",
                       description="Solve the association problem per sequence "
                                   "and write KITTI-layout track files. --out "
                                   "is a directory unless the dataset has one "
                                   "sequence and --out ends in .txt.")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="run-config file")
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("eval", help="CLEAR MOT evaluation",
                       description="Evaluate hypothesis tracks against ground "
                                   "truth; multi-sequence inputs aggregate. "
                                   "Writes OUT.txt and OUT.json.")
    p.add_argument("--hyp", required=True, help="track file or directory")
    p.add_argument("--gt", required=True, help="label file or directory")
    p.add_argument("--out", required=True, help="report path prefix")
    p.add_argument("--config", help="run-config file")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("match-bench", help="compare the matcher to affinity baselines",
                       description="Error-rate table over held-out pairs: every "
                                   "affinity baseline with a cross-validated "
                                   "threshold, plus the learned matcher at "
                                   "threshold 0. Split by sequence order: first "
                                   "half fits, next quarter validates, final "
                                   "quarter reports.")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output table (tsv)")
    p.add_argument("--config", help="run-config file")
    p.set_defaults(func=_cmd_match_bench)

    p = sub.add_parser("plot", help="render trajectories to SVG",
                       description="Static bird's-eye plot, one polyline per "
                                   "trajectory, colors fixed by track id.")
    p.add_argument("--tracks", required=True, help="KITTI-layout track file")
    p.add_argument("--out", required=True, help="SVG output path")
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FlowTrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
