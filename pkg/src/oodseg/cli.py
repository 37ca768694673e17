"""Command-line front end.

Subcommands:

* score      -- logits NPY -> anomaly-score NPY (msp, energy, entropy,
                eel, maskwise)
* eval       -- score maps + label PNGs -> metrics JSON (+ PR-curve CSV)
* loss       -- logits + mask (+ reference) -> loss value JSON + gradient NPY
* synth      -- composite anomaly images from manifests
* train-toy  -- run the toy training comparison, write traces/gaps/models
* report     -- aggregate metrics JSONs into a CSV table + figures

Exit codes: 0 success, 1 validation error, 2 runtime error. A config
file (YAML key-value tree) can supply any flag value; explicit flags
win over the config, the config wins over built-in defaults. Failed
runs remove whatever partial outputs they created. Every subcommand is
deterministic: rerunning with the same config and seed reproduces
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import __version__, losses, metrics, raster, report, scoring, synth, toytrain

logger = logging.getLogger("oodseg")

SCORE_METHODS = ("msp", "energy", "entropy", "eel", "maskwise")
LOSS_VARIANTS = ("eel", "consistency", "linear")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class CliValidationError(Exception):
    """Bad flags, unresolvable paths, or inconsistent configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map to exit 1
        raise CliValidationError(message)


class _Outputs:
    """Tracks files written by one run so failures leave nothing behind."""

    def __init__(self):
        self.paths: List[str] = []

    def register(self, path: str) -> str:
        self.paths.append(path)
        return path

    def discard_all(self):
        for path in self.paths:
            try:
                os.unlink(path)
            except OSError:
                pass


def _write_text_atomic(path: str, text: str, outputs: _Outputs) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
        outputs.register(path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _setup_logging():
    level_name = os.environ.get("OODSEG_LOG", "warn").lower()
    levels = {
        "error": logging.ERROR,
        "warn": logging.WARNING,
        "info": logging.INFO,
        "debug": logging.DEBUG,
    }
    if level_name not in levels:
        raise CliValidationError(
            f"OODSEG_LOG must be one of {sorted(levels)}, got {level_name!r}"
        )
    logging.basicConfig(
        level=levels[level_name], format="%(levelname)s %(name)s: %(message)s"
    )


def _load_config(path: Optional[str]) -> Dict:
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise CliValidationError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise CliValidationError(f"config file {path} must hold a key-value mapping")
    return data


def _merged(args: argparse.Namespace, config: Dict, key: str, default):
    """Precedence: explicit flag > config file > default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _collect_files(inputs: Sequence[str], suffix: str) -> List[str]:
    files: List[str] = []
    for item in inputs:
        if os.path.isdir(item):
            files.extend(
                os.path.join(item, name)
                for name in sorted(os.listdir(item))
                if name.endswith(suffix)
            )
        elif os.path.isfile(item):
            files.append(item)
        else:
            raise CliValidationError(f"input not found: {item}")
    if not files:
        raise CliValidationError(f"no {suffix} inputs found in {list(inputs)}")
    return files


def _stem(path: str) -> str:
    name = os.path.basename(path)
    for suffix in (".masks.npy", ".classes.npy", ".npy", ".png", ".json", ".csv"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return os.path.splitext(name)[0]


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------


def _score_one(path: str, method: str, alpha: float, out_dir: str, outputs: _Outputs):
    if method == "maskwise":
        if not path.endswith(".masks.npy"):
            raise CliValidationError(
                f"maskwise scoring expects <stem>.masks.npy inputs, got {path}"
            )
        classes_path = path[: -len(".masks.npy")] + ".classes.npy"
        if not os.path.isfile(classes_path):
            raise CliValidationError(f"missing class-score file {classes_path}")
        masks = np.load(path, allow_pickle=False)
        classes = np.load(classes_path, allow_pickle=False)
        pred = scoring.MaskPrediction(mask_logits=masks, class_scores=classes)
        score = scoring.maskwise_score(pred)
    else:
        logits = raster.load_raster(path, "logits")
        if method == "msp":
            score = scoring.msp_score(logits)
        elif method == "energy":
            score = raster.ScoreMap(scoring.energy_map(logits))
        elif method == "entropy":
            score = raster.ScoreMap(scoring.entropy_map(logits))
        else:
            score = scoring.eel_score(logits, scoring.ScoreConfig(alpha=alpha))
    out_path = os.path.join(out_dir, _stem(path) + ".npy")
    raster.save_raster(score, out_path)
    outputs.register(out_path)


def _cmd_score(args, config, outputs: _Outputs) -> int:
    method = _merged(args, config, "method", None)
    if method not in SCORE_METHODS:
        raise CliValidationError(f"--method must be one of {SCORE_METHODS}")
    alpha = float(_merged(args, config, "alpha", 1.0))
    out_dir = _merged(args, config, "out", None)
    if out_dir is None:
        raise CliValidationError("--out directory is required")
    jobs = int(_merged(args, config, "jobs", 1))
    suffix = ".masks.npy" if method == "maskwise" else ".npy"
    files = _collect_files(args.inputs, suffix)
    if method != "maskwise":
        files = [f for f in files if not f.endswith((".masks.npy", ".classes.npy"))]
        if not files:
            raise CliValidationError("no logits .npy inputs found")
    os.makedirs(out_dir, exist_ok=True)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(
                pool.map(
                    lambda f: _score_one(f, method, alpha, out_dir, outputs), files
                )
            )
    else:
        for f in files:
            _score_one(f, method, alpha, out_dir, outputs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _pairs_by_stem(score_files, label_files) -> List[Tuple[str, str]]:
    labels = {_stem(p): p for p in label_files}
    pairs = []
    missing = []
    for sf in score_files:
        stem = _stem(sf)
        if stem in labels:
            pairs.append((sf, labels[stem]))
        else:
            missing.append(stem)
    if missing:
        raise CliValidationError(
            f"score maps without matching labels: {sorted(missing)}"
        )
    if not pairs:
        raise CliValidationError("no score/label pairs found")
    return pairs


def _make_accumulator(mode, lo, hi, bins) -> metrics.EvalAccumulator:
    if mode == "exact":
        return metrics.EvalAccumulator.exact()
    if mode == "quantized":
        if lo is None or hi is None:
            raise CliValidationError("quantized mode requires --lo and --hi")
        return metrics.EvalAccumulator.quantized(float(lo), float(hi), int(bins))
    raise CliValidationError(f"--mode must be exact or quantized, got {mode!r}")


def _cmd_eval(args, config, outputs: _Outputs) -> int:
    mode = _merged(args, config, "mode", "exact")
    lo = _merged(args, config, "lo", None)
    hi = _merged(args, config, "hi", None)
    bins = _merged(args, config, "bins", 65536)
    out_path = _merged(args, config, "out", None)
    if out_path is None:
        raise CliValidationError("--out metrics path is required")
    jobs = int(_merged(args, config, "jobs", 1))

    score_files = _collect_files(args.scores, ".npy")
    label_files = _collect_files(args.labels, ".png")
    pairs = _pairs_by_stem(score_files, label_files)

    def eval_pair(pair):
        sf, lf = pair
        acc = _make_accumulator(mode, lo, hi, bins)
        acc.add(raster.load_raster(sf, "scores"), raster.load_raster(lf, "labels"))
        return acc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            shards = list(pool.map(eval_pair, pairs))
    else:
        shards = [eval_pair(p) for p in pairs]
    total = shards[0]
    for shard in shards[1:]:
        total = total.merge_with(shard)

    summary = metrics.metrics_summary(total)
    _write_text_atomic(out_path, json.dumps(summary, indent=2) + "\n", outputs)

    curve_path = _merged(args, config, "curve", None)
    if curve_path is not None:
        curve = metrics.export_pr_curve(total)
        buf = io.StringIO()
        metrics.write_pr_curve_csv(curve, buf)
        _write_text_atomic(curve_path, buf.getvalue(), outputs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _cmd_loss(args, config, outputs: _Outputs) -> int:
    variant = _merged(args, config, "variant", None)
    if variant not in LOSS_VARIANTS:
        raise CliValidationError(f"--variant must be one of {LOSS_VARIANTS}")
    alpha = float(_merged(args, config, "alpha", 1.0))
    sign = _merged(args, config, "inlier-entropy-sign", "as_printed")
    out_prefix = _merged(args, config, "out", None)
    if out_prefix is None:
        raise CliValidationError("--out prefix is required")

    logits = raster.load_raster(args.logits, "logits")
    mask = raster.load_raster(args.mask, "labels")
    if variant == "eel":
        hp = losses.HyperParams(alpha=alpha)
        result = losses.eel_loss(logits, mask, hp, inlier_entropy_sign=sign)
    elif variant == "linear":
        result = losses.linear_energy_loss(logits, mask)
    else:
        if args.reference is None:
            raise CliValidationError("consistency loss requires --reference logits")
        reference = raster.load_raster(args.reference, "logits")
        result = losses.consistency_loss(logits, reference, mask)

    grad_path = out_prefix + "_grad.npy"
    raster.save_raster(raster.LogitMap(result.grad), grad_path)
    outputs.register(grad_path)
    payload = {"variant": variant, "value": result.value}
    _write_text_atomic(out_prefix + ".json", json.dumps(payload, indent=2) + "\n", outputs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _synth_config(args, config, seed: int) -> synth.SynthConfig:
    ground = _merged(args, config, "ground-ids", "0,1")
    if isinstance(ground, str):
        ground_ids = tuple(int(g) for g in ground.split(",") if g != "")
    else:
        ground_ids = tuple(int(g) for g in ground)
    try:
        return synth.SynthConfig(
            num_classes=int(_merged(args, config, "num-classes", 19)),
            anomaly_id=int(_merged(args, config, "anomaly-id", 20)),
            ground_ids=ground_ids,
            scale_min=float(_merged(args, config, "scale-min", 0.5)),
            scale_max=float(_merged(args, config, "scale-max", 1.0)),
            luminance_matching=not bool(_merged(args, config, "no-luminance", False)),
            feather_radius=int(_merged(args, config, "feather", 0)),
            seed=seed,
        )
    except synth.SynthConfigError as exc:
        raise CliValidationError(str(exc)) from exc


def _cmd_synth(args, config, outputs: _Outputs) -> int:
    out_dir = _merged(args, config, "out", None)
    if out_dir is None:
        raise CliValidationError("--out directory is required")
    seed = int(_merged(args, config, "seed", 0))
    cfg = _synth_config(args, config, seed)
    print(f"seed: {seed}")
    replay = _merged(args, config, "replay", None)
    if replay is not None:
        records = synth.replay_manifest(replay, cfg, out_dir)
    else:
        images = _merged(args, config, "images", None)
        cutouts = _merged(args, config, "cutouts", None)
        if images is None or cutouts is None:
            raise CliValidationError("--images and --cutouts manifests are required")
        for path in (images, cutouts):
            if not os.path.isfile(path):
                raise CliValidationError(f"manifest not found: {path}")
        records = synth.synthesize_dataset(images, cutouts, cfg, out_dir)
    logger.info("wrote %d composites to %s", len(records), out_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-toy
# ---------------------------------------------------------------------------


def _cmd_train_toy(args, config, outputs: _Outputs) -> int:
    out_dir = _merged(args, config, "out", None)
    if out_dir is None:
        raise CliValidationError("--out directory is required")
    seeds_arg = _merged(args, config, "seeds", "1,2,3,4,5")
    if isinstance(seeds_arg, str):
        seeds = [int(s) for s in seeds_arg.split(",") if s != ""]
    else:
        seeds = [int(s) for s in seeds_arg]
    if not seeds:
        raise CliValidationError("need at least one seed")
    steps = int(_merged(args, config, "steps", 200))
    lr = float(_merged(args, config, "lr", 1.0))
    alpha = float(_merged(args, config, "alpha", 1.0))
    lam = float(_merged(args, config, "lambda", 0.05))
    hp = losses.HyperParams(alpha=alpha, lam=lam)
    os.makedirs(out_dir, exist_ok=True)
    print(f"seeds: {','.join(str(s) for s in seeds)}")

    trace_lines = ["seed,variant,step,loss"]
    gap_lines = ["seed,gap_eel,gap_linear,auprc_eel,auprc_msp"]
    for seed in seeds:
        result = toytrain.run_toy_experiment(seed, hp=hp, steps=steps, step_size=lr)
        for variant, trace in (("eel", result.trace_eel), ("linear", result.trace_linear)):
            for step, value in enumerate(trace):
                trace_lines.append(f"{seed},{variant},{step},{value:.17g}")
        gap_lines.append(
            f"{seed},{result.gap_eel:.17g},{result.gap_linear:.17g},"
            f"{result.auprc_eel:.17g},{result.auprc_msp:.17g}"
        )
        for variant, model in (("eel", result.model_eel), ("linear", result.model_linear)):
            path = os.path.join(out_dir, f"model_{variant}_seed{seed}.npy")
            arr = np.ascontiguousarray(model.as_vector(), dtype="<f8")
            with open(path, "wb") as fh:
                np.save(fh, arr, allow_pickle=False)
            outputs.register(path)
        logger.info(
            "seed %d: gap eel %+.3f vs linear %+.3f, auprc eel %.4f msp %.4f",
            seed,
            result.gap_eel,
            result.gap_linear,
            result.auprc_eel,
            result.auprc_msp,
        )
    _write_text_atomic(
        os.path.join(out_dir, "traces.csv"), "\n".join(trace_lines) + "\n", outputs
    )
    _write_text_atomic(
        os.path.join(out_dir, "gaps.csv"), "\n".join(gap_lines) + "\n", outputs
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _cmd_report(args, config, outputs: _Outputs) -> int:
    out_dir = _merged(args, config, "out", None)
    if out_dir is None:
        raise CliValidationError("--out directory is required")
    metric_files = _collect_files(args.inputs, ".json")
    os.makedirs(out_dir, exist_ok=True)
    rows = report.load_metrics_rows(metric_files)

    buf = io.StringIO()
    report.write_report_csv(rows, buf)
    _write_text_atomic(os.path.join(out_dir, "report.csv"), buf.getvalue(), outputs)

    figure_path = os.path.join(out_dir, "report_metrics.png")
    report.render_metric_bars(rows, figure_path)
    outputs.register(figure_path)

    if args.curves:
        curve_files = _collect_files(args.curves, ".csv")
        curves = []
        for path in sorted(curve_files):
            recall, precision = report.read_pr_curve_csv(path)
            curves.append((_stem(path), recall, precision))
        pr_path = os.path.join(out_dir, "pr_curves.png")
        report.render_pr_overlay(curves, pr_path)
        outputs.register(pr_path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="oodseg", description=__doc__)
    parser.add_argument("--version", action="version", version=f"oodseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file (flags override it)")
        p.add_argument("--jobs", type=int, help="worker threads for file-level parallelism")
        p.add_argument("--seed", type=int, help="random seed")

    p = sub.add_parser("score", help="compute anomaly score maps from logits NPYs")
    common(p)
    p.add_argument("inputs", nargs="+", help="logits .npy files or directories")
    p.add_argument("--method", choices=SCORE_METHODS)
    p.add_argument("--alpha", type=float, help="entropy weight for the eel score")
    p.add_argument("--out", help="output directory for score .npy files")

    p = sub.add_parser("eval", help="pixel-level AUPRC / FPR95 evaluation")
    common(p)
    p.add_argument("--scores", nargs="+", required=True, help="score .npy files or dirs")
    p.add_argument("--labels", nargs="+", required=True, help="label .png files or dirs")
    p.add_argument("--mode", choices=metrics.MODES)
    p.add_argument("--bins", type=int)
    p.add_argument("--lo", type=float)
    p.add_argument("--hi", type=float)
    p.add_argument("--out", help="metrics JSON output path")
    p.add_argument("--curve", help="optional PR-curve CSV output path")

    p = sub.add_parser("loss", help="evaluate a training loss and its gradient")
    common(p)
    p.add_argument("--variant", choices=LOSS_VARIANTS)
    p.add_argument("--logits", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--reference", help="reference logits (consistency variant)")
    p.add_argument("--alpha", type=float)
    p.add_argument(
        "--inlier-entropy-sign",
        choices=losses.INLIER_ENTROPY_SIGNS,
        dest="inlier_entropy_sign",
    )
    p.add_argument("--out", help="output prefix (writes <prefix>.json, <prefix>_grad.npy)")

    p = sub.add_parser("synth", help="composite anomaly images from manifests")
    common(p)
    p.add_argument("--images", help="inlier image manifest (JSONL)")
    p.add_argument("--cutouts", help="cutout library manifest (JSONL)")
    p.add_argument("--replay", help="replay a recorded synth manifest")
    p.add_argument("--out", help="output directory")
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--anomaly-id", type=int, dest="anomaly_id")
    p.add_argument("--ground-ids", dest="ground_ids")
    p.add_argument("--scale-min", type=float, dest="scale_min")
    p.add_argument("--scale-max", type=float, dest="scale_max")
    p.add_argument("--no-luminance", action="store_const", const=True, dest="no_luminance")
    p.add_argument("--feather", type=int)

    p = sub.add_parser("train-toy", help="train the toy comparison and export results")
    common(p)
    p.add_argument("--seeds", help="comma-separated seed battery (default 1,2,3,4,5)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", type=float, dest="lambda_")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("report", help="aggregate metrics JSONs into CSV + figures")
    common(p)
    p.add_argument("inputs", nargs="+", help="metrics .json files or directories")
    p.add_argument("--curves", nargs="*", help="PR-curve CSVs to overlay")
    p.add_argument("--out", help="output directory")

    return parser


_COMMANDS = {
    "score": _cmd_score,
    "eval": _cmd_eval,
    "loss": _cmd_loss,
    "synth": _cmd_synth,
    "train-toy": _cmd_train_toy,
    "report": _cmd_report,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    outputs = _Outputs()
    try:
        _setup_logging()
        parser = build_parser()
        args = parser.parse_args(argv)
        config = _load_config(getattr(args, "config", None))
        # expose --lambda under a config-friendly name
        if getattr(args, "lambda_", None) is not None:
            setattr(args, "lambda", args.lambda_)
        return _COMMANDS[args.command](args, config, outputs)
    except CliValidationError as exc:
        outputs.discard_all()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (
        raster.RasterError,
        synth.SynthConfigError,
        synth.PlacementSearchError,
        metrics.UndefinedMetricError,
        toytrain.DivergenceError,
        ValueError,
        OSError,
    ) as exc:
        outputs.discard_all()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
