"""``theftgate`` command line: synthesize, ingest, split, select, train,
evaluate and run experiments. Every run writes a JSON manifest recording
the command, its flags, the seed, library versions and input and output
digests; ``theftgate replay MANIFEST`` re-runs it.

Errors are reported as one JSON line on stderr. Usage errors, missing
files and schema mismatches exit with code 2, other failures with 1.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

import theftgate
from theftgate import experiments, featsel, ingest, pipeline, synthgen
from theftgate.frame import (
    FeatureFrame,
    FrameFormatError,
    load_frame,
    read_frame_csv,
    save_frame,
    write_frame_csv,
)
from theftgate.learners import (
    EXTRA_TREES,
    GRADIENT_BOOSTED,
    ISOLATION_FOREST,
    SUPERVISED_KINDS,
    HyperParams,
    fit_by_kind,
    importance,
)
from theftgate.learners.model import UnsupportedModelError
from theftgate.telemetry import SchemaError

logger = logging.getLogger("theftgate")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
# flags that must never change outputs, so they stay out of manifests
_VOLATILE = ("--threads", "--log-level", "--manifest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would print usage and exit
        raise UsageError(message)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")


def _stable_argv(argv: Sequence[str]) -> list[str]:
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok in _VOLATILE:
            skip = True
            continue
        if any(tok.startswith(f + "=") for f in _VOLATILE):
            continue
        out.append(tok)
    return out


def _write_manifest(path: Path, args, argv, inputs, outputs) -> None:
    manifest = {
        "command": args.command,
        "argv": _stable_argv(argv),
        "seed": getattr(args, "seed", None),
        "versions": {"theftgate": theftgate.__version__, "numpy": np.__version__},
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if p is not None},
        "outputs": {str(p): _sha256(Path(p)) for p in outputs if p is not None},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _dump_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_names(path) -> list[str]:
    _require(path)
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


def _write_names(names: Sequence[str], path) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def _load_any_frame(path) -> FeatureFrame:
    _require(path)
    return read_frame_csv(path) if str(path).endswith(".csv") else load_frame(path)


def _save_any_frame(frame: FeatureFrame, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if str(path).endswith(".csv"):
        write_frame_csv(frame, path)
    else:
        save_frame(frame, path)


# -- hyperparameter flags -----------------------------------------------------

def _add_hp(p: argparse.ArgumentParser) -> None:
    d = HyperParams()
    g = p.add_argument_group("learner hyperparameters")
    g.add_argument("--trees", type=int, default=d.tree_count)
    g.add_argument("--max-depth", type=int, default=d.max_depth)
    g.add_argument("--min-leaf", type=int, default=d.min_leaf)
    g.add_argument("--feature-fraction", type=float, default=None,
                   help="features tried per split; default sqrt(p)")
    g.add_argument("--learning-rate", type=float, default=d.learning_rate)
    g.add_argument("--rounds", type=int, default=d.boosting_rounds)
    g.add_argument("--l2", type=float, default=d.l2_leaf)
    g.add_argument("--knn-k", type=int, default=d.knn_k)
    g.add_argument("--iso-sample", type=int, default=d.iso_subsample_size)
    g.add_argument("--boost-depth", type=int, default=d.boost_max_depth)
    g.add_argument("--histogram-bins", type=int, default=d.histogram_bins)


def _hp(args, **overrides) -> HyperParams:
    values = dict(
        tree_count=args.trees, max_depth=args.max_depth, min_leaf=args.min_leaf,
        feature_subsample=args.feature_fraction, learning_rate=args.learning_rate,
        boosting_rounds=args.rounds, l2_leaf=args.l2, knn_k=args.knn_k,
        iso_subsample_size=args.iso_sample, boost_max_depth=args.boost_depth,
        histogram_bins=args.histogram_bins,
    )
    values.update(overrides)
    try:
        return HyperParams(**values)
    except ValueError as e:
        raise UsageError(str(e)) from None


# -- subcommands --------------------------------------------------------------

_SYNTH_FLAGS = {
    "users": ("--users", int), "rows_per_user": ("--rows-per-user", int), "g": ("--g", int),
    "n": ("--n", int), "app_count": ("--apps", int), "rare_app_count": ("--rare-apps", int),
    "imbalance_ratio": ("--imbalance", float), "null_fraction": ("--null-fraction", float),
    "overlap": ("--overlap", float), "informative_feature_count": ("--informative", int),
    "separation_scale": ("--separation-scale", float),
    "session_probes": ("--session-probes", int), "user_shift": ("--user-shift", float),
}


def cmd_synth(args, argv) -> int:
    base = {}
    if args.config:
        _require(args.config)
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    for field_name, (flag, _) in _SYNTH_FLAGS.items():
        v = getattr(args, field_name)
        if v is not None:
            base[field_name] = v
    if args.target_mix:
        base["target_class_mix"] = [float(x) for x in args.target_mix.split(",")]
    base["seed"] = args.seed
    try:
        cfg = synthgen.SynthConfig.from_dict(base)
    except (synthgen.InfeasibleConfigError, TypeError) as e:
        raise UsageError(str(e)) from None
    data = synthgen.generate(cfg, threads=args.threads)
    out = Path(args.out)
    paths = synthgen.write_csvs(data, out)
    cfg_path = out / "synth_config.json"
    _dump_json(cfg.to_dict(), cfg_path)
    _write_manifest(Path(args.manifest or out / "manifest.json"), args, argv,
                    [args.config], [*paths.values(), cfg_path])
    return EXIT_OK


def cmd_ingest(args, argv) -> int:
    _require(args.gsf, args.laf, args.labels)
    if not 0.0 <= args.null_threshold <= 1.0:
        raise UsageError("--null-threshold must lie in [0, 1]")
    if args.slack_ms < 0:
        raise UsageError("--slack-ms must be non-negative")
    result = ingest.ingest(args.gsf, args.laf, args.labels, args.slack_ms, args.null_threshold)
    _save_any_frame(result.frame, args.out)
    report = args.report or f"{args.out}.report.json"
    _dump_json(result.to_dict(), report)
    outputs = [args.out, report]
    if args.frame_csv:
        write_frame_csv(result.frame, args.frame_csv)
        outputs.append(args.frame_csv)
    _write_manifest(Path(args.manifest or f"{args.out}.manifest.json"), args, argv,
                    [args.gsf, args.laf, args.labels], outputs)
    return EXIT_OK


def cmd_convert(args, argv) -> int:
    frame = _load_any_frame(args.input)
    _save_any_frame(frame, args.out)
    _write_manifest(Path(args.manifest or f"{args.out}.manifest.json"), args, argv,
                    [args.input], [args.out])
    return EXIT_OK


def cmd_split(args, argv) -> int:
    frame = _load_any_frame(args.frame)
    if not 0.0 < args.train_fraction < 1.0:
        raise UsageError("--train-fraction must lie strictly between 0 and 1")
    train, test, info = experiments.stratified_split(frame, args.train_fraction,
                                                     np.random.default_rng(args.seed))
    _save_any_frame(train, args.train_out)
    _save_any_frame(test, args.test_out)
    _write_manifest(Path(args.manifest or f"{args.train_out}.manifest.json"), args, argv,
                    [args.frame], [args.train_out, args.test_out])
    return EXIT_OK


def _factory(kind: str, hp: HyperParams, classes=None):
    def make(X, y, rng):
        return fit_by_kind(kind, X, y, hp, rng, classes=classes)
    return make


def cmd_select(args, argv) -> int:
    frame = _load_any_frame(args.frame)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(args.seed).spawn(4)
    rank_hp = _hp(args, boosting_rounds=args.rank_rounds)
    malicious = frame.label == 1
    if not malicious.any():
        raise UsageError("selection needs malicious rows for the target stage")
    tgt_frame = frame.take(np.flatnonzero(malicious))
    outputs = []
    stages = (
        ("detector", frame, frame.label.astype(np.int64), args.k_detect, args.detector,
         featsel.FOR_METRIC, _hp(args, tree_count=args.select_trees)),
        ("target", tgt_frame, tgt_frame.target.astype(np.int64), args.k_target, args.classifier,
         featsel.MACRO_F1, _hp(args, boosting_rounds=args.select_rounds,
                               tree_count=args.select_trees)),
    )
    for i, (name, fr, y, k, kind, metric, sel_hp) in enumerate(stages):
        k_eff = min(k, len(fr.columns))
        if k_eff < k:
            logger.info("%s: k=%d exceeds %d columns; using all", name, k, len(fr.columns))
        model = featsel.fit_boosted(fr, y, rank_hp, np.random.default_rng(seeds[2 * i]),
                                    threads=args.threads)
        ranked = importance(model)
        ranking_path = out / f"{name}_ranking.csv"
        with open(ranking_path, "w", encoding="utf-8") as fh:
            fh.write("rank,feature,gain\n")
            for r, (feat, gain) in enumerate(ranked, start=1):
                fh.write(f"{r},{json.dumps(feat) if ',' in feat else feat},{gain!r}\n")
        candidates = [feat for feat, _ in ranked[:k_eff]]
        trace = featsel.forward_select(
            fr, y, candidates, _factory(kind, sel_hp), metric, args.tolerance, args.patience,
            args.max_features, seed=int(seeds[2 * i + 1].generate_state(1)[0]),
            threads=args.threads)
        trace_path = out / f"{name}_trace.csv"
        experiments.write_convergence_csv(trace, trace_path)
        names_path = out / f"{name}_features.txt"
        _write_names(trace.chosen, names_path)
        outputs += [ranking_path, trace_path, names_path]
        logger.info("%s: %d features chosen (%s)", name, len(trace.chosen), trace.stop_reason)
    _write_manifest(Path(args.manifest or out / "manifest.json"), args, argv, [args.frame], outputs)
    return EXIT_OK


def cmd_train(args, argv) -> int:
    frame = _load_any_frame(args.frame)
    det = _read_names(args.detector_features) if args.detector_features else frame.columns
    tgt = _read_names(args.target_features) if args.target_features else frame.columns
    hp = _hp(args)
    model = pipeline.train_two_stage(frame, det, tgt, hp, np.random.default_rng(args.seed),
                                     args.detector, args.classifier,
                                     contamination=args.contamination, threads=args.threads)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    pipeline.save_pipeline(model, args.out)
    _write_manifest(Path(args.manifest or f"{args.out}.manifest.json"), args, argv,
                    [args.frame, args.detector_features, args.target_features], [args.out])
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    _require(args.pipeline)
    model = pipeline.load_pipeline(args.pipeline)
    test = _load_any_frame(args.test)
    verdicts = pipeline.classify_batch(model, test)
    report = pipeline.evaluate_two_stage(model, test, verdicts)
    d = report.to_dict()
    d["metadata"]["stage2_invocations"] = model.stage2_invocations
    d["for_rate"] = d["stage1"]["for_rate"]
    d["fpr_rate"] = d["stage1"]["fpr_rate"]
    d["macro_f1"] = d["stage2"]["macro_f1"]
    _dump_json(d, args.report)
    outputs = [args.report]
    if args.verdicts:
        pipeline.write_verdicts_csv(test, verdicts, args.verdicts)
        outputs.append(args.verdicts)
    _write_manifest(Path(args.manifest or f"{args.report}.manifest.json"), args, argv,
                    [args.pipeline, args.test], outputs)
    return EXIT_OK


def _grid(args) -> list[float]:
    if not 0.0 < args.grid_start <= args.grid_stop < 1.0 or args.grid_step <= 0:
        raise UsageError("grid must satisfy 0 < start <= stop < 1 and step > 0")
    count = int(np.floor((args.grid_stop - args.grid_start) / args.grid_step + 1e-9)) + 1
    return [round(args.grid_start + i * args.grid_step, 10) for i in range(count)]


def cmd_progressive(args, argv) -> int:
    frame = _load_any_frame(args.frame)
    grid = _grid(args)
    users = list(dict.fromkeys(frame.users.tolist()))
    frames = [frame.take(np.flatnonzero(frame.users == u)) for u in users]
    factory = _factory(args.detector, _hp(args), classes=[0, 1])
    points = experiments.progressive_learning(frames, factory, args.threshold, grid,
                                              seed=args.seed, threads=args.threads)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    experiments.write_progressive_csv(points, args.out)
    outputs = [args.out]
    if args.trace_out:
        experiments.write_progressive_trace_csv(points, args.trace_out)
        outputs.append(args.trace_out)
    _write_manifest(Path(args.manifest or f"{args.out}.manifest.json"), args, argv,
                    [args.frame], outputs)
    return EXIT_OK


def cmd_density(args, argv) -> int:
    frame = _load_any_frame(args.frame)
    if args.features:
        names = [n for n in args.features.split(",") if n]
    elif args.features_file:
        names = _read_names(args.features_file)
    else:
        names = frame.columns
    profiles = experiments.density_profile(frame, names)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    experiments.write_density_csv(profiles, args.out)
    outputs = [args.out]
    if args.summary:
        experiments.write_overlap_csv(profiles, args.summary)
        outputs.append(args.summary)
    _write_manifest(Path(args.manifest or f"{args.out}.manifest.json"), args, argv,
                    [args.frame, args.features_file], outputs)
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    _require(args.manifest_file)
    manifest = json.loads(Path(args.manifest_file).read_text(encoding="utf-8"))
    inner = list(manifest["argv"]) + ["--threads", str(args.threads)]
    code = main(inner)
    if code != EXIT_OK:
        return code
    if args.check:
        changed = [p for p, digest in manifest["outputs"].items()
                   if not Path(p).is_file() or _sha256(Path(p)) != digest]
        if changed:
            raise RuntimeError(f"replayed outputs differ from the manifest: {changed}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="theftgate", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=theftgate.__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str, fn, help_text: str, seed: bool = False) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--threads", type=int, default=1, help="worker threads; never changes outputs")
        p.add_argument("--manifest", default=None, help="manifest path (default: next to outputs)")
        p.add_argument("--log-level", default="WARNING",
                       choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        if seed:
            p.add_argument("--seed", type=int, required=True)
        return p

    p = command("synth", cmd_synth, "generate labeled probe CSVs", seed=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="JSON config; flags override its fields")
    for field_name, (flag, typ) in _SYNTH_FLAGS.items():
        p.add_argument(flag, dest=field_name, type=typ, default=None)
    p.add_argument("--target-mix", default=None, help="six comma-separated class weights")

    p = command("ingest", cmd_ingest, "pivot-merge probes, join labels, filter nulls")
    p.add_argument("--gsf", required=True)
    p.add_argument("--laf", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="frame.bin (or .csv) to write")
    p.add_argument("--null-threshold", type=float, default=ingest.DEFAULT_NULL_THRESHOLD)
    p.add_argument("--slack-ms", type=int, default=ingest.DEFAULT_SLACK_MS)
    p.add_argument("--report", default=None)
    p.add_argument("--frame-csv", default=None, help="also write the frame as CSV")

    p = command("convert", cmd_convert, "convert a frame between .bin and .csv")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = command("split", cmd_split, "stratified train/test split", seed=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.add_argument("--train-out", required=True)
    p.add_argument("--test-out", required=True)

    p = command("select", cmd_select, "rank and forward-select features per stage", seed=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k-detect", type=int, default=150)
    p.add_argument("--k-target", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--max-features", type=int, default=50)
    p.add_argument("--rank-rounds", type=int, default=50)
    p.add_argument("--select-trees", type=int, default=20)
    p.add_argument("--select-rounds", type=int, default=20)
    p.add_argument("--detector", default=EXTRA_TREES, choices=SUPERVISED_KINDS)
    p.add_argument("--classifier", default=GRADIENT_BOOSTED, choices=SUPERVISED_KINDS)
    _add_hp(p)

    p = command("train", cmd_train, "train the two-stage pipeline", seed=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--out", required=True, help="pipeline.bin to write")
    p.add_argument("--detector-features", default=None, help="file with one name per line")
    p.add_argument("--target-features", default=None)
    p.add_argument("--detector", default=EXTRA_TREES, choices=SUPERVISED_KINDS + (ISOLATION_FOREST,))
    p.add_argument("--classifier", default=GRADIENT_BOOSTED, choices=SUPERVISED_KINDS)
    p.add_argument("--contamination", type=float, default=0.1)
    _add_hp(p)

    p = command("eval", cmd_eval, "evaluate a pipeline on a labeled test frame")
    p.add_argument("--pipeline", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--report", default="report.json")
    p.add_argument("--verdicts", default=None, help="also write per-row verdicts CSV")

    p = command("progressive", cmd_progressive, "progressive-learning curve", seed=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace-out", default=None)
    p.add_argument("--threshold", type=float, default=0.15)
    p.add_argument("--grid-start", type=float, default=0.10)
    p.add_argument("--grid-stop", type=float, default=0.90)
    p.add_argument("--grid-step", type=float, default=0.025)
    p.add_argument("--detector", default=EXTRA_TREES, choices=SUPERVISED_KINDS)
    _add_hp(p)

    p = command("density", cmd_density, "class-conditional density profiles")
    p.add_argument("--frame", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--summary", default=None, help="per-feature overlap CSV")
    p.add_argument("--features", default=None, help="comma-separated names")
    p.add_argument("--features-file", default=None)

    p = command("replay", cmd_replay, "re-run the command recorded in a manifest")
    p.add_argument("manifest_file")
    p.add_argument("--check", action="store_true", help="fail if outputs differ from the manifest")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    line = json.dumps({"error": kind, "message": message, "exit_code": code}, sort_keys=True)
    print(line, file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail("UsageError", str(e), EXIT_USAGE)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(getattr(logging, args.log_level))
    if args.threads < 1:
        return _fail("UsageError", "--threads must be at least 1", EXIT_USAGE)
    try:
        return args.func(args, argv)
    except (UsageError, FileNotFoundError, SchemaError, FrameFormatError,
            UnsupportedModelError) as e:
        return _fail(type(e).__name__, str(e), EXIT_USAGE)
    except Exception as e:  # any other failure still yields one parsable line
        return _fail(type(e).__name__, str(e), EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
