"""Command line: scene generation, training, evaluation, prediction and checks.

Exit status is 0 on success, 1 on a failed check or unusable input and 2 on a
usage error. ``M2T2_DATA_DIR`` is the default data root.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .datagen import (BundleError, GenerationError, bundle_checksums, deserialize, generate_scene, list_bundles,
                      serialize)
from .network import CheckpointError

log = logging.getLogger("m2t2")

DATA_ENV = "M2T2_DATA_DIR"


class CheckFailed(RuntimeError):
    pass


def _data_default():
    return os.environ.get(DATA_ENV)


def _require(value, flag):
    if value is None:
        raise SystemExit(f"usage error: {flag} is required (or set {DATA_ENV})")
    return value


# ---- subcommands -------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .train import load_config
    run = load_config(args.config)
    out = Path(_require(args.out or _data_default(), "--out"))
    out.mkdir(parents=True, exist_ok=True)
    for seed in range(args.seed, args.seed + args.num_scenes):
        bundle = generate_scene(seed, run.data)
        path = serialize(bundle, out / f"scene_{seed:05d}")
        sums = bundle_checksums(path)
        print(f"{path.name} attempt={bundle.attempt} grasps={len(bundle.grasp_poses)} "
              f"placements={int(bundle.placement_masks.sum())} manifest={sums['manifest.json'][:16]}")
    return 0


def cmd_train(args) -> int:
    from .train import load_config, train
    run = load_config(args.config)
    data = _require(args.data or _data_default(), "--data")

    def report(rec):
        if rec["step"] % args.print_every == 0:
            print(f"step {rec['step']} epoch {rec['epoch']} loss {rec['losses']['total']:.4f}", flush=True)
    state, metrics = train(run, data, out_ckpt=args.out, log_path=args.log, callback=report)
    if metrics:
        print(f"done: {state.step} steps, final loss {metrics[-1]['losses']['total']:.4f}")
    return 0


def _load_model(ckpt, config):
    from .train import TrainState, load_run_config_for
    run = load_run_config_for(ckpt, config)
    state = TrainState.load(ckpt)
    missing = set(state.params) ^ set(p for p in _param_names(run.model))
    if missing:
        raise CheckpointError(f"{ckpt}: parameters do not match the model config ({sorted(missing)[:3]} ...)")
    return run, state.params


def _param_names(model_cfg):
    from .network import _param_shapes
    return [name for name, _, _ in _param_shapes(model_cfg)]


def cmd_eval(args) -> int:
    from .evaluation import area_under_curve, evaluate, ground_truth_proposals, model_proposals, write_curve_csv
    data = _require(args.data or _data_default(), "--data")
    bundles = [deserialize(d) for d in list_bundles(data)]
    if not bundles:
        raise FileNotFoundError(f"no scene bundles under {data}")
    if args.ground_truth:
        fn = lambda b: ground_truth_proposals(b, args.mode)  # noqa: E731
    else:
        run, params = _load_model(args.ckpt, args.config)
        use_obj = run.train.mode != "grasp"
        fn = lambda b: model_proposals(b, params, run.model, args.mode, use_obj)  # noqa: E731
    curve, _ = evaluate(bundles, fn, args.mode)
    if args.curve:
        write_curve_csv(curve, args.curve)
    print(f"scenes {len(bundles)} mode {args.mode} auc {area_under_curve(curve):.4f} "
          f"precision@0.1 {curve.precision_at_coverage(0.1):.4f} max coverage {curve.coverage.max():.4f}")
    return 0


def cmd_predict(args) -> int:
    from .evaluation import model_proposals, write_proposals_json
    run, params = _load_model(args.ckpt, args.config)
    bundle = deserialize(args.scene)
    props = model_proposals(bundle, params, run.model, args.mode, run.train.mode != "grasp")
    props.sort(key=lambda p: -p.confidence)
    write_proposals_json(props, args.out)
    print(f"{len(props)} {args.mode} proposals written to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_checks
    errors = run_checks(args.module)
    for name, err in errors.items():
        print(f"{name:32s} {err:.3e}")
    worst = max(errors.values())
    print(f"max rel. error {worst:.3e} (tolerance {TOLERANCE:g})")
    if worst >= TOLERANCE:
        raise CheckFailed("gradient check failed")
    return 0


def cmd_validate(args) -> int:
    from .evaluation import check_labels
    data = _require(args.data or _data_default(), "--data")
    dirs = list_bundles(data)
    if not dirs:
        raise FileNotFoundError(f"no scene bundles under {data}")
    bad = 0
    neg_total = neg_pass = 0
    for d in dirs:
        rep = check_labels(deserialize(d), args.negatives)
        neg_total += rep["negatives_checked"]
        neg_pass += rep["negatives_passing"]
        fail = rep["grasp_failures"] or rep["placement_failures"]
        bad += bool(fail)
        print(f"{d.name} " + " ".join(f"{k}={v}" for k, v in rep.items()) + (" FAIL" if fail else ""))
    rate = neg_pass / neg_total if neg_total else 0.0
    print(f"{len(dirs)} scenes, {bad} with failing labels, negatives passing {rate:.4f}")
    if bad or rate > 0.01:
        raise CheckFailed("label/evaluator consistency check failed")
    return 0


# ---- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m2t2", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate scene bundles")
    g.add_argument("--config", help="run config JSON (the data section is used)")
    g.add_argument("--out", help=f"output directory (default ${DATA_ENV})")
    g.add_argument("--seed", type=int, default=0, help="first scene seed")
    g.add_argument("--num-scenes", type=int, default=1)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--data", help=f"scene directory (default ${DATA_ENV})")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="JSON-lines metrics log")
    t.add_argument("--print-every", type=int, default=10)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="precision-coverage evaluation")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", help="checkpoint path")
    src.add_argument("--ground-truth", action="store_true", help="score the labels themselves")
    e.add_argument("--config", help="run config JSON (default: the checkpoint's sidecar)")
    e.add_argument("--data", help=f"scene directory (default ${DATA_ENV})")
    e.add_argument("--mode", choices=("grasp", "place"), required=True)
    e.add_argument("--curve", help="output CSV of threshold, precision, coverage")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("predict", help="poses for one scene")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--config", help="run config JSON (default: the checkpoint's sidecar)")
    r.add_argument("--scene", required=True, help="scene bundle directory")
    r.add_argument("--mode", choices=("grasp", "place"), required=True)
    r.add_argument("--out", required=True, help="output JSON")
    r.set_defaults(fn=cmd_predict)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--module", choices=("autodiff", "losses", "network"))
    c.set_defaults(fn=cmd_gradcheck)

    v = sub.add_parser("validate-data", help="re-check labels against the evaluator")
    v.add_argument("--data", help=f"scene directory (default ${DATA_ENV})")
    v.add_argument("--negatives", type=int, default=200, help="placement negatives sampled per scene")
    v.set_defaults(fn=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except SystemExit as exc:
        print(exc, file=sys.stderr)
        return 2
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (BundleError, CheckpointError, GenerationError, FileNotFoundError, ValueError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
