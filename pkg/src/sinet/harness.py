"""Experiment harness: run configs, manifests, seed streams, and the CLI.

All randomness descends from one root seed through labelled streams (train
data, test data, init, shuffle, gt jitter), so any command rerun with the same
flags produces byte-identical outputs. The SIN_NUM_WORKERS environment
variable caps evaluation parallelism; it defaults to 1.

Exit codes: 0 success, 1 validation error (bad flags or config values),
2 runtime failure (training divergence, unreadable or corrupt files).
"""

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .detector import (ARMS, TrainConfig, TrainingDiverged, arm_plan,
                       assign_targets, create_detector_params, detect,
                       detector_backward, detector_params_from_store, forward,
                       multi_task_loss, apply_weight_decay, train,
                       validate_config)
from .evaluation import (FP_KINDS, evaluate_detections, mean_ap, run_ablation,
                         strip_objects)
from .geometry import Box
from .numerics import (CheckpointError, ParamStore, derive_seed, grad_check,
                       load_checkpoint, save_checkpoint)
from .structure_inference import relation_report
from .synth_data import (WORLD_FIXTURES, GtObject, SceneSample, load_dataset,
                         sample_at, save_dataset, validate_world,
                         world_from_dict, world_hash, world_to_dict)

GRADCHECK_TOL = 1e-4


class RunFailure(RuntimeError):
    """Raised for runtime failures that should exit with code 2."""


@dataclass
class EvalConfig:
    split_seed: int = 0
    n_train: int = 2000
    n_test: int = 500
    score_thresh: float = 0.05


@dataclass
class RunConfig:
    world: object = "default"          # fixture name or inline world dict
    arm: str = "sin"
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/latest"


def _dataclass_from_dict(cls, d, where):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}; allowed: {sorted(allowed)}")
    return cls(**d)


def run_config_from_dict(d):
    d = dict(d)
    if "train" in d:
        d["train"] = _dataclass_from_dict(TrainConfig, d["train"], "config.train")
    if "eval" in d:
        d["eval"] = _dataclass_from_dict(EvalConfig, d["eval"], "config.eval")
    return _dataclass_from_dict(RunConfig, d, "config")


def run_config_to_dict(config):
    out = asdict(config)
    return out


def load_run_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise RunFailure(f"cannot read config {path}: {e}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON: {e}")
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return run_config_from_dict(data)


def resolve_world(spec):
    """Fixture name or inline world dict -> validated WorldSpec."""
    if isinstance(spec, str):
        if spec not in WORLD_FIXTURES:
            raise ValueError(f"unknown world fixture {spec!r}; "
                             f"known: {sorted(WORLD_FIXTURES)}")
        return WORLD_FIXTURES[spec]()
    if isinstance(spec, dict):
        return world_from_dict(spec)
    return validate_world(spec)


# ---------------------------------------------------------------------------
# output files

def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _fmt_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt_cell(v) for v in row) + "\n")


def metrics_rows(arm_name, per_category_ap, cat_names, iou_thresh=0.5):
    rows = [(arm_name, cat_names[c], iou_thresh, ap)
            for c, ap in sorted(per_category_ap.items())]
    rows.append((arm_name, "mean", iou_thresh, mean_ap(per_category_ap)))
    return rows


def pr_rows(arm_name, points):
    return [(arm_name, thr, p, r) for thr, p, r in points]


def fp_rows(arm_name, counts):
    return [(arm_name, kind, counts[kind]) for kind in FP_KINDS]


def write_manifest(out_dir, payload):
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise RunFailure(f"cannot read manifest {path}: {e}")
    except json.JSONDecodeError as e:
        raise RunFailure(f"{path}: invalid manifest JSON: {e}")
    for key in ("arm", "train", "world", "world_hash"):
        if key not in data:
            raise RunFailure(f"{path}: manifest is missing {key!r}")
    return data


# ---------------------------------------------------------------------------
# evaluation parallelism

def eval_workers():
    raw = os.environ.get("SIN_NUM_WORKERS", "1")
    try:
        w = int(raw)
    except ValueError:
        raise ValueError(f"SIN_NUM_WORKERS must be an integer, got {raw!r}")
    if w < 1:
        raise ValueError(f"SIN_NUM_WORKERS must be >= 1, got {w}")
    return w


def _detect_chunk(payload):
    values, cfg_dict, arm, score_thresh, samples = payload
    store = ParamStore()
    for name in sorted(values):
        store.create(name, values[name])
    params = detector_params_from_store(store)
    cfg = TrainConfig(**cfg_dict)
    return [detect(params, s, cfg, score_thresh, arm) for s in samples]


def detect_dataset(store, cfg, arm, samples, score_thresh, workers=1):
    """Detections per sample, identical for any worker count."""
    workers = min(workers, max(1, len(samples)))
    if workers <= 1:
        params = detector_params_from_store(store)
        return [detect(params, s, cfg, score_thresh, arm) for s in samples]
    values = store.clone_values()
    cfg_dict = asdict(cfg)
    bounds = np.linspace(0, len(samples), workers + 1).astype(int)
    payloads = [(values, cfg_dict, arm, score_thresh, samples[bounds[i]:bounds[i + 1]])
                for i in range(workers)]
    out = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for chunk in pool.map(_detect_chunk, payloads):
            out.extend(chunk)
    return out


# ---------------------------------------------------------------------------
# gradient checking fixture

def run_gradcheck(d=3, n=3, steps=2, seed=11, pooling="mean", eps=1e-5, wd=1e-3):
    """Central-difference check of the full detector loss on a small fixed
    scene: n ROIs, feature width d, `steps` inference iterations. Proposal
    boxes are fixed inputs, so the objectness map is outside the check.
    Returns the max relative error across every remaining parameter entry."""
    if d < 1 or n < 1 or steps < 0:
        raise ValueError("gradcheck needs d >= 1, n >= 1, steps >= 0")
    channels = 5
    rng = np.random.default_rng(seed)
    grid = rng.normal(0.0, 0.6, size=(8, 8, channels))
    gt = [GtObject(Box(2.5, 3.0, 2.2, 1.8), 0),
          GtObject(Box(5.8, 4.6, 1.9, 2.4), 1)]
    sample = SceneSample(grid=grid, scene_type=0, gt=gt)
    boxes = [Box(2.4, 3.1, 2.1, 1.7), Box(5.7, 4.5, 2.0, 2.3), Box(3.9, 6.1, 2.6, 2.0)]
    while len(boxes) < n:
        boxes.append(Box(rng.uniform(2.0, 6.0), rng.uniform(2.0, 6.0),
                         rng.uniform(1.5, 3.0), rng.uniform(1.5, 3.0)))
    boxes = boxes[:n]
    cfg = TrainConfig(T=steps, pooling=pooling, rois_per_image=n, feat_dim=d)
    validate_config(cfg)
    store = ParamStore()
    params = create_detector_params(store, channels, 2, d,
                                    derive_seed(seed, "init"), pooling)
    targets = assign_targets(boxes, gt, 2)
    names = [nm for nm in store.names() if nm != "det/objectness"]
    decayed = [store[nm] for nm in names]

    def loss_fn():
        store.zero_grads()
        state = forward(params, sample, cfg, boxes=boxes, mode="both", steps=steps)
        loss, grads = multi_task_loss(state, targets)
        detector_backward(params, state, grads)
        return loss + apply_weight_decay(decayed, wd)

    return grad_check(loss_fn, store, eps=eps, names=names)


# ---------------------------------------------------------------------------
# subcommand bodies

def _config_from_args(args):
    config = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "world", None):
        config.world = args.world
    if getattr(args, "arm", None):
        config.arm = args.arm
    for flag, target in (("seed", "seed"), ("iters", "iters"),
                         ("T", "T"), ("pooling", "pooling")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(config.train, target, v)
    for flag in ("split_seed", "n_train", "n_test", "score_thresh"):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(config.eval, flag, v)
    if getattr(args, "out", None):
        config.output_dir = args.out
    validate_config(config.train)
    if config.arm not in ARMS:
        raise ValueError(f"unknown arm {config.arm!r}; expected one of {ARMS}")
    if config.eval.n_train < 1 or config.eval.n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    if not (0.0 <= config.eval.score_thresh <= 1.0):
        raise ValueError("score_thresh must be in [0, 1]")
    return config


def _manifest_payload(command, config, world):
    return {
        "command": command,
        "arm": config.arm,
        "world": world_to_dict(world),
        "world_hash": world_hash(world),
        "train": asdict(config.train),
        "eval": asdict(config.eval),
    }


def _cmd_gen_data(args):
    if args.n < 1:
        raise ValueError("--n must be >= 1")
    world = resolve_world(args.world)
    samples = [sample_at(world, args.seed, i) for i in range(args.n)]
    save_dataset(args.out, samples, world)
    print(f"wrote {args.n} scenes to {args.out} (world {world_hash(world)})")
    return 0


def _train_progress(iters):
    marks = {max(0, (iters * k) // 5 - 1) for k in range(1, 6)}

    def cb(it, loss):
        if it in marks:
            print(f"iter {it + 1}/{iters}: loss {loss:.4f}")
    return cb


def _cmd_train(args):
    config = _config_from_args(args)
    world = resolve_world(config.world)
    out = _ensure_dir(config.output_dir)
    data_seed = derive_seed(config.eval.split_seed, "train-data")
    try:
        tr = train(world, config.train, config.arm, n_train=config.eval.n_train,
                   data_seed=data_seed, callback=_train_progress(config.train.iters))
    except TrainingDiverged as e:
        raise RunFailure(str(e))
    ckpt = os.path.join(out, "checkpoint.bin")
    save_checkpoint(ckpt, tr.store)
    write_manifest(out, _manifest_payload("train", config, world))
    write_csv(os.path.join(out, "loss.csv"), ("iter", "loss"),
              [(i, v) for i, v in enumerate(tr.losses)])
    print(f"arm {config.arm}: final loss {tr.losses[-1]:.4f}; checkpoint {ckpt}")
    return 0


def _load_trained(args):
    manifest_path = args.manifest or os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)), "manifest.json")
    manifest = read_manifest(manifest_path)
    store = load_checkpoint(args.checkpoint)
    try:
        params_check = detector_params_from_store(store)
    except KeyError as e:
        raise RunFailure(f"{args.checkpoint}: checkpoint lacks parameter {e}")
    del params_check
    try:
        cfg = _dataclass_from_dict(TrainConfig, manifest["train"], "manifest.train")
        world = world_from_dict(manifest["world"])
    except (TypeError, ValueError, KeyError) as e:
        raise RunFailure(f"{manifest_path}: manifest does not match this build: {e}")
    return manifest, store, cfg, world


def _cmd_eval(args):
    workers = eval_workers()
    manifest, store, cfg, world = _load_trained(args)
    arm = manifest["arm"]
    if arm not in ARMS:
        raise RunFailure(f"manifest names unknown arm {arm!r}")
    ev_cfg = _dataclass_from_dict(EvalConfig, manifest.get("eval", {}), "manifest.eval")
    n_test = args.n_test if args.n_test is not None else ev_cfg.n_test
    score_thresh = args.score_thresh if args.score_thresh is not None else ev_cfg.score_thresh
    if args.data:
        try:
            samples, _header = load_dataset(args.data, expected_world_hash=manifest["world_hash"],
                                            allow_mismatch=args.allow_world_mismatch)
        except ValueError as e:
            raise RunFailure(str(e))
    else:
        test_seed = derive_seed(ev_cfg.split_seed, "test-data")
        samples = [sample_at(world, test_seed, i) for i in range(n_test)]
    dets = detect_dataset(store, cfg, arm, samples, score_thresh, workers)
    ev = evaluate_detections(dets, [s.gt for s in samples], world.num_categories,
                             world.ambiguous_pairs)
    out = _ensure_dir(args.out)
    cat_names = [c.name for c in world.categories]
    write_csv(os.path.join(out, "metrics.csv"), ("arm", "category", "iou", "ap"),
              metrics_rows(arm, ev.per_category_ap, cat_names))
    write_csv(os.path.join(out, "pr.csv"), ("arm", "threshold", "precision", "recall"),
              pr_rows(arm, ev.pr))
    write_csv(os.path.join(out, "fp.csv"), ("arm", "kind", "count"),
              fp_rows(arm, ev.fp))
    print(f"arm {arm}: map {ev.map:.4f} over {len(samples)} scenes; wrote {out}")
    return 0


def _cmd_ablate(args):
    config = _config_from_args(args)
    if args.arms:
        arms = tuple(a.strip() for a in args.arms.split(",") if a.strip())
        for a in arms:
            if a not in ARMS:
                raise ValueError(f"unknown arm {a!r}; expected one of {ARMS}")
    else:
        arms = ARMS
    world = resolve_world(config.world)
    out = _ensure_dir(config.output_dir)
    results = run_ablation(world, config.train, config.eval.n_train,
                           config.eval.n_test, arms=arms, sweep=args.sweep,
                           score_thresh=config.eval.score_thresh,
                           split_seed=config.eval.split_seed,
                           progress=lambda msg: print(msg))
    cat_names = [c.name for c in world.categories]
    m_rows, p_rows, f_rows = [], [], []
    for arm in arms:
        entry = results["arms"][arm]
        if entry.get("failed"):
            print(f"arm {arm}: training diverged ({entry['error']})")
            continue
        m_rows += metrics_rows(arm, entry["ap"], cat_names)
        p_rows += pr_rows(arm, entry["pr"])
        f_rows += fp_rows(arm, entry["fp"])
        save_checkpoint(os.path.join(out, f"checkpoint-{arm}.bin"),
                        entry["_train"].store)
    for key, entry in results["sweep"].items():
        if not entry.get("failed"):
            m_rows += metrics_rows(f"sin-{key}", entry["ap"], cat_names)
    write_csv(os.path.join(out, "metrics.csv"), ("arm", "category", "iou", "ap"), m_rows)
    write_csv(os.path.join(out, "pr.csv"), ("arm", "threshold", "precision", "recall"), p_rows)
    write_csv(os.path.join(out, "fp.csv"), ("arm", "kind", "count"), f_rows)
    write_manifest(out, _manifest_payload("ablate", config, world))
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(strip_objects(results), f, indent=2, sort_keys=True)
        f.write("\n")
    for arm in arms:
        entry = results["arms"][arm]
        if not entry.get("failed"):
            print(f"arm {arm}: map {entry['map']:.4f}")
    if any(results["arms"][a].get("failed") for a in arms):
        raise RunFailure("at least one arm diverged; see summary.json")
    print(f"wrote {out}")
    return 0


def _cmd_gradcheck(args):
    err = run_gradcheck(d=args.d, n=args.n, steps=args.T, seed=args.seed,
                        pooling=args.pooling, eps=args.eps)
    ok = err < args.tol
    print(f"max relative error {err:.3e} (tolerance {args.tol:g}): "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


def _cmd_relations(args):
    if args.n < 1:
        raise ValueError("--n must be >= 1")
    manifest, store, cfg, world = _load_trained(args)
    arm = manifest["arm"]
    params = detector_params_from_store(store)
    score_thresh = args.score_thresh if args.score_thresh is not None else 0.05
    rows = []
    for i in range(args.n):
        sample = sample_at(world, args.seed, i)
        dets, state = detect(params, sample, cfg, score_thresh, arm, return_state=True)
        for det, (node, partner, weight) in zip(dets, relation_report(state.edges, dets)):
            rows.append((i, node, det.category, det.score, partner, weight))
    write_csv(args.out, ("sample", "node", "category", "score", "partner",
                         "edge_weight"), rows)
    print(f"wrote {len(rows)} relation rows for {args.n} scenes to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# CLI plumbing

class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(message)


def build_parser():
    p = _Parser(prog="sinet",
                description="Train and probe the structure inference detector "
                            "on synthetic contextual scenes.")
    sub = p.add_subparsers(dest="command", metavar="command")

    g = sub.add_parser("gen-data", help="write a synthetic scene dataset (JSONL)")
    g.add_argument("--world", default="default")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train one arm and write a checkpoint")
    t.add_argument("--config", help="JSON run config; flags override it")
    t.add_argument("--world")
    t.add_argument("--arm", choices=ARMS)
    t.add_argument("--seed", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--T", type=int, dest="T")
    t.add_argument("--pooling", choices=("mean", "max", "concat"))
    t.add_argument("--split-seed", type=int, dest="split_seed")
    t.add_argument("--n-train", type=int, dest="n_train")
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (mAP, PR, FP kinds)")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", help="defaults to manifest.json beside the checkpoint")
    e.add_argument("--data", help="JSONL test set; default generates the manifest's test split")
    e.add_argument("--n-test", type=int, dest="n_test")
    e.add_argument("--score-thresh", type=float, dest="score_thresh")
    e.add_argument("--allow-world-mismatch", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="run the baseline/scene/edge/sin comparison")
    a.add_argument("--config")
    a.add_argument("--world")
    a.add_argument("--seed", type=int)
    a.add_argument("--iters", type=int)
    a.add_argument("--T", type=int, dest="T")
    a.add_argument("--pooling", choices=("mean", "max", "concat"))
    a.add_argument("--split-seed", type=int, dest="split_seed")
    a.add_argument("--n-train", type=int, dest="n_train")
    a.add_argument("--n-test", type=int, dest="n_test")
    a.add_argument("--score-thresh", type=float, dest="score_thresh")
    a.add_argument("--arms", help="comma list, default all four")
    a.add_argument("--sweep", action="store_true",
                   help="also sweep pooling x steps on the sin arm")
    a.add_argument("--out", required=True)
    a.set_defaults(func=_cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    c.add_argument("--d", type=int, default=3)
    c.add_argument("--n", type=int, default=3)
    c.add_argument("--t", "--T", type=int, default=2, dest="T")
    c.add_argument("--seed", type=int, default=11)
    c.add_argument("--pooling", choices=("mean", "max", "concat"), default="mean")
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    c.set_defaults(func=_cmd_gradcheck)

    r = sub.add_parser("relations", help="dump strongest-partner edges per detection")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--manifest")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--n", type=int, default=8)
    r.add_argument("--score-thresh", type=float, dest="score_thresh")
    r.add_argument("--out", required=True)
    r.set_defaults(func=_cmd_relations)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliUsageError as e:
        parser.print_usage(sys.stderr)
        print(f"sinet: error: {e}", file=sys.stderr)
        return 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        print("sinet: error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except CheckpointError as e:
        print(f"sinet: error: {e}", file=sys.stderr)
        return 2
    except (RunFailure, TrainingDiverged, OSError) as e:
        print(f"sinet: error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"sinet: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
