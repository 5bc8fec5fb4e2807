"""Command-line interface: ``sinkclust <command> [flags]``.

Exit codes: 0 success, 1 runtime failure (numeric, I/O, unreadable input,
interrupted or diverged training), 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import ClusterConfig, cluster, lloyd_kmeans, sinkhorn_kmeans, InitStrategy
from .episodes import (
    AttributeSpec,
    ConsistencyMode,
    LabeledDataset,
    gen_attribute_dataset,
    load_with_sidecar,
    sample_episode,
    save_dataset,
    write_sidecar,
)
from .errors import NumericError, ParseError
from .metrics import EvalPlan, EvalReport, aggregate, cscc, episode_seed, optimal_match, run_episodes
from .trainer import (
    EmbeddingModel,
    TrainConfig,
    TrainingDiverged,
    TrainingInterrupted,
    architecture_fingerprint,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("sinkclust")


class UsageError(ValueError):
    pass


# ------------------------------------------------------------ flag parsing


def parse_attrs(text: str) -> tuple[tuple[int, float], ...]:
    """``"3x4,4x2"`` -> ((3, 4.0), (4, 2.0)): cardinality x signal strength."""
    out = []
    for part in text.split(","):
        try:
            card, signal = part.lower().split("x")
            out.append((int(card), float(signal)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad attribute {part!r}, expected CARDxSIGNAL") from None
    return tuple(out)


def parse_consistency(text: str) -> ConsistencyMode:
    """``consistent:0``, ``mixed:0.5,0.3,0.2`` or ``uniform:3``."""
    kind, _, arg = text.partition(":")
    try:
        if kind == "consistent":
            return ConsistencyMode.consistent(int(arg or 0))
        if kind == "mixed":
            return ConsistencyMode.mixed([float(p) for p in arg.split(",")])
        if kind == "uniform":
            return ConsistencyMode.uniform(int(arg))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad consistency {text!r}: {e}") from None
    raise argparse.ArgumentTypeError(f"unknown consistency {text!r}")


def parse_count(text: str):
    """``5`` or an inclusive range ``3-5`` drawn per episode."""
    lo, sep, hi = text.partition("-")
    try:
        return (int(lo), int(hi)) if sep else int(lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO-HI, got {text!r}") from None


def parse_sizes(text: str) -> list[int]:
    if not text:
        return []
    try:
        return [int(s) for s in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated sizes, got {text!r}") from None


def positive(kind):
    def check(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return v
    return check


def _config_echo(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        if isinstance(v, ConsistencyMode):
            v = v.to_dict()
        elif isinstance(v, tuple):
            v = [list(x) if isinstance(x, tuple) else x for x in v]
        out[k] = v
    return out


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _load(path):
    return load_with_sidecar(path)


# ---------------------------------------------------------------- commands


def cmd_gen_synth(args) -> int:
    spec = AttributeSpec(
        attributes=args.attrs,
        noise_std=args.noise,
        dim_per_value=args.dim_per_value,
        samples_per_combination=args.spc,
        consistency=args.consistency or ConsistencyMode.consistent(args.label_attribute),
    )
    if not 0 <= args.label_attribute < len(spec.attributes):
        raise UsageError(f"--label-attribute must be in [0, {len(spec.attributes)})")
    ds = gen_attribute_dataset(spec, args.seed, args.split)
    labelled = LabeledDataset(ds.features, ds.attribute_table[:, args.label_attribute],
                              ds.attribute_table, 0, args.split, spec)
    save_dataset(labelled, args.output, args.format)
    write_sidecar(args.output, spec, args.seed, args.label_attribute,
                  {"config": _config_echo(args), "version": __version__})
    log.info("wrote %d x %d dataset to %s", ds.n, ds.dim, args.output)
    return 0


def _cluster_cfg(args) -> ClusterConfig:
    return ClusterConfig(
        method=args.method,
        gamma=args.gamma,
        max_outer=args.max_outer,
        restarts=args.restarts,
        query_mode=getattr(args, "query_mode", "nearest"),
    )


def cmd_cluster(args) -> int:
    ds = _load(args.data)
    if args.k > ds.n:
        raise UsageError(f"k={args.k} exceeds the number of points ({ds.n})")
    cfg = _cluster_cfg(args)
    res = cluster(ds.features, args.k, cfg, seed=args.seed)
    out = Path(args.output)
    centroids_path = out.with_name(out.stem + ".centroids.csv")
    labels_path = out.with_name(out.stem + ".labels.csv")
    np.savetxt(centroids_path, res.centroids, delimiter=",", fmt="%.17g")
    np.savetxt(labels_path, res.hard_labels, fmt="%d")
    report = {
        "centroids_file": centroids_path.name,
        "labels_file": labels_path.name,
        "objective": res.objective,
        "iterations": res.outer_iterations,
        "converged": res.converged,
        "warnings": res.warnings,
        "clustering_accuracy": None,
        "config": {"args": _config_echo(args), "cluster": asdict(cfg)},
        "version": __version__,
    }
    if ds.labels is not None:
        if ds.class_count != args.k:
            log.warning("dataset has %d classes but k=%d; accuracy uses max(k, classes)", ds.class_count, args.k)
        kk = max(args.k, ds.class_count)
        report["clustering_accuracy"] = optimal_match(res.hard_labels, ds.labels, kk).matched_accuracy
    _write_json(out, report)
    return 0


def _embedding(args, ds):
    """Model (or identity) plus its fingerprint."""
    if args.model:
        model, header = load_checkpoint(args.model)
        if not header.get("final", True):
            log.warning("checkpoint %s is not final (interrupted or diverged run)", args.model)
        if model.d_in != ds.dim:
            raise UsageError(f"model expects {model.d_in} input features, dataset has {ds.dim}")
    else:
        model = EmbeddingModel.identity(ds.dim)
    if args.expect_fingerprint and args.expect_fingerprint != model.fingerprint:
        raise UsageError(
            f"model fingerprint {model.fingerprint} does not match --expect-fingerprint {args.expect_fingerprint}"
        )
    return model


def cmd_eval(args) -> int:
    ds = _load(args.data)
    model = _embedding(args, ds)
    consistency = args.consistency or (ds.spec.consistency if ds.spec else None)
    plan = EvalPlan(args.task, args.way, args.shots, args.query, args.seed, _cluster_cfg(args), args.T, consistency)
    embed = None if model.n_params == 0 else model
    results = run_episodes(ds, plan, args.episodes, embed, jobs=args.jobs)
    config = _config_echo(args)
    config["cluster"] = asdict(plan.cluster_cfg)
    config["n_way"] = args.way if isinstance(args.way, int) else None
    report = aggregate(results, config, model.fingerprint)
    Path(args.output).write_text(report.to_json(), encoding="utf-8")
    return 0


def _train_one(args, ds, center_weight, output: Path) -> int:
    cfg = TrainConfig(
        conditional=args.conditionals,
        T=args.T,
        gamma=args.gamma,
        unroll_iters=args.unroll,
        center_weight=center_weight,
        optimizer=args.optimizer,
        lr=args.lr,
        momentum=args.momentum,
        episodes_per_epoch=args.episodes_per_epoch,
        epochs=args.epochs,
        n_way=args.way,
        n_shot=args.shots,
        n_query=args.query,
        train_way=args.train_way,
        seed=args.seed,
    )
    sizes = [ds.dim] + args.hidden + ([args.emb] if args.emb else [])
    model = EmbeddingModel.init(sizes, seed=args.seed)
    curve_path = output.with_name(output.name + ".curve.json")
    echo = {"args": _config_echo(args), "train": cfg.to_dict(), "sizes": sizes}
    status, final, curve, code = "ok", True, [], 0
    try:
        model, curve = train(ds, model, cfg)
    except TrainingDiverged as e:
        log.error("training diverged: %s; saving last finite parameters", e)
        model, curve, status, final, code = e.model, e.curve, f"diverged: {e}", False, 1
    except TrainingInterrupted as e:
        log.error("training interrupted; saving partial checkpoint")
        model, curve, status, final, code = e.model, e.curve, "interrupted", False, 1
    save_checkpoint(output, model, cfg, final=final)
    _write_json(curve_path, {
        "curve": [c.to_dict() for c in curve],
        "status": status,
        "final": final,
        "fingerprint": model.fingerprint,
        "config": echo,
        "version": __version__,
    })
    return code


def cmd_train(args) -> int:
    ds = _load(args.data)
    out = Path(args.output)
    if not args.sweep:
        return _train_one(args, ds, args.center_weight, out)
    name, _, values = args.sweep.partition("=")
    if name != "center-weight" or not values:
        raise UsageError(f"unsupported sweep {args.sweep!r}; only center-weight=V1,V2,... is supported")
    code = 0
    for v in values.split(","):
        weight = float(v)
        target = out.with_name(f"{out.stem}.center-weight={v}{out.suffix}")
        code = max(code, _train_one(args, ds, weight, target))
    return code


def cmd_cscc(args) -> int:
    unsup = EvalReport.from_json(Path(args.unsup).read_text(encoding="utf-8"))
    sup = EvalReport.from_json(Path(args.sup).read_text(encoding="utf-8"))
    if "unsupervised_accuracy" not in unsup.metrics or "supervised_accuracy" not in sup.metrics:
        raise UsageError("--unsup needs a ufsc report and --sup a supervised report")
    res = cscc(unsup, sup)
    _write_json(args.output, {
        "cscc": asdict(res),
        "unsupervised": asdict(unsup.metrics["unsupervised_accuracy"]),
        "supervised": asdict(sup.metrics["supervised_accuracy"]),
        "fingerprint": sup.fingerprint,
        "inputs": {"unsup_run_id": unsup.run_id, "sup_run_id": sup.run_id},
        "config": _config_echo(args),
        "version": __version__,
    })
    return 0


def cmd_bench(args) -> int:
    """Wall-clock per-episode clustering time; timings are not reproducible."""
    ds = _load(args.data)
    consistency = ds.spec.consistency if ds.spec else None
    times = {"sinkhorn": [], "lloyd": []}
    for i in range(args.episodes):
        seed = episode_seed(args.seed, i)
        ep = sample_episode(ds, args.way, args.shots, 0, seed, consistency)
        t = time.perf_counter()
        sinkhorn_kmeans(ep.support_x, ep.n_way, gamma=args.gamma, init=InitStrategy.zero_noise(seed=seed))
        times["sinkhorn"].append(time.perf_counter() - t)
        t = time.perf_counter()
        lloyd_kmeans(ep.support_x, ep.n_way, InitStrategy.kmeans_pp(seed))
        times["lloyd"].append(time.perf_counter() - t)
    _write_json(args.output, {
        "seconds_per_episode": {k: {"mean": float(np.mean(v)), "median": float(np.median(v))}
                                for k, v in times.items()},
        "episodes": args.episodes,
        "config": _config_echo(args),
        "version": __version__,
    })
    return 0


# ------------------------------------------------------------------ parser


def _add_common(p, output_required=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for episode evaluation")
    p.add_argument("-o", "--output", required=output_required)


def _add_episode(p):
    p.add_argument("--way", type=parse_count, default=5)
    p.add_argument("--shots", type=parse_count, default=5)
    p.add_argument("--query", type=int, default=15)


def _add_clustering(p):
    p.add_argument("--method", choices=("sinkhorn", "lloyd"), default="sinkhorn")
    p.add_argument("--gamma", type=positive(float), default=1.0)
    p.add_argument("--max-outer", type=int, default=100)
    p.add_argument("--restarts", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sinkclust", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate an attribute-grid dataset")
    p.add_argument("--attrs", type=parse_attrs, required=True, help="e.g. 3x4,4x2 (CARDxSIGNAL per attribute)")
    p.add_argument("--noise", type=positive(float), default=0.1)
    p.add_argument("--dim-per-value", type=int, default=1)
    p.add_argument("--spc", type=int, default=1, help="samples per attribute combination")
    p.add_argument("--consistency", type=parse_consistency, default=None,
                   help="consistent:A | mixed:P0,P1,... | uniform:N (default consistent:<label-attribute>)")
    p.add_argument("--label-attribute", type=int, default=0, help="attribute stored as the file's labels")
    p.add_argument("--split", choices=("train", "valid", "test"), default="train")
    p.add_argument("--format", choices=("emb", "csv"), default=None)
    _add_common(p)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("cluster", help="cluster a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=positive(int), required=True)
    _add_clustering(p)
    _add_common(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("eval", help="episodic evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("fsc", "ufsc", "supervised"), required=True)
    p.add_argument("--episodes", type=positive(int), default=1000)
    p.add_argument("--model", default=None, help="checkpoint; identity embedding when omitted")
    p.add_argument("--expect-fingerprint", default=None)
    p.add_argument("--T", type=positive(float), default=1.0)
    p.add_argument("--query-mode", choices=("nearest", "sinkhorn"), default="nearest")
    p.add_argument("--consistency", type=parse_consistency, default=None)
    _add_episode(p)
    _add_clustering(p)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="train an embedding")
    p.add_argument("--data", required=True)
    p.add_argument("--hidden", type=parse_sizes, default=[64], help="comma-separated hidden widths")
    p.add_argument("--emb", type=int, default=32, help="embedding width (0: last hidden layer is the output)")
    p.add_argument("--conditionals", choices=("softmax", "sinkhorn"), default="sinkhorn")
    p.add_argument("--center-weight", type=float, default=1.0)
    p.add_argument("--unroll", type=int, default=20)
    p.add_argument("--T", type=positive(float), default=1.0)
    p.add_argument("--gamma", type=positive(float), default=1.0)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--episodes-per-epoch", type=int, default=100)
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--query", type=int, default=5)
    p.add_argument("--train-way", type=int, default=None)
    p.add_argument("--sweep", default=None, help="e.g. center-weight=0,1")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cscc", help="unsupervised / supervised accuracy ratio")
    p.add_argument("--unsup", required=True)
    p.add_argument("--sup", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_cscc)

    p = sub.add_parser("bench", help="time Sinkhorn K-Means against Lloyd per episode")
    p.add_argument("--data", required=True)
    p.add_argument("--episodes", type=positive(int), default=100)
    p.add_argument("--gamma", type=positive(float), default=1.0)
    _add_episode(p)
    _add_common(p)
    p.set_defaults(func=cmd_bench)
    return parser


def _setup_logging():
    level = os.environ.get("SINKCLUST_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, NumericError, OSError) as e:
        print(f"sinkclust: error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"sinkclust: error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("sinkclust: interrupted", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
