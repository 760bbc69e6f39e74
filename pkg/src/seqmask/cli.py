"""Command-line operator surface.

Subcommands: ``generate`` (dataset + ground-truth sidecar), ``train``
(checkpoint + stage reports, optionally several seeds in parallel),
``evaluate`` (per-domain accuracy, optional ablations), ``analyze``
(independence/correlation/overlap/recovery reports plus CSV tables) and
``gradcheck`` (finite-difference table over every named op).

Every emitted JSON embeds the fully resolved configuration. Exit codes:
0 success, 2 usage or config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .analysis import (
    cross_modal_independence,
    evidence_matrix,
    intra_modal_independence,
    invariant_overlap,
    label_correlation,
    recovery_score,
)
from .dataio import (
    ConfigError,
    DataError,
    RunConfig,
    dump_json,
    load_checkpoint,
    read_config_file,
    read_dataset,
    read_ground_truth,
    resolve_run_config,
    save_checkpoint,
    split_by_domain,
    stage_reports_payload,
    write_csv,
    write_dataset,
    write_ground_truth,
)
from .gradcheck import run_op_suite
from .masking import probabilities
from .model import NumericalInstability, SequenceClassifier
from .synthgen import generate_domain
from .tensor import Tensor, no_grad

USAGE_ERROR, DATA_ERROR, NUMERICAL_ERROR = 2, 3, 4


class CliParser(argparse.ArgumentParser):
    """Argparse with machine-readable usage errors on stderr."""

    def error(self, message):
        _emit_error(USAGE_ERROR, "usage", message)
        raise SystemExit(USAGE_ERROR)


def _emit_error(code: int, kind: str, message: str) -> None:
    payload = {"error": {"code": code, "type": kind, "message": message}}
    print(json.dumps(payload), file=sys.stderr)


def _load_run_config(args) -> RunConfig:
    pairs: dict[str, str] = {}
    if args.config:
        pairs.update(read_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return resolve_run_config(pairs)


def _add_config_arguments(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key = value config file")
    sub.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one config key (repeatable; wins over --config)",
    )


def _out_dir(args, rc: RunConfig) -> Path:
    out = Path(args.out_dir or rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    rc = _load_run_config(args)
    out = _out_dir(args, rc)
    samples = []
    for domain in rc.domains:
        samples.extend(generate_domain(rc.spec, domain))
    dataset_path = out / "dataset.jsonl"
    truth_path = out / "ground_truth.json"
    write_dataset(dataset_path, samples)
    write_ground_truth(truth_path, rc.spec, rc.domains)
    dump_json(
        {
            "config": rc.payload(),
            "dataset": str(dataset_path),
            "ground_truth": str(truth_path),
            "samples": len(samples),
            "domains": {d.name: d.n for d in rc.domains},
        },
        out / "generate_manifest.json",
    )
    print(f"wrote {len(samples)} samples to {dataset_path}")
    return 0


def _train_one_seed(rc: RunConfig, samples, seed: int, out: Path) -> dict:
    config = replace(rc.model, seed=seed)
    model = SequenceClassifier(config)
    stage_reports = model.train(samples)
    checkpoint_path = out / f"checkpoint_seed{seed}.json"
    report_path = out / f"stage_report_seed{seed}.json"
    save_checkpoint(checkpoint_path, model)
    final = None
    for stage in reversed(stage_reports):
        if stage.epochs:
            final = stage.epochs[-1]
            break
    dump_json(
        {
            "config": rc.payload(),
            "seed": seed,
            "stages": stage_reports_payload(stage_reports),
        },
        report_path,
    )
    return {
        "seed": seed,
        "checkpoint": str(checkpoint_path),
        "stage_report": str(report_path),
        "final_val_accuracy": final.val_overall if final else None,
        "retained_text": final.retained_text if final else None,
        "retained_video": final.retained_video if final else None,
    }


def _train_entry(packed):
    rc, samples, seed, out = packed
    return _train_one_seed(rc, samples, seed, Path(out))


def cmd_train(args) -> int:
    rc = _load_run_config(args)
    out = _out_dir(args, rc)
    samples = read_dataset(args.data)
    holdout = set(filter(None, (args.holdout or "").split(",")))
    by_domain = split_by_domain(samples)
    missing = holdout - set(by_domain)
    if missing:
        raise DataError(
            f"holdout domains {sorted(missing)} not present in {sorted(by_domain)}"
        )
    train_samples = [s for s in samples if s.domain not in holdout]
    if not train_samples:
        raise DataError("holdout leaves no training domains")

    seeds = list(rc.seeds) if rc.seeds else [rc.model.seed]
    if len(seeds) == 1:
        rows = [_train_one_seed(rc, train_samples, seeds[0], out)]
    else:
        jobs = [(rc, train_samples, seed, str(out)) for seed in seeds]
        with ProcessPoolExecutor(max_workers=min(len(seeds), args.workers)) as pool:
            rows = list(pool.map(_train_entry, jobs))
    rows.sort(key=lambda r: r["seed"])

    summary = {
        "config": rc.payload(),
        "train_domains": sorted(set(by_domain) - holdout),
        "holdout_domains": sorted(holdout),
        "replicas": rows,
    }
    dump_json(summary, out / "train_summary.json")
    for row in rows:
        val = row["final_val_accuracy"]
        rt, rv = row["retained_text"], row["retained_video"]
        print(
            f"seed {row['seed']}: "
            f"val={'n/a' if val is None else format(val, '.4f')} "
            f"retained text={'n/a' if rt is None else format(rt, '.3f')} "
            f"video={'n/a' if rv is None else format(rv, '.3f')}"
        )
    print(f"summary: {out / 'train_summary.json'}")
    return 0


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    samples = read_dataset(args.data)
    by_domain = split_by_domain(samples)
    accuracy = model.evaluate(by_domain)
    payload = {
        "config": asdict(model.config),
        "seed": model.config.seed,
        "accuracy": accuracy,
    }
    if args.ablations:
        payload["ablations"] = {
            which: {
                name: model.evaluate_ablation(group, which)
                for name, group in sorted(by_domain.items())
            }
            for which in ("add_noise", "using_ds", "no_keyframe")
        }
    out = Path(args.out) if args.out else None
    if out:
        dump_json(payload, out)
    print(json.dumps(payload["accuracy"], indent=2, sort_keys=True))
    return 0


def cmd_analyze(args) -> int:
    models = [load_checkpoint(path) for path in args.checkpoint]
    model = models[0]
    samples = read_dataset(args.data)
    out = Path(args.out_dir or "analysis")
    out.mkdir(parents=True, exist_ok=True)

    labels = np.array([s.label for s in samples], dtype=np.int64)
    feats = {
        "text": model.masked_feature_matrix(samples, "text", raw=args.raw_features),
        "video": model.masked_feature_matrix(samples, "video", raw=args.raw_features),
    }
    supports = {k: v.tolist() for k, v in model.mask_supports().items()}

    cross = cross_modal_independence(
        feats["text"], feats["video"], supports["text"], supports["video"]
    )
    intra = {
        name: intra_modal_independence(feats[name], supports[name])
        for name in ("text", "video")
    }
    label_reports = {
        name: label_correlation(
            feats[name], labels, supports[name], classes=model.config.classes
        )
        for name in ("text", "video")
    }

    payload = {
        "config": asdict(model.config),
        "seed": model.config.seed,
        "supports": supports,
        "cross_modal": _independence_payload(cross),
        "intra_modal": {k: _independence_payload(v) for k, v in intra.items()},
        "label_correlation": {
            k: {
                "selected_dependent_ratio": v.selected_dependent_ratio,
                "removed_dependent_ratio": v.removed_dependent_ratio,
                "dependent": v.dependent,
            }
            for k, v in label_reports.items()
        },
    }

    if args.truth:
        truth = read_ground_truth(args.truth)
        payload["recovery"] = {
            name: asdict(
                recovery_score(
                    supports[name],
                    truth["support"][name]["invariant"],
                    truth["support"][name]["spurious"],
                )
            )
            for name in ("text", "video")
        }

    if len(models) >= 2:
        # Mask agreement across runs: one support per checkpoint and
        # modality, reduced to pairwise Jaccard plus the intersection.
        run_names = []
        for i, path in enumerate(args.checkpoint):
            stem = Path(path).stem
            run_names.append(stem if stem not in run_names else f"{stem}#{i}")
        payload["overlap"] = {}
        for name in ("text", "video"):
            sets = {
                run: m.mask_supports()[name].tolist()
                for run, m in zip(run_names, models)
            }
            overlap = invariant_overlap(sets)
            payload["overlap"][name] = {
                "names": overlap.names,
                "jaccard": overlap.jaccard.tolist(),
                "consistent": overlap.consistent,
            }

    sample = samples[0]
    with no_grad():
        fused_t = model.fused_text(Tensor(sample.text[None]))
        fused_v, _ = model.fused_video(Tensor(sample.video[None]), mode="eval")
        first, second = model._pair_order()
        pair = {"text": fused_t, "video": fused_v}
        x_pair = np.concatenate(
            [pair[first].data.ravel(), pair[second].data.ravel()]
        )
    evidence = evidence_matrix(model.head_pair.weight.data, x_pair)
    payload["evidence"] = {
        "sample_id": sample.id,
        "matrix": evidence.tolist(),
        "column_sums": evidence.sum(axis=0).tolist(),
        "bias": model.head_pair.bias.data.tolist(),
    }

    dump_json(payload, out / "analysis.json")
    for name in ("text", "video"):
        state = model.mask_text if name == "text" else model.mask_video
        p = probabilities(state)
        write_csv(
            out / f"mask_{name}.csv",
            ["index", "magnitude", "threshold", "retained"],
            [
                [i, state.magnitude.data[i], state.threshold.data[i], int(p[i])]
                for i in range(state.dim)
            ],
        )
    ratio_rows = [
        ["cross", "all", cross.independent_ratio, cross.dependent_ratio],
        *[
            ["intra", name, intra[name].independent_ratio, intra[name].dependent_ratio]
            for name in ("text", "video")
        ],
    ]
    write_csv(
        out / "independence_ratios.csv",
        ["scope", "modality", "independent_ratio", "dependent_ratio"],
        ratio_rows,
    )
    decisions = model.keyframe_decisions(samples)
    write_csv(
        out / "keyframe_decisions.csv",
        ["sample_id"] + [f"frame_{i}" for i in range(decisions.shape[1])],
        [[s.id] + row.astype(int).tolist() for s, row in zip(samples, decisions)],
    )
    print(f"analysis written to {out}")
    return 0


def _independence_payload(report) -> dict:
    return {
        "level": report.level,
        "n": report.n,
        "pairs_tested": report.pairs_tested,
        "dependent_pairs": report.dependent_pairs,
        "independent_ratio": report.independent_ratio,
        "dependent_ratio": report.dependent_ratio,
        "per_feature": {str(k): v for k, v in sorted(report.per_feature.items())},
    }


def cmd_gradcheck(args) -> int:
    checks = run_op_suite(instances=args.instances, seed=args.seed)
    width = max(len(c.name) for c in checks)
    failed = [c for c in checks if not c.passed]
    for c in checks:
        status = "pass" if c.passed else "FAIL"
        print(f"{c.name:<{width}}  {c.max_rel_err:.3e}  {status}")
    print(f"{len(checks) - len(failed)}/{len(checks)} ops within tolerance")
    if args.out:
        dump_json(
            {
                "instances": args.instances,
                "seed": args.seed,
                "checks": [asdict(c) | {"passed": c.passed} for c in checks],
            },
            Path(args.out),
        )
    if failed:
        _emit_error(
            NUMERICAL_ERROR,
            "numerical",
            "gradient checks failed: " + ", ".join(c.name for c in failed),
        )
        return NUMERICAL_ERROR
    return 0


# --------------------------------------------------------------------- main

def build_parser() -> CliParser:
    parser = CliParser(prog="seqmask", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset + ground truth")
    _add_config_arguments(p)
    p.add_argument("--out-dir", help="output directory (default from config)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train and write checkpoint + stage reports")
    _add_config_arguments(p)
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--out-dir", help="output directory (default from config)")
    p.add_argument(
        "--holdout",
        default="target",
        help="comma-separated domains excluded from training (default: target)",
    )
    p.add_argument(
        "--workers", type=int, default=4, help="max parallel seed replicas"
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="per-domain accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the full accuracy JSON here")
    p.add_argument(
        "--ablations",
        action="store_true",
        help="also run add_noise / using_ds / no_keyframe ablations",
    )
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="independence and mask reports")
    p.add_argument(
        "--checkpoint",
        action="append",
        required=True,
        help="repeatable; extra checkpoints add a cross-run mask overlap section",
    )
    p.add_argument("--data", required=True)
    p.add_argument("--truth", help="ground-truth sidecar for recovery scores")
    p.add_argument("--out-dir", help="output directory (default: analysis)")
    p.add_argument(
        "--raw-features",
        action="store_true",
        help="test raw encoder features instead of masked ones",
    )
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check every op")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the result table as JSON")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        _emit_error(USAGE_ERROR, "config", str(exc))
        return USAGE_ERROR
    except DataError as exc:
        _emit_error(DATA_ERROR, "data", str(exc))
        return DATA_ERROR
    except NumericalInstability as exc:
        _emit_error(NUMERICAL_ERROR, "numerical", str(exc))
        return NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
