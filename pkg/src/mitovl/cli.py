"""Command-line entry point: ``mitovl <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("mitovl")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


def _load_cfg(path):
    from mitovl.config import load_config

    return load_config(path) if path else None


def _bounds(args):
    from mitovl.tilegeom import ShiftBounds

    return ShiftBounds(max_shift_px=args.max_shift, edge_policy=args.edge_policy)


def cmd_synth(args) -> int:
    from mitovl.synth import SyntheticSpec, generate_synthetic_corpus

    spec = SyntheticSpec(
        n_patients=args.patients,
        annotations_per_slide=args.annotations_per_slide,
        slide_size=args.slide_size,
        separability=args.separability,
        seed=args.seed,
        slides_per_patient=args.slides_per_patient,
        positive_fraction=args.positive_fraction,
    )
    out = generate_synthetic_corpus(spec, args.out)
    print(out / "annotations.json")
    return 0


def cmd_ingest(args) -> int:
    from mitovl.ingest import parse_annotations, write_ingest_outputs

    res = parse_annotations(args.annotations, args.metadata, args.images_dir)
    paths = write_ingest_outputs(res, args.out)
    print(json.dumps(json.loads(paths["stats"].read_text()), indent=2, sort_keys=True))
    return 0


def cmd_tiles(args) -> int:
    from mitovl.ingest import read_manifest
    from mitovl.tilegeom import Role, generate_tiles, materialize_crops, write_tiles

    m = read_manifest(args.manifest)
    role = Role(args.role.upper())
    res = generate_tiles(m, role, args.replicas, _bounds(args), global_seed=args.seed, workers=args.workers,
                         prune_against=args.prune_against)
    write_tiles(res.tiles, args.out)
    if args.crops:
        materialize_crops(res.tiles, m.slide_map(), args.crops)
    print(json.dumps({"tiles": len(res.tiles), "pruned": len(res.pruned), "dropped": len(res.dropped)}))
    return 0


def cmd_split(args) -> int:
    from mitovl.ingest import read_manifest
    from mitovl.splits import Partition, make_split, materialize_split, write_plan
    from mitovl.tilegeom import write_tiles

    m = read_manifest(args.manifest)
    plan = make_split(m.patients(), args.seed)
    out = Path(args.out)
    write_plan(plan, out / "plan.json")
    ds = materialize_split(m, plan, _bounds(args), args.train_replicas, args.eval_replicas, args.workers,
                           args.prune_against)
    for part in Partition:
        write_tiles(ds.partition(part), out / f"{part.value.lower()}.jsonl")
    counts = {"patients": plan.counts, "tiles": ds.counts, "labels": ds.label_counts(), "pruned": ds.pruned,
              "dropped": ds.dropped, "annotations": ds.annotations}
    (out / "counts.json").write_text(json.dumps(counts, indent=2, sort_keys=True) + "\n")
    print(json.dumps(counts, sort_keys=True))
    return 0


def _prompt_settings(args) -> dict:
    cfg = _load_cfg(getattr(args, "config", None))
    if cfg is None:
        return {}
    return {"prompts": cfg.prompts, "prompt_mode": cfg.prompt_mode}


def cmd_train(args) -> int:
    from mitovl.config import FamilyRun
    from mitovl.ingest import read_manifest
    from mitovl.models import TileSource, get_family
    from mitovl.pipeline import SplitTiles, train_one

    spec = get_family(args.family)
    if spec.zero_shot:
        print(f"{args.family} is a zero-shot family; use `mitovl zero-shot`", file=sys.stderr)
        return 2
    run = FamilyRun(args.family, _overrides(args.set))
    m = read_manifest(args.manifest)
    paths = train_one(run, args.seed, SplitTiles(Path(args.split)), TileSource(m.slide_map()), Path(args.out),
                      **_prompt_settings(args))
    print(Path(args.out) / "checkpoint")
    log.info("wrote %d files", len(paths))
    return 0


def _evaluate(args, checkpoint) -> int:
    from mitovl.config import FamilyRun
    from mitovl.ingest import read_manifest
    from mitovl.models import TileSource
    from mitovl.pipeline import evaluate_one
    from mitovl.tilegeom import read_tiles

    m = read_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluate_one(FamilyRun(args.family), args.seed, read_tiles(args.tiles), TileSource(m.slide_map()), out,
                 checkpoint, **_prompt_settings(args))
    print((out / "metrics.json").read_text(), end="")
    return 0


def cmd_zero_shot(args) -> int:
    from mitovl.models import get_family

    if not get_family(args.family).zero_shot:
        log.warning("%s is normally finetuned; scoring its untrained adapter", args.family)
    return _evaluate(args, None)


def cmd_eval(args) -> int:
    return _evaluate(args, Path(args.checkpoint))


def _seed_metrics(run_dir: Path) -> dict[int, dict]:
    out = {}
    for p in sorted(run_dir.glob("seed_*/metrics.json")):
        d = json.loads(p.read_text())
        out[int(d["seed"])] = d
    if not out:
        raise FileNotFoundError(f"no seed_*/metrics.json under {run_dir}")
    return out


def cmd_compare(args) -> int:
    from mitovl.eval import paired_t_test

    a, b = _seed_metrics(Path(args.run_a)), _seed_metrics(Path(args.run_b))
    if set(a) != set(b):
        print(f"seed sets differ: {sorted(a)} vs {sorted(b)}", file=sys.stderr)
        return 1
    seeds = sorted(a)
    xa = [a[s][args.metric] for s in seeds]
    xb = [b[s][args.metric] for s in seeds]
    res = paired_t_test(xa, xb)
    print(json.dumps({"metric": args.metric, "seeds": seeds, "a": xa, "b": xb, "t": res.t, "p": res.p,
                      "df": res.df, "degenerate": res.degenerate}, indent=2))
    return 0


def cmd_report(args) -> int:
    from mitovl.eval import build_report, metrics_for, read_predictions
    from mitovl.models import get_family

    runs_root = Path(args.runs)
    families = args.families or sorted(p.name for p in runs_root.iterdir() if p.is_dir())
    reports = []
    for fam in families:
        spec = get_family(fam)
        preds = []
        for p in sorted((runs_root / fam).glob("seed_*/predictions.csv")):
            seed = int(p.parent.name.split("_", 1)[1])
            preds.append(read_predictions(p, seed=seed, family=fam))
        if not preds:
            print(f"no predictions for {fam} under {runs_root / fam}", file=sys.stderr)
            return 1
        reports.append(metrics_for(fam, spec.pretraining, spec.finetuning, preds))
    rep = build_report(reports, args.alpha)
    rep.write(args.out)
    print(rep.table_text(), end="")
    return 0


def cmd_run(args) -> int:
    from mitovl.config import load_config
    from mitovl.pipeline import run_pipeline

    cfg = load_config(args.config)
    kw = {}
    if args.out:
        kw["out_dir"] = args.out
    if args.seed:
        kw["seeds"] = tuple(args.seed)
    if args.workers is not None:
        kw["workers"] = args.workers
    if kw:
        cfg = cfg.with_overrides(**kw)
    report = run_pipeline(cfg, stages=args.stage, force=args.force)
    if (report / "table.md").exists():
        print((report / "table.md").read_text(), end="")
    return 0


def cmd_families(args) -> int:
    from mitovl.models import FAMILIES

    for fid, spec in FAMILIES.items():
        mode = spec.prompt_mode.value if spec.prompt_mode else "-"
        tr = "zero-shot" if spec.zero_shot else f"bs={spec.train.batch_size} lr={spec.train.learning_rate:g} " \
                                               f"{spec.train.optimizer.value}"
        print(f"{fid:30s} {spec.kind.value:18s} {mode:22s} {tr}")
    return 0


def _add_geometry(p):
    p.add_argument("--max-shift", type=int, default=80, help="max |shift| in px (default 80)")
    p.add_argument("--edge-policy", choices=["drop", "force"], default="drop")
    p.add_argument("--prune-against", choices=["boxes", "tiles"], default="boxes")
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mitovl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic ring/dot corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=10)
    p.add_argument("--annotations-per-slide", type=int, default=10)
    p.add_argument("--slides-per-patient", type=int, default=1)
    p.add_argument("--slide-size", type=int, default=1000)
    p.add_argument("--separability", type=float, default=1.0)
    p.add_argument("--positive-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("ingest", help="validate annotations + metadata into a manifest")
    p.add_argument("--annotations", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--images-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("tiles", help="generate shifted tiles for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--role", choices=["train", "eval"], default="train")
    p.add_argument("--replicas", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="tiles JSONL path")
    p.add_argument("--crops", help="also write PNG crops into this directory")
    _add_geometry(p)
    p.set_defaults(fn=cmd_tiles)

    p = sub.add_parser("split", help="patient-level split plus per-partition tiles")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--train-replicas", type=int, default=10)
    p.add_argument("--eval-replicas", type=int, default=1)
    _add_geometry(p)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("train", help="finetune one family on one split")
    p.add_argument("--family", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True, help="directory with train/val/test.jsonl")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="experiment config (prompt templates)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="TrainConfig override, repeatable")
    p.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("zero-shot", cmd_zero_shot, "score test tiles with an untrained adapter"),
                               ("eval", cmd_eval, "score test tiles with a finetuned checkpoint")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--family", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--tiles", required=True, help="test tiles JSONL")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        p.add_argument("--config")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("compare", help="paired t-test between two family run directories")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--metric", choices=["f1", "auc"], default="f1")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("report", help="aggregate per-seed predictions into tables")
    p.add_argument("--runs", required=True, help="directory holding <family>/seed_*/predictions.csv")
    p.add_argument("--families", nargs="*")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("run", help="run the whole pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", action="append", help="run only this stage (repeatable)")
    p.add_argument("--out", help="override the config's output directory")
    p.add_argument("--seed", type=int, action="append", help="override split seeds (repeatable)")
    p.add_argument("--workers", type=int)
    p.add_argument("--force", action="store_true", help="rerun stages even when up to date")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("families", help="list model families and their defaults")
    p.set_defaults(fn=cmd_families)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # report, don't dump a traceback at users
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
