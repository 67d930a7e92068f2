"""End-to-end experiment runner: corpus -> ingest -> split -> tiles -> train -> eval -> report.

Each stage writes its artifacts plus a ``stage.json`` holding a digest of its
inputs and the sha256 of every output file. A stage whose record matches is
skipped, so reruns resume from the first stale stage. Downstream stages
re-hash upstream outputs before reading them and refuse to run on a mismatch.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from pathlib import Path

from mitovl.config import ExperimentConfig, canonical_json
from mitovl.eval import (
    auc,
    build_report,
    confusion,
    exact_match_accuracy,
    f1_score,
    metrics_for,
    read_predictions,
    write_predictions,
)
from mitovl.ingest import parse_annotations, read_manifest, write_ingest_outputs
from mitovl.models import (
    TileSource,
    build_adapter,
    build_pretext,
    finetune,
    get_family,
    load_checkpoint,
    predict,
    save_checkpoint,
    train_simsiam,
    train_stain_pretext,
    transfer_pretext_weights,
)
from mitovl.models.config import Objective
from mitovl.prompts import PromptTemplates
from mitovl.splits import Partition, make_split, materialize_split, read_plan, write_plan
from mitovl.synth import generate_synthetic_corpus
from mitovl.tilegeom import read_tiles, write_tiles

log = logging.getLogger(__name__)

STAGES = ("synth", "ingest", "split", "tiles", "train", "eval", "report")
RECORD = "stage.json"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _key(inputs) -> str:
    return hashlib.sha256(canonical_json(inputs).encode()).hexdigest()


def _outputs_ok(directory: Path, outputs: dict) -> bool:
    for rel, digest in outputs.items():
        p = directory / rel
        if not p.exists() or sha256_file(p) != digest:
            return False
    return True


def run_stage(name: str, directory, inputs, body, force: bool = False, record: str = RECORD) -> dict:
    """Run ``body() -> list[Path]`` unless ``directory/record`` already matches ``inputs``."""
    directory = Path(directory)
    rec_path = directory / record
    key = _key(inputs)
    if not force and rec_path.exists():
        rec = json.loads(rec_path.read_text())
        if rec.get("inputs") == key and _outputs_ok(directory, rec.get("outputs", {})):
            log.info("stage %s: up to date (%s)", name, directory)
            return rec["outputs"]
    directory.mkdir(parents=True, exist_ok=True)
    rec_path.unlink(missing_ok=True)
    try:
        paths = body()
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc
    outputs = {p.relative_to(directory).as_posix(): sha256_file(p) for p in sorted(Path(x) for x in paths)}
    rec_path.write_text(json.dumps({"stage": name, "inputs": key, "outputs": outputs}, indent=2, sort_keys=True)
                        + "\n")
    return outputs


def verify_stage(name: str, directory, record: str = RECORD) -> dict:
    """Re-hash an upstream stage's outputs; returns them or raises :class:`PipelineError`."""
    directory = Path(directory)
    rec_path = directory / record
    if not rec_path.exists():
        raise PipelineError(name, f"missing upstream artifact {rec_path}; run that stage first")
    rec = json.loads(rec_path.read_text())
    for rel, digest in rec["outputs"].items():
        p = directory / rel
        if not p.exists():
            raise PipelineError(name, f"upstream artifact {p} is missing")
        if sha256_file(p) != digest:
            raise PipelineError(name, f"upstream artifact {p} changed since it was written (digest mismatch)")
    return rec["outputs"]


class Layout:
    def __init__(self, root):
        self.root = Path(root)
        self.corpus = self.root / "corpus"
        self.ingest = self.root / "ingest"
        self.splits = self.root / "splits"
        self.tiles = self.root / "tiles"
        self.runs = self.root / "runs"
        self.report = self.root / "report"

    def seed_dir(self, base: Path, seed: int) -> Path:
        return base / f"seed_{seed}"

    def run_dir(self, family: str, seed: int) -> Path:
        return self.runs / family / f"seed_{seed}"


# ---------------------------------------------------------------------------
# stages


def stage_synth(cfg: ExperimentConfig, lay: Layout, force=False) -> None:
    if cfg.synthetic is None:
        return

    def body():
        if lay.corpus.exists():
            shutil.rmtree(lay.corpus)
        out = generate_synthetic_corpus(cfg.synthetic, lay.corpus)
        return [p for p in out.rglob("*") if p.is_file() and p.name != RECORD]

    run_stage("synth", lay.corpus, {"synthetic": cfg.synthetic.to_dict()}, body, force)


def _dataset_paths(cfg: ExperimentConfig, lay: Layout):
    if cfg.annotations is not None:
        return Path(cfg.annotations), Path(cfg.metadata), cfg.images_dir
    return lay.corpus / "annotations.json", lay.corpus / "metadata.json", None


def stage_ingest(cfg: ExperimentConfig, lay: Layout, force=False) -> None:
    ann, meta, images = _dataset_paths(cfg, lay)
    if cfg.annotations is None:
        verify_stage("ingest", lay.corpus)
    for p in (ann, meta):
        if not p.exists():
            raise PipelineError("ingest", f"dataset file {p} does not exist")

    def body():
        res = parse_annotations(ann, meta, images)
        paths = write_ingest_outputs(res, lay.ingest)
        # provenance carries timestamps and stays out of the digest
        return [paths["manifest"], paths["rejections"], paths["stats"]]

    inputs = {"annotations": sha256_file(ann), "metadata": sha256_file(meta), "images_dir": images}
    run_stage("ingest", lay.ingest, inputs, body, force)


def _load_manifest(lay: Layout, stage: str):
    verify_stage(stage, lay.ingest)
    return read_manifest(lay.ingest / "manifest.jsonl")


def stage_split(cfg: ExperimentConfig, lay: Layout, force=False) -> None:
    upstream = verify_stage("split", lay.ingest)

    def body():
        m = read_manifest(lay.ingest / "manifest.jsonl")
        paths = []
        for seed in cfg.seeds:
            p = lay.seed_dir(lay.splits, seed) / "plan.json"
            write_plan(make_split(m.patients(), seed), p)
            paths.append(p)
        return paths

    run_stage("split", lay.splits, {"seeds": list(cfg.seeds), "ingest": upstream}, body, force)


def stage_tiles(cfg: ExperimentConfig, lay: Layout, force=False) -> None:
    up_ingest = verify_stage("tiles", lay.ingest)
    up_split = verify_stage("tiles", lay.splits)

    def body():
        m = read_manifest(lay.ingest / "manifest.jsonl")
        paths = []
        for seed in cfg.seeds:
            d = lay.seed_dir(lay.tiles, seed)
            plan = read_plan(lay.seed_dir(lay.splits, seed) / "plan.json")
            ds = materialize_split(m, plan, cfg.shift, cfg.train_replicas, cfg.eval_replicas, cfg.workers,
                                   cfg.prune_against)
            for part in Partition:
                p = d / f"{part.value.lower()}.jsonl"
                write_tiles(ds.partition(part), p)
                paths.append(p)
            counts = {"tiles": ds.counts, "labels": ds.label_counts(), "annotations": ds.annotations,
                      "pruned": ds.pruned, "dropped": ds.dropped}
            p = d / "counts.json"
            p.write_text(json.dumps(counts, indent=2, sort_keys=True) + "\n")
            paths.append(p)
        return paths

    inputs = {
        "shift": cfg.to_dict()["shift"],
        "replicas": [cfg.train_replicas, cfg.eval_replicas],
        "prune_against": cfg.prune_against,
        "ingest": up_ingest,
        "split": up_split,
    }
    run_stage("tiles", lay.tiles, inputs, body, force)


class SplitTiles:
    """train/val/test tiles read back from a split directory."""

    def __init__(self, d: Path):
        self.train = read_tiles(d / "train.jsonl")
        self.val = read_tiles(d / "val.jsonl")
        self.test = read_tiles(d / "test.jsonl")


def _mode(override, spec):
    return override if override is not None and spec.prompt_mode is not None else spec.prompt_mode


def _run_pretext(spec, split, source, seed, out: Path, device=None):
    pre = get_family(spec.pretext)
    pcfg = pre.train.with_overrides(seed=seed)
    net, to_input, downsample = build_pretext(pre, device, seed)
    if pre.objective is Objective.STAIN_MSE:
        events = train_stain_pretext(net, split.train, source, pcfg, downsample=downsample)
    else:
        events = train_simsiam(net, split.train, source, pcfg, to_input)
    import torch

    out.mkdir(parents=True, exist_ok=True)
    torch.save(net.state_dict(), out / "weights.pt")
    with open(out / "events.jsonl", "w") as fh:
        for ev in events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(pcfg.to_dict(), indent=2, sort_keys=True, default=str) + "\n")
    return net, [out / "weights.pt", out / "events.jsonl", out / "config.json"]


def train_one(run, seed: int, split, source: TileSource, out: Path, prompts: PromptTemplates = PromptTemplates(),
              prompt_mode=None, eval_batch_size: int = 64) -> list[Path]:
    """Finetune one family on one split; writes ``checkpoint/`` (and ``pretext/``) under ``out``."""
    spec = get_family(run.family)
    tcfg = run.train_config(seed)
    adapter = build_adapter(spec, seed=seed)
    paths = []
    extra = {"family": spec.id}
    if spec.pretext:
        net, ppaths = _run_pretext(spec, split, source, seed, out / "pretext")
        paths += ppaths
        extra["transfer"] = transfer_pretext_weights(net, adapter)
    res = finetune(adapter, split, tcfg, spec.objective, source, _mode(prompt_mode, spec), prompts,
                   spec.no_metadata, eval_batch_size=eval_batch_size)
    extra.update({"best_epoch": res.best_epoch, "best_val_f1": res.best_val_f1})
    ck = save_checkpoint(res.adapter, out / "checkpoint", tcfg, res.events, extra)
    return paths + [ck / n for n in ("weights.pt", "extra_state.json", "config.json", "events.jsonl")]


def stage_train(cfg: ExperimentConfig, lay: Layout, force=False) -> None:
    manifest = _load_manifest(lay, "train")
    up_tiles = verify_stage("train", lay.tiles)
    source = TileSource(manifest.slide_map())
    for run in cfg.families:
        spec = get_family(run.family)
        if spec.zero_shot:
            continue
        for seed in cfg.seeds:
            sd = lay.seed_dir(lay.tiles, seed)
            inputs = {
                "family": run.to_dict(),
                "train_config": run.train_config(seed).to_dict(),
                "pretext": get_family(spec.pretext).train.to_dict() if spec.pretext else None,
                "prompts": cfg.to_dict()["prompts"],
                "tiles": {k: v for k, v in up_tiles.items() if k.startswith(f"seed_{seed}/")},
            }
            out = lay.run_dir(run.family, seed)
            log.info("train %s seed %d", run.family, seed)
            run_stage(f"train[{run.family}, seed {seed}]", out, inputs,
                      lambda: train_one(run, seed, SplitTiles(sd), source, out, cfg.prompts, cfg.prompt_mode,
                                            cfg.eval_batch_size), force, record="train.stage.json")


def evaluate_one(run, seed: int, test, source: TileSource, out: Path, checkpoint: Path | None,
                 prompts: PromptTemplates = PromptTemplates(), prompt_mode=None, batch_size: int = 64) -> list[Path]:
    spec = get_family(run.family)
    adapter = build_adapter(spec, seed=seed)
    if checkpoint is not None:
        load_checkpoint(adapter, checkpoint)
    preds = predict(adapter, test, source, _mode(prompt_mode, spec), prompts, spec.no_metadata,
                    batch_size=batch_size, seed=seed, family=spec.id)
    p_pred = out / "predictions.csv"
    write_predictions(preds, p_pred)
    metrics = {"family": spec.id, "seed": seed, "n": len(preds), "f1": f1_score(preds), "auc": auc(preds),
               "exact_match": exact_match_accuracy(preds), "parse_failures": int((~preds.parse_ok).sum()),
               "confusion": confusion(preds)}
    p_met = out / "metrics.json"
    p_met.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return [p_pred, p_met]


def stage_eval(cfg: ExperimentConfig, lay: Layout, force=False) -> None:
    manifest = _load_manifest(lay, "eval")
    up_tiles = verify_stage("eval", lay.tiles)
    source = TileSource(manifest.slide_map())
    for run in cfg.families:
        spec = get_family(run.family)
        for seed in cfg.seeds:
            out = lay.run_dir(run.family, seed)
            ck = None
            ck_digest = None
            if not spec.zero_shot:
                ck_digest = verify_stage("eval", out, record="train.stage.json")
                ck = out / "checkpoint"
            test_key = f"seed_{seed}/test.jsonl"
            inputs = {"family": run.to_dict(), "builder": spec.builder, "checkpoint": ck_digest,
                      "test": up_tiles[test_key], "prompts": cfg.to_dict()["prompts"]}
            test_path = lay.seed_dir(lay.tiles, seed) / "test.jsonl"
            run_stage(f"eval[{run.family}, seed {seed}]", out, inputs,
                      lambda: evaluate_one(run, seed, read_tiles(test_path), source, out, ck, cfg.prompts,
                                               cfg.prompt_mode, cfg.eval_batch_size), force,
                      record="eval.stage.json")


def stage_report(cfg: ExperimentConfig, lay: Layout, force=False) -> None:
    up = {}
    for run in cfg.families:
        for seed in cfg.seeds:
            up[f"{run.family}/{seed}"] = verify_stage("report", lay.run_dir(run.family, seed),
                                                      record="eval.stage.json")
    up_tiles = verify_stage("report", lay.tiles)

    def body():
        reports = []
        for run in cfg.families:
            spec = get_family(run.family)
            preds = [read_predictions(lay.run_dir(run.family, s) / "predictions.csv", seed=s, family=spec.id)
                     for s in cfg.seeds]
            reports.append(metrics_for(spec.id, spec.pretraining, spec.finetuning, preds))
        paths = list(build_report(reports, cfg.alpha).write(lay.report).values())
        counts = {f"seed_{s}": json.loads((lay.seed_dir(lay.tiles, s) / "counts.json").read_text())
                  for s in cfg.seeds}
        p = lay.report / "counts.json"
        p.write_text(json.dumps(counts, indent=2, sort_keys=True) + "\n")
        return paths + [p]

    run_stage("report", lay.report, {"runs": up, "tiles": up_tiles, "alpha": cfg.alpha}, body, force)


_STAGE_FNS = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "split": stage_split,
    "tiles": stage_tiles,
    "train": stage_train,
    "eval": stage_eval,
    "report": stage_report,
}


def run_pipeline(cfg: ExperimentConfig, stages=None, force: bool = False) -> Path:
    """Run ``stages`` (default: all, in order) and return the report directory."""
    lay = Layout(Path(cfg.out_dir).resolve())
    lay.root.mkdir(parents=True, exist_ok=True)
    (lay.root / "config.yaml").write_text(cfg.dumps())
    todo = list(STAGES) if not stages else [s for s in STAGES if s in set(stages)]
    unknown = set(stages or ()) - set(STAGES)
    if unknown:
        raise PipelineError(sorted(unknown)[0], f"unknown stage; choose from {', '.join(STAGES)}")
    for name in todo:
        log.info("stage %s", name)
        try:
            _STAGE_FNS[name](cfg, lay, force)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc
    return lay.report
