"""Declarative experiment configuration (YAML or JSON)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from mitovl.models.config import TrainConfig, get_family
from mitovl.prompts import PromptMode, PromptTemplates
from mitovl.splits import DEFAULT_SEEDS
from mitovl.synth import SyntheticSpec
from mitovl.tilegeom import DEFAULT_REPLICAS, Role, ShiftBounds


class ConfigError(ValueError):
    pass


_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)} - {"family", "provenance"}


@dataclass(frozen=True)
class FamilyRun:
    family: str
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        spec = get_family(self.family)
        bad = sorted(set(self.overrides) - _TRAIN_FIELDS)
        if bad:
            raise ConfigError(f"{self.family}: unknown TrainConfig overrides {bad}")
        if self.overrides and spec.train is None:
            raise ConfigError(f"{self.family} is zero-shot and takes no TrainConfig overrides")

    def train_config(self, seed: int) -> TrainConfig | None:
        spec = get_family(self.family)
        if spec.train is None:
            return None
        cfg = spec.train.with_overrides(**self.overrides)
        prov = dict(cfg.provenance)
        if self.overrides:
            prov["overridden"] = sorted(self.overrides)
        return cfg.with_overrides(seed=seed, provenance=prov)

    def to_dict(self) -> dict:
        return {"family": self.family, "overrides": dict(sorted(self.overrides.items()))}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a pipeline run needs. Defaults follow the published protocol."""

    out_dir: str = "out"
    annotations: str | None = None
    metadata: str | None = None
    images_dir: str | None = None
    synthetic: SyntheticSpec | None = None
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    shift: ShiftBounds = ShiftBounds()
    train_replicas: int = DEFAULT_REPLICAS[Role.TRAIN]
    eval_replicas: int = DEFAULT_REPLICAS[Role.EVAL]
    prune_against: str = "boxes"
    families: tuple[FamilyRun, ...] = (FamilyRun("tiny-cnn"),)
    prompts: PromptTemplates = PromptTemplates()
    prompt_mode: PromptMode | None = None  # overrides every family's mode when set
    workers: int = 1
    eval_batch_size: int = 64
    alpha: float = 0.05

    def __post_init__(self):
        if self.annotations is None and self.synthetic is None:
            raise ConfigError("config needs either dataset paths (annotations, metadata) or a synthetic spec")
        if self.annotations is not None and self.metadata is None:
            raise ConfigError("annotations given without metadata")
        if not self.seeds:
            raise ConfigError("at least one split seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("split seeds must be distinct")
        if not self.families:
            raise ConfigError("at least one model family is required")
        if self.prune_against not in ("boxes", "tiles"):
            raise ConfigError("prune_against must be 'boxes' or 'tiles'")
        if self.train_replicas < 1 or self.eval_replicas < 1:
            raise ConfigError("replica counts must be >= 1")

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "out_dir": self.out_dir,
            "dataset": {
                "annotations": self.annotations,
                "metadata": self.metadata,
                "images_dir": self.images_dir,
            },
            "synthetic": self.synthetic.to_dict() if self.synthetic else None,
            "seeds": list(self.seeds),
            "shift": dataclasses.asdict(self.shift),
            "replicas": {"train": self.train_replicas, "eval": self.eval_replicas},
            "prune_against": self.prune_against,
            "families": [f.to_dict() for f in self.families],
            "prompts": {**self.prompts.to_dict(), "mode": self.prompt_mode.value if self.prompt_mode else None},
            "workers": self.workers,
            "eval_batch_size": self.eval_batch_size,
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        known = {"out_dir", "dataset", "synthetic", "seeds", "shift", "replicas", "prune_against", "families",
                 "prompts", "workers", "eval_batch_size", "alpha"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        ds = d.get("dataset") or {}
        syn = d.get("synthetic")
        rep = d.get("replicas") or {}
        prompts = dict(d.get("prompts") or {})
        mode = prompts.pop("mode", None)
        fams = []
        for f in d.get("families") or ["tiny-cnn"]:
            if isinstance(f, str):
                fams.append(FamilyRun(f))
            else:
                fams.append(FamilyRun(f["family"], dict(f.get("overrides") or {})))
        try:
            return cls(
                out_dir=str(d.get("out_dir", "out")),
                annotations=ds.get("annotations"),
                metadata=ds.get("metadata"),
                images_dir=ds.get("images_dir"),
                synthetic=SyntheticSpec(**syn) if syn is not None else None,
                seeds=tuple(int(s) for s in d.get("seeds", DEFAULT_SEEDS)),
                shift=ShiftBounds(**(d.get("shift") or {})),
                train_replicas=int(rep.get("train", DEFAULT_REPLICAS[Role.TRAIN])),
                eval_replicas=int(rep.get("eval", DEFAULT_REPLICAS[Role.EVAL])),
                prune_against=d.get("prune_against", "boxes"),
                families=tuple(fams),
                prompts=PromptTemplates(**prompts),
                prompt_mode=PromptMode(mode) if mode else None,
                workers=int(d.get("workers", 1)),
                eval_batch_size=int(d.get("eval_batch_size", 64)),
                alpha=float(d.get("alpha", 0.05)),
            )
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def digest_dict(self) -> dict:
        """Fields that influence results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        return d

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def loads_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    return ExperimentConfig.from_dict(data or {})


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    cfg = loads_config(path.read_text())
    base = path.parent
    # dataset paths are relative to the config file
    fix = lambda p: None if p is None else str((base / p) if not Path(p).is_absolute() else p)  # noqa: E731
    return cfg.with_overrides(annotations=fix(cfg.annotations), metadata=fix(cfg.metadata),
                              images_dir=fix(cfg.images_dir))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
