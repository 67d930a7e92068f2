"""Patient-level train/val/test partitions repeated over seeds."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from mitovl.ingest import Label, Manifest
from mitovl.tilegeom import Role, ShiftBounds, TileSpec, generate_tiles

FRACTIONS = (0.6, 0.2, 0.2)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


class Partition(str, Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    assignment: dict[str, Partition]
    fractions: tuple[float, float, float] = FRACTIONS

    def patients(self, part: Partition) -> list[str]:
        return sorted(p for p, q in self.assignment.items() if q is Partition(part))

    @property
    def counts(self) -> dict[str, int]:
        return {q.value: len(self.patients(q)) for q in Partition}

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "fractions": list(self.fractions),
            "assignment": {p: q.value for p, q in sorted(self.assignment.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(
            seed=int(d["seed"]),
            assignment={p: Partition(q) for p, q in d["assignment"].items()},
            fractions=tuple(d.get("fractions", FRACTIONS)),
        )


def _round_half_up(num: int, den: int) -> int:
    # round(num / den) for non-negative ints with ties going up
    return (2 * num + den) // (2 * den)


def partition_sizes(n: int, fractions=FRACTIONS) -> tuple[int, int, int]:
    """``(round(f_train*n), round(f_val*n), remainder)`` using exact rational arithmetic."""
    from fractions import Fraction

    ft, fv = Fraction(str(fractions[0])), Fraction(str(fractions[1]))
    n_train = _round_half_up(ft.numerator * n, ft.denominator)
    n_val = _round_half_up(fv.numerator * n, fv.denominator)
    return n_train, n_val, n - n_train - n_val


def make_split(patients, seed: int, fractions=FRACTIONS) -> SplitPlan:
    """Seeded shuffle of the sorted patient list, then prefix assignment."""
    patients = sorted(set(patients))
    if len(patients) < 5:
        raise ValueError(f"need at least 5 patients for a 60/20/20 split, got {len(patients)}")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(patients))
    n_train, n_val, _ = partition_sizes(len(patients), fractions)
    assignment = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            part = Partition.TRAIN
        elif rank < n_train + n_val:
            part = Partition.VAL
        else:
            part = Partition.TEST
        assignment[patients[idx]] = part
    return SplitPlan(seed=seed, assignment=assignment, fractions=tuple(fractions))


@dataclass
class SplitDataset:
    plan: SplitPlan
    train: list[TileSpec]
    val: list[TileSpec]
    test: list[TileSpec]
    annotations: dict[str, int] = field(default_factory=dict)
    pruned: dict[str, int] = field(default_factory=dict)
    dropped: dict[str, int] = field(default_factory=dict)

    def partition(self, part: Partition | str) -> list[TileSpec]:
        return {Partition.TRAIN: self.train, Partition.VAL: self.val, Partition.TEST: self.test}[Partition(part)]

    @property
    def counts(self) -> dict[str, int]:
        return {q.value: len(self.partition(q)) for q in Partition}

    def label_counts(self) -> dict[str, dict[str, int]]:
        out = {}
        for q in Partition:
            tiles = self.partition(q)
            out[q.value] = {
                lab.value: sum(1 for t in tiles if t.label is lab) for lab in Label
            }
        return out


def materialize_split(
    manifest: Manifest,
    plan: SplitPlan,
    bounds: ShiftBounds = ShiftBounds(),
    train_replicas: int = 10,
    eval_replicas: int = 1,
    workers: int = 1,
    prune_against: str = "boxes",
) -> SplitDataset:
    """Generate per-partition tiles; train is replicated, val/test are not."""
    missing = set(manifest.patients()) - set(plan.assignment)
    if missing:
        raise ValueError(f"split plan lacks {len(missing)} manifest patients, e.g. {sorted(missing)[:3]}")
    out = {}
    n_ann, n_pruned, n_dropped = {}, {}, {}
    for part in Partition:
        sub = manifest.subset(plan.patients(part))
        role = Role.TRAIN if part is Partition.TRAIN else Role.EVAL
        replicas = train_replicas if part is Partition.TRAIN else eval_replicas
        res = generate_tiles(
            sub, role, replicas, bounds, global_seed=plan.seed, workers=workers, prune_against=prune_against
        )
        out[part] = res.tiles
        n_ann[part.value] = len(sub.annotations)
        n_pruned[part.value] = len(res.pruned)
        n_dropped[part.value] = len(res.dropped)
    return SplitDataset(
        plan, out[Partition.TRAIN], out[Partition.VAL], out[Partition.TEST], n_ann, n_pruned, n_dropped
    )


def write_plan(plan: SplitPlan, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_plan(path) -> SplitPlan:
    return SplitPlan.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
