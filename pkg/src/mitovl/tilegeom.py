"""Tile geometry: box expansion, bounded random shifts, hard-negative pruning."""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from threading import Lock

import numpy as np

from mitovl import kernels
from mitovl.ingest import AnnotationRecord, Box, Label, Manifest, SlideInfo

logger = logging.getLogger(__name__)


class Role(str, Enum):
    TRAIN = "TRAIN"
    EVAL = "EVAL"


DEFAULT_REPLICAS = {Role.TRAIN: 10, Role.EVAL: 1}


class EmptyIntervalError(ValueError):
    pass


class UntileableSlideError(ValueError):
    pass


class TileReadError(IOError):
    pass


@dataclass(frozen=True)
class ShiftBounds:
    """Shift/tile geometry.

    ``edge_policy`` decides what happens to a box so close to the slide border
    that no shift within ``max_shift_px`` keeps the tile inside the slide:
    ``"drop"`` emits no tile for it, ``"force"`` emits the nearest in-slide
    tile (shift up to ``(tile - box) / 2``) flagged ``edge_forced``.
    """

    max_shift_px: int = 80
    tile_side_px: int = 224
    box_side_px: int = 50
    edge_policy: str = "drop"
    eval_shift: str = "shifted"  # or "centered"

    def __post_init__(self):
        if self.max_shift_px < 0 or self.tile_side_px <= 0 or self.box_side_px <= 0:
            raise ValueError("shift bounds must be non-negative / positive")
        if 2 * self.max_shift_px + self.box_side_px > self.tile_side_px:
            raise ValueError(
                f"max shift {self.max_shift_px} + half box {self.box_side_px / 2} exceeds half tile "
                f"{self.tile_side_px / 2}; shifted tiles could crop the figure"
            )
        if self.edge_policy not in ("drop", "force"):
            raise ValueError(f"edge_policy must be 'drop' or 'force', got {self.edge_policy!r}")
        if self.eval_shift not in ("shifted", "centered"):
            raise ValueError(f"eval_shift must be 'shifted' or 'centered', got {self.eval_shift!r}")


@dataclass(frozen=True, slots=True)
class TileSpec:
    annotation_id: str
    slide_id: str
    tile_origin: tuple[int, int]
    tile_side_px: int
    applied_shift: tuple[int, int]
    label: Label
    replica_index: int
    rng_seed: int
    edge_forced: bool = False

    @property
    def rect(self) -> Box:
        x, y = self.tile_origin
        return Box(x, y, x + self.tile_side_px, y + self.tile_side_px)

    @property
    def key(self) -> str:
        return f"{self.annotation_id}_{self.replica_index}"

    def to_dict(self) -> dict:
        return {
            "annotation_id": self.annotation_id,
            "slide_id": self.slide_id,
            "tile_origin": list(self.tile_origin),
            "tile_side_px": self.tile_side_px,
            "applied_shift": list(self.applied_shift),
            "label": self.label.value,
            "replica_index": self.replica_index,
            "rng_seed": self.rng_seed,
            "edge_forced": self.edge_forced,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TileSpec":
        return cls(
            annotation_id=d["annotation_id"],
            slide_id=d["slide_id"],
            tile_origin=tuple(d["tile_origin"]),
            tile_side_px=d["tile_side_px"],
            applied_shift=tuple(d["applied_shift"]),
            label=Label(d["label"]),
            replica_index=d["replica_index"],
            rng_seed=d["rng_seed"],
            edge_forced=d.get("edge_forced", False),
        )


@dataclass(frozen=True)
class ShiftInterval:
    lo: int
    hi: int

    @property
    def empty(self) -> bool:
        return self.lo > self.hi

    def __iter__(self):
        return iter((self.lo, self.hi))


def expand_box(box: Box, tile_side: int = 224) -> tuple[int, int]:
    """Top-left of the ``tile_side`` square centred (floor) on ``box``; may lie outside the slide."""
    cx = (box.x_min + box.x_max) // 2
    cy = (box.y_min + box.y_max) // 2
    return cx - tile_side // 2, cy - tile_side // 2


def feasible_shift_interval(origin, slide: SlideInfo, bounds: ShiftBounds = ShiftBounds()):
    """Per-axis shifts within ``±max_shift`` that keep the tile inside ``slide``.

    Returns ``(x_interval, y_interval)``. An interval is empty only for boxes
    within ``(tile - box)/2 - max_shift`` pixels of the border.
    """
    t = bounds.tile_side_px
    if slide.width_px < t or slide.height_px < t:
        raise UntileableSlideError(
            f"slide {slide.slide_id} is {slide.width_px}x{slide.height_px}, smaller than the {t}px tile"
        )
    ox, oy = origin
    m = bounds.max_shift_px
    return (
        ShiftInterval(max(-m, -ox), min(m, slide.width_px - t - ox)),
        ShiftInterval(max(-m, -oy), min(m, slide.height_px - t - oy)),
    )


def shift_key(global_seed: int, annotation_id: str, replica_index: int) -> int:
    h = kernels.stable_hash64(annotation_id)
    full = kernels.derive_keys(global_seed, np.array([h], dtype=np.uint64), replica_index + 1)
    return int(full[replica_index])


def sample_shift(interval_x: ShiftInterval, interval_y: ShiftInterval, seed: int) -> tuple[int, int]:
    """Uniform integer shift on the inclusive intervals; ``seed`` is the 64-bit stream key."""
    if interval_x.empty or interval_y.empty:
        raise EmptyIntervalError(f"cannot sample from empty interval {tuple(interval_x)} x {tuple(interval_y)}")
    key = np.array([seed], dtype=np.uint64)
    dx = kernels.uniform_ints_numpy(key, 0, interval_x.lo, interval_x.hi)[0]
    dy = kernels.uniform_ints_numpy(key, 1, interval_y.lo, interval_y.hi)[0]
    return int(dx), int(dy)


def _positive_index(slide_ids: list[str], positives):
    """Group positive boxes by slide into CSR-style arrays for the prune kernel."""
    pos_index = {sid: i for i, sid in enumerate(slide_ids)}
    groups: list[list[Box]] = [[] for _ in slide_ids]
    for p in positives:
        i = pos_index.get(p.slide_id)
        if i is not None:
            groups[i].append(p.box)
    offsets = np.zeros(len(slide_ids) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(g) for g in groups])
    flat = [b for g in groups for b in g]
    arr = np.array([b.as_list() for b in flat], dtype=np.int64).reshape(-1, 4)
    return offsets, arr


def _as_centered_tile(a: AnnotationRecord, side: int) -> AnnotationRecord:
    x, y = expand_box(a.box, side)
    return AnnotationRecord(a.annotation_id, a.slide_id, Box(x, y, x + side, y + side), a.label)


def prune_overlapping_negatives(tiles, positives, against: str = "boxes", tile_side: int = 224):
    """Split tiles into (kept, pruned).

    A HARD_NEGATIVE tile is pruned iff its tile rectangle intersects any
    MITOTIC annotation box on the same slide (half-open). With
    ``against="tiles"`` the positives' centred ``tile_side`` squares are used
    instead of their boxes. Order is preserved.
    """
    tiles = list(tiles)
    positives = [p for p in positives if p.label is Label.MITOTIC]
    if against == "tiles":
        positives = [_as_centered_tile(p, tile_side) for p in positives]
    elif against != "boxes":
        raise ValueError(f"against must be 'boxes' or 'tiles', got {against!r}")
    neg_rows = [i for i, t in enumerate(tiles) if t.label is Label.HARD_NEGATIVE]
    hit = np.zeros(len(tiles), dtype=bool)
    if neg_rows and positives:
        slide_ids = sorted({tiles[i].slide_id for i in neg_rows})
        sindex = {s: i for i, s in enumerate(slide_ids)}
        offsets, boxes = _positive_index(slide_ids, positives)
        side = {tiles[i].tile_side_px for i in neg_rows}
        for s in sorted(side):
            rows = [i for i in neg_rows if tiles[i].tile_side_px == s]
            hit[rows] = kernels.tiles_hit_boxes(
                np.array([sindex[tiles[i].slide_id] for i in rows], dtype=np.int64),
                np.array([tiles[i].tile_origin[0] for i in rows], dtype=np.int64),
                np.array([tiles[i].tile_origin[1] for i in rows], dtype=np.int64),
                s,
                offsets,
                boxes[:, 0].copy(),
                boxes[:, 1].copy(),
                boxes[:, 2].copy(),
                boxes[:, 3].copy(),
            )
    kept = [t for t, h in zip(tiles, hit) if not h]
    pruned = [t for t, h in zip(tiles, hit) if h]
    return kept, pruned


@dataclass
class TilingResult:
    """Output of :func:`generate_tiles`; iterating yields the kept tiles."""

    tiles: list[TileSpec]
    pruned: list[TileSpec] = field(default_factory=list)
    dropped: list[tuple[str, int]] = field(default_factory=list)  # (annotation_id, replica) with no feasible shift

    def __iter__(self):
        return iter(self.tiles)

    def __len__(self):
        return len(self.tiles)

    def __getitem__(self, i):
        return self.tiles[i]


def _place_chunk(x0, y0, x1, y1, w, h, keys, bounds, shifted):
    max_shift = bounds.max_shift_px if shifted else 0
    return kernels.place_tiles(
        x0, y0, x1, y1, w, h, keys, bounds.tile_side_px, max_shift, bounds.edge_policy == "force"
    )


def generate_tiles(
    manifest: Manifest,
    role: Role | str = Role.TRAIN,
    replicas: int | None = None,
    bounds: ShiftBounds = ShiftBounds(),
    global_seed: int = 0,
    workers: int = 1,
    chunk_size: int = 8192,
    prune_against: str = "boxes",
) -> TilingResult:
    """Emit ``replicas`` shifted tiles per annotation, then prune negatives.

    Output order is canonical (manifest annotation order, then replica) and does
    not depend on ``workers``; each (seed, annotation, replica) draws from its
    own counter-based stream.
    """
    role = Role(role)
    if replicas is None:
        replicas = DEFAULT_REPLICAS[role]
    if replicas < 1:
        raise ValueError(f"replicas must be >= 1, got {replicas}")
    slides = manifest.slide_map()
    for s in slides.values():
        if s.width_px < bounds.tile_side_px or s.height_px < bounds.tile_side_px:
            raise UntileableSlideError(f"slide {s.slide_id} smaller than tile")
    anns = manifest.annotations
    n = len(anns)
    if n == 0:
        return TilingResult([])

    boxes = np.array([a.box.as_list() for a in anns], dtype=np.int64)
    sizes = np.array([(slides[a.slide_id].width_px, slides[a.slide_id].height_px) for a in anns], dtype=np.int64)
    hashes = np.array([kernels.stable_hash64(a.annotation_id) for a in anns], dtype=np.uint64)
    keys = kernels.derive_keys(global_seed, hashes, replicas)
    rep = lambda col: np.repeat(col, replicas)  # noqa: E731
    x0, y0, x1, y1 = (rep(boxes[:, i]) for i in range(4))
    w, h = rep(sizes[:, 0]), rep(sizes[:, 1])
    shifted = role is Role.TRAIN or bounds.eval_shift == "shifted"

    total = n * replicas
    chunks = [(lo, min(lo + chunk_size, total)) for lo in range(0, total, chunk_size)]

    def run(span):
        lo, hi = span
        return _place_chunk(x0[lo:hi], y0[lo:hi], x1[lo:hi], y1[lo:hi], w[lo:hi], h[lo:hi], keys[lo:hi], bounds, shifted)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    ox, oy, dx, dy, status = (np.concatenate([p[i] for p in parts]) for i in range(5))

    tiles: list[TileSpec] = []
    dropped: list[tuple[str, int]] = []
    side = bounds.tile_side_px
    for row in range(total):
        a = anns[row // replicas]
        r = row % replicas
        if status[row] == kernels.STATUS_EMPTY:
            dropped.append((a.annotation_id, r))
            continue
        ddx, ddy = int(dx[row]), int(dy[row])
        tiles.append(
            TileSpec(
                annotation_id=a.annotation_id,
                slide_id=a.slide_id,
                tile_origin=(int(ox[row]) + ddx, int(oy[row]) + ddy),
                tile_side_px=side,
                applied_shift=(ddx, ddy),
                label=a.label,
                replica_index=r,
                rng_seed=int(keys[row]),
                edge_forced=bool(status[row] == kernels.STATUS_FORCED),
            )
        )
    if dropped:
        logger.warning("%d tiles dropped: no in-slide shift within ±%d px", len(dropped), bounds.max_shift_px)
    positives = [a for a in anns if a.label is Label.MITOTIC]
    kept, pruned = prune_overlapping_negatives(tiles, positives, prune_against, bounds.tile_side_px)
    return TilingResult(kept, pruned, dropped)


# ---------------------------------------------------------------------------
# tile manifests and pixels


def write_tiles(tiles, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for t in tiles:
            fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")


def read_tiles(path) -> list[TileSpec]:
    with open(path, "r", encoding="utf-8") as fh:
        return [TileSpec.from_dict(json.loads(line)) for line in fh if line.strip()]


class SlideCache:
    """LRU of decoded slide images bounded by total bytes, shared across threads."""

    def __init__(self, max_bytes: int = 1 << 30):
        self.max_bytes = max_bytes
        self._cache: OrderedDict[str, np.ndarray] = OrderedDict()
        self._lock = Lock()

    def get(self, path: str) -> np.ndarray:
        with self._lock:
            if path in self._cache:
                self._cache.move_to_end(path)
                return self._cache[path]
        arr = _load_image(path)
        with self._lock:
            self._cache[path] = arr
            while len(self._cache) > 1 and sum(a.nbytes for a in self._cache.values()) > self.max_bytes:
                self._cache.popitem(last=False)
        return arr


def _load_image(path: str) -> np.ndarray:
    from PIL import Image

    Image.MAX_IMAGE_PIXELS = None
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise TileReadError(f"cannot read {path}: {exc}") from exc
    return arr


_DEFAULT_CACHE = SlideCache()


def read_tile_pixels(spec: TileSpec, slide: SlideInfo, cache: SlideCache | None = None) -> np.ndarray:
    """Exact ``side x side x 3`` uint8 crop (no resampling)."""
    cache = cache or _DEFAULT_CACHE
    try:
        img = cache.get(slide.image_path)
    except TileReadError as exc:
        raise TileReadError(f"slide {spec.slide_id} at origin {spec.tile_origin}: {exc}") from exc
    x, y = spec.tile_origin
    s = spec.tile_side_px
    if x < 0 or y < 0 or x + s > img.shape[1] or y + s > img.shape[0]:
        raise ValueError(
            f"tile {spec.key} at {spec.tile_origin} (side {s}) exceeds slide {spec.slide_id} "
            f"of size {img.shape[1]}x{img.shape[0]}"
        )
    return np.ascontiguousarray(img[y : y + s, x : x + s])


def materialize_crops(tiles, slides: dict[str, SlideInfo], out_dir, cache: SlideCache | None = None) -> int:
    """Write ``<annotation_id>_<replica>.png`` for each tile; returns the count written."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    for t in sorted(tiles, key=lambda t: (t.slide_id, t.annotation_id, t.replica_index)):
        Image.fromarray(read_tile_pixels(t, slides[t.slide_id], cache)).save(out_dir / f"{t.key}.png")
        n += 1
    return n
