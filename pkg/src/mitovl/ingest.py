"""Annotation ingest: COCO-like box files plus case metadata -> canonical manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

logger = logging.getLogger(__name__)

MIN_SLIDE_SIDE = 224
BOX_SIDE = 50
CATEGORY_LABELS = {1: "MITOTIC", 2: "HARD_NEGATIVE"}
METADATA_FIELDS = ("tumor_type", "species", "scanner")


class IngestError(Exception):
    """Fatal ingest failure (unreadable or structurally broken input)."""


class Label(str, Enum):
    MITOTIC = "MITOTIC"
    HARD_NEGATIVE = "HARD_NEGATIVE"


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with half-open pixel intervals ``[x_min, x_max) x [y_min, y_max)``."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def intersects(self, other: "Box") -> bool:
        return (
            self.x_min < other.x_max
            and other.x_min < self.x_max
            and self.y_min < other.y_max
            and other.y_min < self.y_max
        )

    def contains(self, other: "Box") -> bool:
        return (
            self.x_min <= other.x_min
            and other.x_max <= self.x_max
            and self.y_min <= other.y_min
            and other.y_max <= self.y_max
        )

    def as_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class SlideInfo:
    slide_id: str
    patient_id: str
    width_px: int
    height_px: int
    image_path: str
    tumor_type: str
    species: str
    scanner: str

    @property
    def metadata(self) -> dict[str, str]:
        return {"tumor_type": self.tumor_type, "species": self.species, "scanner": self.scanner}


@dataclass(frozen=True)
class AnnotationRecord:
    annotation_id: str
    slide_id: str
    box: Box
    label: Label


@dataclass(frozen=True)
class Rejection:
    kind: str  # "slide" | "annotation"
    record_id: str
    reason: str


@dataclass(frozen=True)
class Manifest:
    """Validated slides and annotations, canonically sorted by id."""

    slides: tuple[SlideInfo, ...]
    annotations: tuple[AnnotationRecord, ...]
    provenance: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        slide_ids = [s.slide_id for s in self.slides]
        if len(set(slide_ids)) != len(slide_ids):
            raise ValueError("duplicate slide_id in manifest")
        known = set(slide_ids)
        seen: set[str] = set()
        for a in self.annotations:
            if a.annotation_id in seen:
                raise ValueError(f"duplicate annotation_id {a.annotation_id!r}")
            seen.add(a.annotation_id)
            if a.slide_id not in known:
                raise ValueError(f"annotation {a.annotation_id!r} references unknown slide {a.slide_id!r}")

    def slide_map(self) -> dict[str, SlideInfo]:
        return {s.slide_id: s for s in self.slides}

    def patients(self) -> list[str]:
        return sorted({s.patient_id for s in self.slides})

    def subset(self, patient_ids) -> "Manifest":
        keep = set(patient_ids)
        slides = tuple(s for s in self.slides if s.patient_id in keep)
        ids = {s.slide_id for s in slides}
        anns = tuple(a for a in self.annotations if a.slide_id in ids)
        return Manifest(slides, anns, dict(self.provenance))


@dataclass
class IngestResult:
    manifest: Manifest
    rejections: list[Rejection]
    input_annotations: int

    @property
    def accepted(self) -> int:
        return len(self.manifest.annotations)

    @property
    def rejected_annotations(self) -> int:
        return sum(1 for r in self.rejections if r.kind == "annotation")


def _sort_key(ident: str):
    # numeric ids sort numerically, everything else lexically after them
    return (0, int(ident), "") if ident.isdigit() else (1, 0, ident)


def canonical(slides, annotations, provenance=None) -> Manifest:
    slides = tuple(sorted(slides, key=lambda s: _sort_key(s.slide_id)))
    annotations = tuple(sorted(annotations, key=lambda a: _sort_key(a.annotation_id)))
    return Manifest(slides, annotations, provenance or {})


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_json(path: Path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc


def load_metadata(path) -> dict[str, dict[str, str]]:
    """Read case metadata keyed by image id (as string).

    Accepts a JSON object ``{image_id: {...}}``, a JSON list of records with an
    ``image_id`` field, or a CSV/TSV with an ``image_id`` column.
    """
    path = Path(path)
    if path.suffix.lower() in {".csv", ".tsv"}:
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh, delimiter="\t" if path.suffix.lower() == ".tsv" else ","))
        except OSError as exc:
            raise IngestError(f"cannot read {path}: {exc}") from exc
    else:
        data = _load_json(path)
        if isinstance(data, dict):
            return {str(k): {kk: str(vv) for kk, vv in v.items()} for k, v in data.items()}
        rows = data
    out = {}
    for row in rows:
        if "image_id" not in row:
            raise IngestError(f"metadata row without image_id in {path}: {row}")
        out[str(row["image_id"])] = {k: str(v) for k, v in row.items() if k != "image_id" and v is not None}
    return out


def parse_annotations(source, metadata_source, images_dir=None) -> IngestResult:
    """Parse a COCO-like annotation document and its case metadata.

    Boxes are ``[x_min, y_min, x_max, y_max]``; category 1 is mitotic, 2 is a
    hard negative. Bad records land in ``rejections`` instead of raising.
    """
    source = Path(source)
    metadata_source = Path(metadata_source)
    doc = _load_json(source)
    if not isinstance(doc, dict) or "images" not in doc or "annotations" not in doc:
        raise IngestError(f"{source} is not a COCO-like document (needs 'images' and 'annotations')")
    meta = load_metadata(metadata_source)
    images_dir = Path(images_dir) if images_dir is not None else source.parent

    rejections: list[Rejection] = []
    slides: dict[str, SlideInfo] = {}
    for img in doc["images"]:
        sid = str(img.get("id"))
        try:
            width, height = int(img["width"]), int(img["height"])
            file_name = str(img["file_name"])
        except (KeyError, TypeError, ValueError) as exc:
            rejections.append(Rejection("slide", sid, f"malformed image record: {exc!r}"))
            continue
        if width < MIN_SLIDE_SIDE or height < MIN_SLIDE_SIDE:
            rejections.append(
                Rejection("slide", sid, f"slide is {width}x{height}, smaller than {MIN_SLIDE_SIDE}x{MIN_SLIDE_SIDE}")
            )
            continue
        m = dict(img)
        m.update(meta.get(sid, {}))
        missing = [f for f in METADATA_FIELDS if not str(m.get(f, "")).strip()]
        if missing:
            rejections.append(Rejection("slide", sid, f"missing metadata: {', '.join(missing)}"))
            continue
        patient = str(m.get("patient_id") or "").strip() or sid
        slides[sid] = SlideInfo(
            slide_id=sid,
            patient_id=patient,
            width_px=width,
            height_px=height,
            image_path=str(images_dir / file_name),
            tumor_type=str(m["tumor_type"]).strip(),
            species=str(m["species"]).strip(),
            scanner=str(m["scanner"]).strip(),
        )

    annotations: list[AnnotationRecord] = []
    seen: set[str] = set()
    rejected_slides = {r.record_id for r in rejections if r.kind == "slide"}
    for idx, ann in enumerate(doc["annotations"]):
        aid = str(ann.get("id", f"#{idx}"))
        sid = str(ann.get("image_id"))
        if aid in seen:
            rejections.append(Rejection("annotation", aid, "duplicate annotation id"))
            continue
        if sid not in slides:
            why = "slide was rejected" if sid in rejected_slides else "unknown image"
            rejections.append(Rejection("annotation", aid, f"references {why} {sid}"))
            continue
        label = CATEGORY_LABELS.get(ann.get("category_id"))
        if label is None:
            rejections.append(Rejection("annotation", aid, f"unknown category_id {ann.get('category_id')!r}"))
            continue
        try:
            x0, y0, x1, y1 = (int(round(float(v))) for v in ann["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            rejections.append(Rejection("annotation", aid, f"malformed bbox: {exc!r}"))
            continue
        box = Box(x0, y0, x1, y1)
        if box.width != BOX_SIDE or box.height != BOX_SIDE:
            rejections.append(
                Rejection(
                    "annotation",
                    aid,
                    f"box is {box.width}×{box.height}, expected {BOX_SIDE}×{BOX_SIDE} at {box.as_list()}",
                )
            )
            continue
        slide = slides[sid]
        if x0 < 0 or y0 < 0 or x1 > slide.width_px or y1 > slide.height_px:
            rejections.append(
                Rejection(
                    "annotation",
                    aid,
                    f"box {box.as_list()} outside slide {slide.width_px}x{slide.height_px}",
                )
            )
            continue
        seen.add(aid)
        annotations.append(AnnotationRecord(aid, sid, box, Label(label)))

    provenance = {
        "sources": {
            str(source): _file_digest(source),
            str(metadata_source): _file_digest(metadata_source),
        },
        "parsed_at": datetime.now(timezone.utc).isoformat(),
    }
    manifest = canonical(slides.values(), annotations, provenance)
    result = IngestResult(manifest, rejections, input_annotations=len(doc["annotations"]))
    counts = Counter(a.label.value for a in manifest.annotations)
    logger.info(
        "ingested %d slides, %d MITOTIC, %d HARD_NEGATIVE, %d rejections",
        len(manifest.slides),
        counts.get("MITOTIC", 0),
        counts.get("HARD_NEGATIVE", 0),
        len(rejections),
    )
    return result


def manifest_stats(m: Manifest) -> dict:
    slides = m.slide_map()
    by_label = {lab.value: 0 for lab in Label}
    by_patient: Counter = Counter()
    by_stratum: Counter = Counter()
    for a in m.annotations:
        s = slides[a.slide_id]
        by_label[a.label.value] += 1
        by_patient[s.patient_id] += 1
        by_stratum[" | ".join((s.tumor_type, s.species, s.scanner))] += 1
    return {
        "label": by_label,
        "patient": dict(sorted(by_patient.items())),
        "stratum": dict(sorted(by_stratum.items())),
        "n_slides": len(m.slides),
        "n_patients": len({s.patient_id for s in m.slides}),
        "n_annotations": len(m.annotations),
    }


# ---------------------------------------------------------------------------
# canonical newline-delimited manifest


def _slide_record(s: SlideInfo) -> dict:
    return {"kind": "slide", **asdict(s)}


def _annotation_record(a: AnnotationRecord) -> dict:
    return {
        "kind": "annotation",
        "annotation_id": a.annotation_id,
        "slide_id": a.slide_id,
        "box": a.box.as_list(),
        "label": a.label.value,
    }


def dumps_manifest(m: Manifest) -> str:
    lines = [json.dumps(_slide_record(s), sort_keys=True) for s in m.slides]
    lines += [json.dumps(_annotation_record(a), sort_keys=True) for a in m.annotations]
    return "".join(line + "\n" for line in lines)


def loads_manifest(text: str, provenance=None) -> Manifest:
    slides, anns = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.pop("kind", None)
        if kind == "slide":
            slides.append(SlideInfo(**rec))
        elif kind == "annotation":
            anns.append(
                AnnotationRecord(rec["annotation_id"], rec["slide_id"], Box(*rec["box"]), Label(rec["label"]))
            )
        else:
            raise IngestError(f"line {lineno}: unknown record kind {kind!r}")
    return canonical(slides, anns, provenance)


def write_manifest(m: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_manifest(m), encoding="utf-8")


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read manifest {path}: {exc}") from exc
    return loads_manifest(text)


def write_ingest_outputs(result: IngestResult, out_dir) -> dict[str, Path]:
    """Write ``manifest.jsonl``, ``rejections.jsonl``, ``stats.json`` and ``provenance.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "manifest": out_dir / "manifest.jsonl",
        "rejections": out_dir / "rejections.jsonl",
        "stats": out_dir / "stats.json",
        "provenance": out_dir / "provenance.json",
    }
    write_manifest(result.manifest, paths["manifest"])
    paths["rejections"].write_text(
        "".join(json.dumps(asdict(r), sort_keys=True, ensure_ascii=False) + "\n" for r in result.rejections),
        encoding="utf-8",
    )
    stats = manifest_stats(result.manifest)
    stats["input_annotations"] = result.input_annotations
    stats["rejected_annotations"] = result.rejected_annotations
    stats["rejected_slides"] = sum(1 for r in result.rejections if r.kind == "slide")
    paths["stats"].write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["provenance"].write_text(json.dumps(result.manifest.provenance, indent=2, sort_keys=True) + "\n")
    return paths
