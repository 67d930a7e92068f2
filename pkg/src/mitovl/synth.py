"""Procedural H&E-like corpora for running the whole pipeline without MIDOG22.

Mitotic figures are drawn as dark rings and hard negatives as solid dots.
``separability`` controls how often each class gets its own motif: at 1 the
motif gives the label away, at 0 both classes draw from the same mixture.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from mitovl.ingest import BOX_SIDE
from mitovl.tilegeom import ShiftBounds

TUMOR_TYPES = (
    "human breast carcinoma",
    "canine lung cancer",
    "canine lymphoma",
    "canine cutaneous mast cell tumor",
    "human neuroendocrine tumor",
    "human melanoma",
)
SPECIES = ("human", "canine", "feline")
SCANNERS = ("Hamamatsu XR", "Hamamatsu S360", "Aperio ScanScope CS2", "3DHistech Pannoramic Scan II")

# keeps every shifted tile clear of any other figure's box
_BOUNDS = ShiftBounds()
MIN_SPACING = _BOUNDS.tile_side_px // 2 + _BOUNDS.max_shift_px + BOX_SIDE // 2
MARGIN = _BOUNDS.tile_side_px // 2


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_patients: int = 10
    annotations_per_slide: int = 10
    slide_size: int = 1000
    separability: float = 1.0
    seed: int = 0
    slides_per_patient: int = 1
    positive_fraction: float = 0.5
    renderer: str = "ring-dot"

    def __post_init__(self):
        if self.n_patients < 1 or self.slides_per_patient < 1 or self.annotations_per_slide < 1:
            raise SynthError("patients, slides per patient and annotations per slide must be >= 1")
        if not 0.0 <= self.separability <= 1.0:
            raise SynthError("separability must be in [0, 1]")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise SynthError("positive_fraction must be in [0, 1]")
        if self.renderer != "ring-dot":
            raise SynthError(f"unknown renderer {self.renderer!r}")
        if self.annotations_per_slide > self.capacity:
            raise SynthError(
                f"{self.annotations_per_slide} annotations cannot fit in a {self.slide_size}px slide "
                f"(at most {self.capacity} at {MIN_SPACING}px spacing)"
            )

    @property
    def grid(self) -> np.ndarray:
        """Candidate figure centres along one axis."""
        span = self.slide_size - 2 * MARGIN
        if span < 0:
            return np.zeros(0, dtype=np.int64)
        n = span // MIN_SPACING + 1
        if n == 1:
            return np.array([self.slide_size // 2])
        return MARGIN + np.round(np.linspace(0, span, n)).astype(np.int64)

    @property
    def capacity(self) -> int:
        return len(self.grid) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    # pink eosin-like base with low-frequency mottling
    coarse = rng.normal(0.0, 1.0, (size // 32 + 2, size // 32 + 2))
    mott = np.kron(coarse, np.ones((32, 32)))[:size, :size]
    fine = rng.normal(0.0, 1.0, (size, size))
    base = np.array([232.0, 182.0, 210.0])
    img = base[None, None, :] + 6.0 * mott[..., None] + 4.0 * fine[..., None]
    return img


def _draw_figure(img: np.ndarray, cx: int, cy: int, ring: bool, rng: np.random.Generator) -> None:
    r_out = rng.uniform(11.0, 15.0)
    yy, xx = np.mgrid[-20:21, -20:21]
    d = np.hypot(xx, yy)
    if ring:
        mask = (d <= r_out) & (d >= r_out - rng.uniform(3.5, 5.0))
    else:
        mask = d <= r_out * 0.75
    colour = np.array([70.0, 40.0, 120.0]) + rng.normal(0.0, 8.0, 3)
    patch = img[cy - 20 : cy + 21, cx - 20 : cx + 21]
    patch[mask] = 0.25 * patch[mask] + 0.75 * colour


def render_slide(spec: SyntheticSpec, rng: np.random.Generator, centres, motifs) -> np.ndarray:
    img = _background(rng, spec.slide_size)
    for (cx, cy), ring in zip(centres, motifs):
        _draw_figure(img, int(cx), int(cy), bool(ring), rng)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir) -> Path:
    """Write ``images/*.png``, ``annotations.json`` and ``metadata.json`` under ``out_dir``.

    Output bytes depend only on ``spec``.
    """
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    grid = spec.grid
    slots = np.array([(x, y) for y in grid for x in grid])
    n_pos = int(round(spec.positive_fraction * spec.annotations_per_slide))
    p_ring = {True: (1 + spec.separability) / 2, False: (1 - spec.separability) / 2}

    images, annotations, metadata = [], [], {}
    ann_id = 1
    slide_no = 0
    for p in range(spec.n_patients):
        patient = f"P{p:03d}"
        for _ in range(spec.slides_per_patient):
            slide_no += 1
            sid = slide_no
            chosen = slots[np.sort(rng.choice(len(slots), spec.annotations_per_slide, replace=False))]
            positive = np.zeros(spec.annotations_per_slide, dtype=bool)
            positive[rng.permutation(spec.annotations_per_slide)[:n_pos]] = True
            motifs = np.array([rng.random() < p_ring[bool(x)] for x in positive])
            pixels = render_slide(spec, rng, chosen, motifs)
            name = f"slide_{sid:04d}.png"
            Image.fromarray(pixels).save(out / "images" / name, compress_level=1)
            images.append({"id": sid, "file_name": f"images/{name}", "width": spec.slide_size,
                           "height": spec.slide_size})
            metadata[str(sid)] = {
                "patient_id": patient,
                "tumor_type": TUMOR_TYPES[int(rng.integers(len(TUMOR_TYPES)))],
                "species": SPECIES[int(rng.integers(len(SPECIES)))],
                "scanner": SCANNERS[int(rng.integers(len(SCANNERS)))],
            }
            half = BOX_SIDE // 2
            for (cx, cy), pos in zip(chosen, positive):
                annotations.append({
                    "id": ann_id,
                    "image_id": sid,
                    "category_id": 1 if pos else 2,
                    "bbox": [int(cx) - half, int(cy) - half, int(cx) + half, int(cy) + half],
                })
                ann_id += 1

    doc = {
        "info": {"description": "synthetic ring/dot corpus", "spec": spec.to_dict()},
        "categories": [{"id": 1, "name": "mitotic figure"}, {"id": 2, "name": "hard negative"}],
        "images": images,
        "annotations": annotations,
    }
    (out / "annotations.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    (out / "metadata.json").write_text(json.dumps(metadata, indent=1, sort_keys=True) + "\n")
    return out
