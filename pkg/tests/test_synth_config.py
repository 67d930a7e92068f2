import json

import numpy as np
import pytest
from PIL import Image

from mitovl.config import ConfigError, ExperimentConfig, FamilyRun, canonical_json, load_config, loads_config
from mitovl.ingest import Label, parse_annotations
from mitovl.synth import MARGIN, MIN_SPACING, SCANNERS, SPECIES, TUMOR_TYPES, SynthError, SyntheticSpec
from mitovl.synth import generate_synthetic_corpus
from mitovl.tilegeom import ShiftBounds


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_corpus_is_byte_identical(tmp_path):
    spec = SyntheticSpec(n_patients=3, annotations_per_slide=4, seed=11)
    a = _files(generate_synthetic_corpus(spec, tmp_path / "a"))
    b = _files(generate_synthetic_corpus(spec, tmp_path / "b"))
    assert a == b
    c = _files(generate_synthetic_corpus(SyntheticSpec(n_patients=3, annotations_per_slide=4, seed=12),
                                         tmp_path / "c"))
    assert c["annotations.json"] != a["annotations.json"] or c["images/slide_0001.png"] != a["images/slide_0001.png"]


def test_capacity():
    assert SyntheticSpec().capacity == 16
    assert SyntheticSpec(annotations_per_slide=16).capacity == 16
    with pytest.raises(SynthError, match="cannot fit"):
        SyntheticSpec(annotations_per_slide=17)
    for bad in (dict(n_patients=0), dict(separability=1.5), dict(positive_fraction=-0.1), dict(renderer="x")):
        with pytest.raises(SynthError):
            SyntheticSpec(**bad)


def test_figures_are_spaced_and_inside(corpus_dir, corpus_manifest):
    by_slide = {}
    for a in corpus_manifest.annotations:
        centre = ((a.box.x_min + a.box.x_max) // 2, (a.box.y_min + a.box.y_max) // 2)
        by_slide.setdefault(a.slide_id, []).append(centre)
    for sid, centres in by_slide.items():
        s = corpus_manifest.slide_map()[sid]
        c = np.array(centres)
        assert c.min() >= MARGIN and c.max() <= s.width_px - MARGIN
        d = np.abs(c[:, None, :] - c[None, :, :]).max(axis=2)
        assert d[~np.eye(len(c), dtype=bool)].min() >= MIN_SPACING
    # no shifted tile can then reach a neighbouring box
    b = ShiftBounds()
    assert MIN_SPACING >= b.tile_side_px // 2 + b.max_shift_px + b.box_side_px // 2


def test_metadata_and_class_balance(corpus_dir, corpus_manifest):
    meta = json.loads((corpus_dir / "metadata.json").read_text())
    for m in meta.values():
        assert m["tumor_type"] in TUMOR_TYPES and m["species"] in SPECIES and m["scanner"] in SCANNERS
    labels = [a.label for a in corpus_manifest.annotations]
    assert labels.count(Label.MITOTIC) == labels.count(Label.HARD_NEGATIVE) == 50
    assert len(corpus_manifest.patients()) == 10


def _centre_darkness(root, separability, n=160):
    spec = SyntheticSpec(n_patients=n // 16, annotations_per_slide=16, separability=separability, seed=3)
    generate_synthetic_corpus(spec, root)
    res = parse_annotations(root / "annotations.json", root / "metadata.json")
    out = {Label.MITOTIC: [], Label.HARD_NEGATIVE: []}
    images = {}
    for s in res.manifest.slides:
        images[s.slide_id] = np.asarray(Image.open(s.image_path).convert("L"))
    for a in res.manifest.annotations:
        cx, cy = (a.box.x_min + a.box.x_max) // 2, (a.box.y_min + a.box.y_max) // 2
        # dots fill their centre, rings leave it at background brightness
        out[a.label].append(images[a.slide_id][cy - 2 : cy + 3, cx - 2 : cx + 3].mean() < 150)
    return {k: float(np.mean(v)) for k, v in out.items()}


def test_separability_controls_motif(tmp_path):
    full = _centre_darkness(tmp_path / "full", 1.0)
    assert full[Label.MITOTIC] == 0.0 and full[Label.HARD_NEGATIVE] == 1.0
    none = _centre_darkness(tmp_path / "none", 0.0)
    assert abs(none[Label.MITOTIC] - none[Label.HARD_NEGATIVE]) < 0.25


CONFIG = """
out_dir: run
synthetic: {n_patients: 6, annotations_per_slide: 4, seed: 1}
seeds: [0, 1]
families:
  - tiny-cnn
  - family: tiny-vqa
    overrides: {max_epochs: 1}
prompts: {mode: BLIP_VQA}
"""


def test_config_round_trip():
    cfg = loads_config(CONFIG)
    assert cfg.seeds == (0, 1) and cfg.families[1] == FamilyRun("tiny-vqa", {"max_epochs": 1})
    assert cfg.synthetic == SyntheticSpec(n_patients=6, annotations_per_slide=4, seed=1)
    again = loads_config(cfg.dumps())
    assert again == cfg
    assert again.dumps() == cfg.dumps()
    assert canonical_json(again.digest_dict()) == canonical_json(cfg.digest_dict())
    assert "out_dir" not in cfg.digest_dict()


def test_defaults():
    cfg = loads_config("synthetic: {}")
    assert cfg.seeds == (0, 1, 2, 3, 4)
    assert (cfg.train_replicas, cfg.eval_replicas) == (10, 1)
    assert cfg.shift == ShiftBounds()


@pytest.mark.parametrize(
    "text",
    [
        "synthetic: {}\nbogus: 1",
        "{}",
        "dataset: {annotations: a.json}",
        "synthetic: {}\nseeds: [1, 1]",
        "synthetic: {}\nseeds: []",
        "synthetic: {}\nprune_against: pixels",
        "synthetic: {}\nreplicas: {train: 0}",
        "synthetic: {}\nshift: {wobble: 3}",
        "- a\n- b",
        "synthetic: {\n",
    ],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        loads_config(text)


def test_family_run_validation():
    with pytest.raises(ConfigError, match="unknown"):
        FamilyRun("tiny-cnn", {"learning_rat": 1.0})
    with pytest.raises(ConfigError, match="zero-shot"):
        FamilyRun("stub-vqa-zero-shot", {"max_epochs": 2})
    with pytest.raises(KeyError):
        FamilyRun("nope")
    cfg = FamilyRun("tiny-cnn", {"learning_rate": 0.1}).train_config(seed=4)
    assert cfg.learning_rate == 0.1 and cfg.seed == 4
    assert cfg.provenance["overridden"] == ["learning_rate"]
    assert FamilyRun("stub-vqa-zero-shot").train_config(0) is None


def test_load_config_resolves_relative_paths(tmp_path):
    (tmp_path / "sub").mkdir()
    path = tmp_path / "sub" / "exp.yaml"
    path.write_text("dataset: {annotations: data/a.json, metadata: /abs/m.json}\n")
    cfg = load_config(path)
    assert cfg.annotations == str(tmp_path / "sub" / "data" / "a.json")
    assert cfg.metadata == "/abs/m.json"
    assert isinstance(cfg, ExperimentConfig)
