import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mitovl.ingest import (
    Box,
    IngestError,
    Label,
    Manifest,
    dumps_manifest,
    loads_manifest,
    manifest_stats,
    parse_annotations,
    read_manifest,
    write_ingest_outputs,
)


def _write(tmp_path, images, annotations, metadata, meta_name="metadata.json"):
    (tmp_path / "ann.json").write_text(json.dumps({"images": images, "annotations": annotations}))
    meta_path = tmp_path / meta_name
    if meta_name.endswith(".csv"):
        meta_path.write_text(metadata)
    else:
        meta_path.write_text(json.dumps(metadata))
    return tmp_path / "ann.json", meta_path


IMAGES = [
    {"id": 1, "file_name": "a.tiff", "width": 1000, "height": 800},
    {"id": 2, "file_name": "b.tiff", "width": 600, "height": 600},
]
META = {
    "1": {"tumor_type": "breast carcinoma", "species": "human", "scanner": "Hamamatsu XR", "patient_id": "p1"},
    "2": {"tumor_type": "canine lymphoma", "species": "canine", "scanner": "Hamamatsu S360"},
}


def _box(i, img, x, y, cat=1, w=50, h=50):
    return {"id": i, "image_id": img, "category_id": cat, "bbox": [x, y, x + w, y + h]}


def test_valid_document(tmp_path):
    anns = [_box(1, 1, 10, 10), _box(2, 1, 300, 300), _box(3, 2, 0, 0), _box(4, 2, 550, 550, cat=2)]
    res = parse_annotations(*_write(tmp_path, IMAGES, anns, META))
    m = res.manifest
    assert len(m.slides) == 2 and len(m.annotations) == 4 and res.rejections == []
    assert manifest_stats(m)["label"] == {"MITOTIC": 3, "HARD_NEGATIVE": 1}
    assert m.slide_map()["2"].patient_id == "2"  # falls back to slide id
    assert m.slide_map()["1"].patient_id == "p1"
    assert m.slide_map()["1"].image_path == str(tmp_path / "a.tiff")


def test_wrong_box_size_rejected_with_coordinates(tmp_path):
    res = parse_annotations(*_write(tmp_path, IMAGES, [_box(1, 1, 0, 0, w=40)], META))
    assert res.accepted == 0
    (rej,) = res.rejections
    assert "box is 40×50, expected 50×50" in rej.reason
    assert "[0, 0, 40, 50]" in rej.reason


def test_record_level_rejections(tmp_path):
    anns = [
        _box(1, 9, 0, 0),  # unknown image
        _box(2, 1, 980, 10),  # spills past width 1000
        _box(3, 1, 10, 10, cat=5),
        _box(4, 1, 10, 10),
        _box(4, 1, 100, 100),  # duplicate id
        {"id": 6, "image_id": 1, "category_id": 1},
    ]
    res = parse_annotations(*_write(tmp_path, IMAGES, anns, META))
    assert res.accepted == 1
    reasons = {r.record_id: r.reason for r in res.rejections}
    assert "unknown image" in reasons["1"]
    assert "outside slide" in reasons["2"]
    assert "category" in reasons["3"]
    assert "duplicate" in reasons["4"]
    assert "bbox" in reasons["6"]
    assert res.accepted + res.rejected_annotations == res.input_annotations


def test_small_slide_and_missing_metadata_rejected(tmp_path):
    images = IMAGES + [{"id": 3, "file_name": "c", "width": 200, "height": 900}]
    meta = {"1": dict(META["1"], scanner=" "), "2": META["2"], "3": META["2"]}
    res = parse_annotations(*_write(tmp_path, images, [_box(1, 1, 0, 0), _box(2, 3, 0, 0)], meta))
    kinds = {(r.kind, r.record_id) for r in res.rejections}
    assert ("slide", "1") in kinds and ("slide", "3") in kinds
    assert [s.slide_id for s in res.manifest.slides] == ["2"]
    assert res.accepted == 0 and res.rejected_annotations == 2


def test_csv_metadata(tmp_path):
    csv_text = "image_id,tumor_type,species,scanner,patient_id\n1,melanoma,canine,X,pa\n2,melanoma,canine,X,pa\n"
    res = parse_annotations(*_write(tmp_path, IMAGES, [_box(1, 1, 0, 0)], csv_text, "meta.csv"))
    assert res.manifest.patients() == ["pa"]


def test_unreadable_file_is_fatal(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    (tmp_path / "m.json").write_text("{}")
    with pytest.raises(IngestError):
        parse_annotations(tmp_path / "bad.json", tmp_path / "m.json")
    with pytest.raises(IngestError):
        parse_annotations(tmp_path / "missing.json", tmp_path / "m.json")


def test_empty_manifest_stats():
    s = manifest_stats(Manifest((), ()))
    assert s["label"] == {"MITOTIC": 0, "HARD_NEGATIVE": 0}
    assert s["n_annotations"] == s["n_slides"] == s["n_patients"] == 0


def test_manifest_rejects_dangling_and_duplicates():
    from conftest import ann, slide

    with pytest.raises(ValueError):
        Manifest((slide("a"),), (ann(1, 0, 0, sid="b"),))
    with pytest.raises(ValueError):
        Manifest((slide("a"),), (ann(1, 0, 0, sid="a"), ann(1, 60, 0, sid="a")))


def test_write_outputs(tmp_path, corpus_dir):
    res = parse_annotations(corpus_dir / "annotations.json", corpus_dir / "metadata.json")
    paths = write_ingest_outputs(res, tmp_path / "out")
    assert read_manifest(paths["manifest"]) == res.manifest
    stats = json.loads(paths["stats"].read_text())
    assert stats["n_annotations"] == 100 and stats["n_patients"] == 10


def test_parse_is_deterministic(corpus_dir):
    a = parse_annotations(corpus_dir / "annotations.json", corpus_dir / "metadata.json").manifest
    b = parse_annotations(corpus_dir / "annotations.json", corpus_dir / "metadata.json").manifest
    assert dumps_manifest(a) == dumps_manifest(b)


ids = st.integers(0, 10_000).map(str) | st.text("abcxyz-_", min_size=1, max_size=6)


@given(st.lists(st.tuples(ids, st.integers(0, 950), st.integers(0, 950), st.booleans()), max_size=30,
                unique_by=lambda t: t[0]))
def test_manifest_round_trip_fixed_point(rows):
    from conftest import ann, manifest, slide

    anns = [ann(a, x, y, Label.MITOTIC if pos else Label.HARD_NEGATIVE) for a, x, y, pos in rows]
    m = manifest([slide("s1")], anns)
    text = dumps_manifest(m)
    again = loads_manifest(text)
    assert again == m
    assert dumps_manifest(again) == text


def test_half_open_box_semantics():
    a = Box(0, 0, 50, 50)
    assert not a.intersects(Box(50, 0, 100, 50))
    assert a.intersects(Box(49, 49, 99, 99))
    assert Box(0, 0, 224, 224).contains(Box(174, 174, 224, 224))
