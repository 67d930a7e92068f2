import os

import pytest
from hypothesis import HealthCheck, settings

from mitovl.ingest import AnnotationRecord, Box, Label, SlideInfo, canonical, parse_annotations
from mitovl.synth import SyntheticSpec, generate_synthetic_corpus

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# keep torch from fighting pytest for the single core
try:
    import torch

    torch.set_num_threads(1)
except ImportError:  # pragma: no cover
    pass


def slide(sid="s1", w=1000, h=1000, patient=None, path="", **meta):
    return SlideInfo(
        slide_id=sid,
        patient_id=patient or sid,
        width_px=w,
        height_px=h,
        image_path=path,
        tumor_type=meta.get("tumor_type", "breast carcinoma"),
        species=meta.get("species", "human"),
        scanner=meta.get("scanner", "Hamamatsu XR"),
    )


def ann(aid, x, y, label=Label.MITOTIC, sid="s1", side=50):
    return AnnotationRecord(str(aid), sid, Box(x, y, x + side, y + side), Label(label))


def manifest(slides, annotations):
    return canonical(slides, annotations)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Ten patients, one 1000 px slide each, ten ring/dot figures per slide."""
    out = tmp_path_factory.mktemp("corpus")
    generate_synthetic_corpus(SyntheticSpec(n_patients=10, annotations_per_slide=10, seed=7), out)
    return out


@pytest.fixture(scope="session")
def corpus_manifest(corpus_dir):
    res = parse_annotations(corpus_dir / "annotations.json", corpus_dir / "metadata.json")
    assert not res.rejections
    return res.manifest


_CRITERIA_KEY = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, sink, number, title):
        self.sink, self.number, self.title = sink, number, title
        self.details = []

    def note(self, text):
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        if ok:
            detail = "; ".join(self.details)
        else:
            first = str(exc).splitlines()[0] if str(exc) else ""
            detail = f"{exc_type.__name__}: {first}"
        line = f"{'PASS' if ok else 'FAIL'} criterion {self.number}: {self.title} ({detail})"
        self.sink.append(line)
        print(line, flush=True)
        return False


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c:`` records one PASS/FAIL line for the acceptance summary."""
    sink = request.config.stash.setdefault(_CRITERIA_KEY, [])
    return lambda number, title: _Criterion(sink, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
