import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from mitovl.ingest import Label
from mitovl.models.adapters import (
    Adapter,
    AdapterError,
    decide,
    device_from_env,
    positive_scores,
    zero_shot_classify,
)
from mitovl.models.config import AdapterKind, Objective, Optimizer, Schedule, TrainConfig, get_family, lr_at
from mitovl.models.data import TileSource, batch_order, prefetch
from mitovl.models.factory import BuildError, build_adapter, build_pretext
from mitovl.models.tiny import StubVQAAdapter, TinyCNNClassifier, TinyGenerativeAdapter, dark_fraction_logodds
from mitovl.models.train import (
    TrainingDiverged,
    TrainingError,
    TransferError,
    finetune,
    load_checkpoint,
    predict,
    read_events,
    save_checkpoint,
    train_simsiam,
    train_stain_pretext,
    transfer_pretext_weights,
)
from mitovl.eval import auc, f1_score
from mitovl.prompts import PromptMode, candidate_bundles
from mitovl.splits import make_split, materialize_split

META = {"species": "human", "tumor_type": "breast carcinoma", "scanner": "Hamamatsu XR"}


class FakeScorer(Adapter):
    kind = AdapterKind.IMAGE_TEXT_SCORER
    trainable = False

    def __init__(self, sims):
        super().__init__(None, "cpu")
        self.sims = sims
        self.calls = []

    def similarities(self, pixels, texts):
        self.calls.append(list(texts))
        return np.array([[self.sims[t] for t in texts]] * len(pixels))


@pytest.fixture(scope="module")
def split(corpus_manifest):
    plan = make_split(corpus_manifest.patients(), 0)
    return materialize_split(corpus_manifest, plan, train_replicas=4)


@pytest.fixture(scope="module")
def source(corpus_manifest):
    return TileSource(corpus_manifest.slide_map())


def quick(family="tiny-cnn", **kw):
    base = dict(max_epochs=2, max_steps_per_epoch=4)
    base.update(kw)
    return get_family(family).train.with_overrides(**base)


def test_zero_shot_example():
    scorer = FakeScorer({"mitotic": 2.0, "nonmitotic": 0.0})
    pair = candidate_bundles(PromptMode.CLIP_LABEL, META)
    label, score = zero_shot_classify(scorer, np.zeros((224, 224, 3), np.uint8), pair)
    assert label is Label.MITOTIC
    assert score == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-12)
    assert score == pytest.approx(0.8808, abs=1e-4)
    assert scorer.calls == [["nonmitotic", "mitotic"]]


def test_zero_shot_tie_and_symmetry():
    pair = candidate_bundles(PromptMode.CLIP_LABEL, META)
    tile = np.zeros((224, 224, 3), np.uint8)
    assert zero_shot_classify(FakeScorer({"mitotic": 0.3, "nonmitotic": 0.3}), tile, pair) == (
        Label.HARD_NEGATIVE, 0.5)
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.normal(scale=20, size=2)
        _, s = zero_shot_classify(FakeScorer({"mitotic": a, "nonmitotic": b}), tile, pair)
        _, t = zero_shot_classify(FakeScorer({"mitotic": b, "nonmitotic": a}), tile, pair)
        assert 0.0 <= s <= 1.0
        assert s + t == pytest.approx(1.0, abs=1e-12)
    assert decide(0.5) is Label.HARD_NEGATIVE and decide(0.5000001) is Label.MITOTIC


def test_zero_shot_mode_mismatch():
    vqa_pair = candidate_bundles(PromptMode.BLIP_VQA, META)
    with pytest.raises(AdapterError):
        zero_shot_classify(FakeScorer({"yes": 1.0, "no": 0.0}), np.zeros((224, 224, 3), np.uint8), vqa_pair)
    with pytest.raises(AdapterError):
        positive_scores(StubVQAAdapter(), np.zeros((1, 8, 8, 3), np.uint8),
                        [candidate_bundles(PromptMode.CLIP_LABEL, META)])


def test_stub_vqa_is_chance(split, source):
    preds = predict(StubVQAAdapter(), split.test, source, PromptMode.BLIP_VQA)
    assert np.all(preds.scores == 0.5)
    assert auc(preds) == 0.5
    assert not preds.pred_labels.any()


def test_dark_heuristic_beats_chance(split, source):
    preds = predict(StubVQAAdapter(dark_fraction_logodds), split.test, source, PromptMode.BLIP_VQA)
    assert auc(preds) > 0.5


def test_lr_schedule():
    peak = 1e-3
    lrs = [lr_at(s, 100, peak, 10, Schedule.COSINE_WITH_WARMUP) for s in range(101)]
    assert lrs[0] == 0.0 and lrs[10] == pytest.approx(peak)
    assert lrs[100] <= 1e-3 * peak
    assert all(a <= b for a, b in zip(lrs[:10], lrs[1:11]))
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert all(lr_at(s, 100, peak, 10, Schedule.CONSTANT) == peak for s in range(101))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig("x", 0, 1e-3, Optimizer.ADAM)
    with pytest.raises(ValueError):
        TrainConfig("x", 8, -1.0, Optimizer.ADAM)
    cfg = TrainConfig("x", 8, 1e-3, "SGD_MOMENTUM")
    assert cfg.optimizer is Optimizer.SGD_MOMENTUM
    assert cfg.with_overrides(seed=3).seed == 3


@pytest.mark.parametrize(
    "family,bs,lr,opt",
    [
        ("resnet50-random", 32, 1e-4, Optimizer.ADAM),
        ("simsiam-pretext", 128, 0.005, Optimizer.SGD_MOMENTUM),
        ("clip-finetune", 512, 1e-4, Optimizer.ADAMW),
        ("blip-vqa", 32, 1e-5, Optimizer.ADAMW),
        ("blip-complete-caption", 32, 1e-5, Optimizer.ADAMW),
    ],
)
def test_family_hyperparameters(family, bs, lr, opt):
    cfg = get_family(family).train
    assert (cfg.batch_size, cfg.learning_rate, cfg.optimizer) == (bs, lr, opt)
    with pytest.raises(KeyError):
        get_family("no-such-family")


def test_zero_lr_leaves_parameters_unchanged(split, source):
    torch.manual_seed(0)
    adapter = TinyCNNClassifier(device="cpu")
    # every epoch sees the full training set, so only summation order differs
    cfg = quick(learning_rate=0.0, max_epochs=3, max_steps_per_epoch=None, batch_size=64)
    res = finetune(adapter, split, cfg, Objective.CROSS_ENTROPY, source)
    for k, v in res.initial_state.items():
        assert torch.equal(v, adapter.state_dict()[k])
    epoch_losses = [e["loss"] for e in res.events if e["event"] == "epoch"]
    assert len(epoch_losses) == 3
    assert max(epoch_losses) - min(epoch_losses) < 1e-6


def _run(split, source, seed=0, **kw):
    adapter = build_adapter(get_family("tiny-cnn"), device="cpu", seed=seed)
    return finetune(adapter, split, quick(seed=seed, **kw), Objective.CROSS_ENTROPY, source)


def test_finetune_is_deterministic(split, source):
    a, b = _run(split, source), _run(split, source)
    assert a.events == b.events
    for k, v in a.adapter.state_dict().items():
        assert torch.equal(v, b.adapter.state_dict()[k])


def test_event_stream_and_selection(split, source):
    seen = []
    adapter = build_adapter(get_family("tiny-cnn"), device="cpu")
    res = finetune(adapter, split, quick(max_epochs=3), Objective.CROSS_ENTROPY, source, on_event=seen.append)
    assert seen == res.events
    steps = [e for e in res.events if e["event"] == "step"]
    epochs = [e for e in res.events if e["event"] == "epoch"]
    assert len(steps) == 12 and [s["step"] for s in steps] == list(range(12))
    assert all(math.isfinite(s["loss"]) and s["lr"] > 0 for s in steps)
    f1s = [e["val_f1"] for e in epochs]
    assert res.best_val_f1 == max(f1s)
    assert res.best_epoch == f1s.index(max(f1s))
    assert res.events[-1] == {"event": "selected", "epoch": res.best_epoch, "val_f1": res.best_val_f1}
    # the restored weights reproduce the selected epoch's validation score
    assert f1_score(predict(res.adapter, split.val, source)) == pytest.approx(res.best_val_f1)


def test_separable_data_is_learned(split, source):
    adapter = build_adapter(get_family("tiny-cnn"), device="cpu")
    res = finetune(adapter, split, get_family("tiny-cnn").train, Objective.CROSS_ENTROPY, source)
    assert res.best_val_f1 >= 0.95
    test = predict(res.adapter, split.test, source)
    assert f1_score(test) >= 0.9 and auc(test) >= 0.95


class _Empty:
    def __init__(self, train, val):
        self.train, self.val = train, val


def test_finetune_rejects_bad_setups(split, source):
    adapter = TinyCNNClassifier(device="cpu")
    with pytest.raises(TrainingError):
        finetune(adapter, _Empty([], split.val), quick(), Objective.CROSS_ENTROPY, source)
    with pytest.raises(TrainingError):
        finetune(adapter, _Empty(split.train, []), quick(), Objective.CROSS_ENTROPY, source)
    with pytest.raises(AdapterError):
        finetune(StubVQAAdapter(), split, quick(), Objective.AUTOREGRESSIVE_NLL, source, PromptMode.BLIP_VQA)
    with pytest.raises(AdapterError):
        finetune(adapter, split, quick(), Objective.AUTOREGRESSIVE_NLL, source)
    with pytest.raises(AdapterError):
        finetune(TinyGenerativeAdapter(device="cpu"), split, quick(), Objective.AUTOREGRESSIVE_NLL, source,
                 PromptMode.CLIP_LABEL)


class _NaNClassifier(TinyCNNClassifier):
    def class_logits(self, pixels):
        return super().class_logits(pixels) * float("nan")


def test_non_finite_loss_aborts(split, source):
    with pytest.raises(TrainingDiverged):
        finetune(_NaNClassifier(device="cpu"), split, quick(), Objective.CROSS_ENTROPY, source)


@pytest.mark.parametrize(
    "family,objective",
    [
        ("tiny-clip", Objective.CLIP_SYMMETRIC_INFONCE),
        ("tiny-vqa", Objective.AUTOREGRESSIVE_NLL),
        ("tiny-binary-caption", Objective.AUTOREGRESSIVE_NLL),
        ("tiny-complete-caption", Objective.AUTOREGRESSIVE_NLL),
    ],
)
def test_vision_language_families_train_and_predict(family, objective, split, source):
    spec = get_family(family)
    adapter = build_adapter(spec, device="cpu")
    res = finetune(adapter, split, quick(family), objective, source, spec.prompt_mode)
    preds = predict(res.adapter, split.test, source, spec.prompt_mode)
    assert np.all((preds.scores >= 0) & (preds.scores <= 1))
    if spec.prompt_mode is PromptMode.BLIP_COMPLETE_CAPTION:
        assert preds.exact_match is not None and len(preds.exact_match) == len(split.test)
    else:
        assert preds.exact_match is None
    if spec.kind is AdapterKind.IMAGE_TEXT_SCORER:
        assert preds.generated is None
    else:
        assert len(preds.generated) == len(split.test)


def test_checkpoint_round_trip(tmp_path, split, source):
    spec = get_family("tiny-vqa")
    res = finetune(build_adapter(spec, device="cpu"), split, quick("tiny-vqa"), Objective.AUTOREGRESSIVE_NLL,
                   source, spec.prompt_mode)
    save_checkpoint(res.adapter, tmp_path / "ck", quick("tiny-vqa"), res.events)
    fresh = load_checkpoint(build_adapter(spec, device="cpu", seed=99), tmp_path / "ck")
    a = predict(res.adapter, split.test, source, spec.prompt_mode)
    b = predict(fresh, split.test, source, spec.prompt_mode)
    np.testing.assert_array_equal(a.scores, b.scores)
    assert a.generated == b.generated
    assert read_events(tmp_path / "ck") == res.events
    assert read_events(tmp_path / "nothing") == []


def test_transfer_copies_whole_backbone():
    net, _, _ = build_pretext(get_family("tiny-stain-pretext"), device="cpu")
    target = TinyCNNClassifier(device="cpu")
    report = transfer_pretext_weights(net, target)
    assert len(report["copied"]) == len(target.backbone.state_dict())
    for k, v in target.backbone.state_dict().items():
        assert torch.equal(v, net.backbone.state_dict()[k])
    assert report["ignored"] and all(k.startswith("decoder.") for k in report["ignored"])
    assert report["new"] == ["head." + k for k in sorted(target.head.state_dict())]


def test_transfer_from_simsiam_ignores_projector():
    net, _, _ = build_pretext(get_family("tiny-simsiam-pretext"), device="cpu")
    report = transfer_pretext_weights(net.state_dict(), TinyCNNClassifier(device="cpu"))
    assert not any(k.startswith("backbone.") for k in report["ignored"])
    assert report["ignored"]


def test_transfer_errors():
    net, _, _ = build_pretext(get_family("tiny-stain-pretext"), device="cpu")
    state = net.state_dict()
    missing = sorted(k for k in state if k.startswith("backbone."))[0]
    truncated = {k: v for k, v in state.items() if k != missing}
    with pytest.raises(TransferError, match="lacks 1 tensors"):
        transfer_pretext_weights(truncated, TinyCNNClassifier(device="cpu"))
    with pytest.raises(TransferError, match="shape mismatch"):
        transfer_pretext_weights(state, TinyCNNClassifier(width=16, device="cpu"))


def test_pretext_trainers_run(split, source):
    cfg = quick("tiny-stain-pretext", max_epochs=1, max_steps_per_epoch=2)
    net, _, ds = build_pretext(get_family("tiny-stain-pretext"), device="cpu")
    events = train_stain_pretext(net, split.train, source, cfg, downsample=ds)
    assert events and all(math.isfinite(e["loss"]) for e in events if "loss" in e)
    cfg = quick("tiny-simsiam-pretext", batch_size=8, max_epochs=1, max_steps_per_epoch=2)
    net, to_input, _ = build_pretext(get_family("tiny-simsiam-pretext"), device="cpu")
    events = train_simsiam(net, split.train, source, cfg, to_input)
    losses = [e["loss"] for e in events if e.get("event") == "step"]
    assert losses and all(-1.0 - 1e-6 <= x <= 1.0 + 1e-6 for x in losses)


def test_build_errors():
    spec = get_family("tiny-cnn")
    with pytest.raises(BuildError):
        build_adapter(replace(spec, builder="tiny:nope"))
    with pytest.raises(BuildError):
        build_pretext(replace(spec, builder="pretext:nope"))


def test_device_from_env(monkeypatch):
    monkeypatch.delenv("MITOVL_DEVICE", raising=False)
    assert device_from_env() == torch.device("cpu")
    monkeypatch.setenv("MITOVL_DEVICE", "meta")
    assert device_from_env() == torch.device("meta")


def test_batch_order():
    plain = batch_order(10, 4)
    assert [b.tolist() for b in plain] == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]
    a = batch_order(10, 4, seed=1, epoch=0)
    assert [x.tolist() for x in a] == [x.tolist() for x in batch_order(10, 4, seed=1, epoch=0)]
    assert sorted(np.concatenate(a).tolist()) == list(range(10))
    assert np.concatenate(a).tolist() != np.concatenate(batch_order(10, 4, seed=1, epoch=1)).tolist()


def test_prefetch_order_bound_and_errors():
    def load(b):
        return b * 10

    out = list(prefetch(range(6), load, depth=2))
    assert out == [(i, i * 10) for i in range(6)]
    assert list(prefetch(range(3), load, depth=0)) == [(0, 0), (1, 10), (2, 20)]

    def boom(b):
        if b == 2:
            raise OSError("unreadable tile")
        return b

    with pytest.raises(OSError, match="unreadable"):
        list(prefetch(range(5), boom))

    # the loader never runs more than depth + 1 batches ahead of the consumer
    started = []

    def slow(b):
        started.append(b)
        return b

    gen = prefetch(range(100), slow, depth=2)
    next(gen)
    time.sleep(0.2)
    assert len(started) <= 4
    gen.close()
