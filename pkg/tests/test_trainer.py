import dataclasses

import numpy as np
import pytest
import torch

from siamdefect.config import LossConfig
from siamdefect.data import ImagePair
from siamdefect.metrics import confusion, scores
from siamdefect.synlcd import builtin_patterns, sample_spec, synthesize_sample
from siamdefect.trainer import (
    CHECKPOINT_MAGIC, Checkpoint, CheckpointError, build_model, evaluate, learning_rate, load_checkpoint,
    make_protocol, model_from_checkpoint, read_log, save_checkpoint, train, training_subset,
)

from conftest import tiny_config

PATTERNS = builtin_patterns((64, 64))


def synth_pairs(kind="mixed", n=4, seed=0, **kw):
    names = list(PATTERNS)
    out = []
    for i in range(n):
        p = PATTERNS[names[i % len(names)]]
        s = synthesize_sample(p, sample_spec(p, kind, seed + i, **kw))
        out.append(ImagePair(s.ng_image, s.ok_image, s.mask.astype(np.int64),
                             {"sample_id": f"{kind}_{seed + i:04d}"}))
    return out


def params_equal(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def pairs():
    return synth_pairs(n=4)


def test_checkpoint_round_trip(tmp_path, pairs):
    cfg = tiny_config(iterations=2)
    result = train(build_model(cfg), pairs, cfg)
    save_checkpoint(result.checkpoint, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert params_equal(back.parameters, result.checkpoint.parameters)
    assert back.iteration == 2 and back.config == result.checkpoint.config
    model, cfg2 = model_from_checkpoint(back)
    assert cfg2 == cfg and params_equal(model.state_dict(), result.checkpoint.parameters)


def test_truncated_checkpoint(tmp_path):
    cfg = tiny_config()
    ckpt = Checkpoint(build_model(cfg).state_dict(), None, 0, dataclasses.asdict(cfg))
    path = tmp_path / "c.ckpt"
    save_checkpoint(ckpt, path)
    data = path.read_bytes()
    for cut in (len(data) - 10, 8):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError, match="corrupt checkpoint"):
            load_checkpoint(path)


def test_altered_checkpoint(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "c.ckpt"
    save_checkpoint(Checkpoint(build_model(cfg).state_dict(), None, 0, {}), path)
    data = bytearray(path.read_bytes())
    data[-5] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="corrupt checkpoint"):
        load_checkpoint(path)


def test_version_mismatch_names_both(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(Checkpoint({}, None, 0, {}, version=7), path)
    with pytest.raises(CheckpointError, match="version 7 .*version 1"):
        load_checkpoint(path)
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)


def test_zero_iterations_is_initialization(pairs):
    cfg = tiny_config(iterations=0)
    model = build_model(cfg)
    init = {k: v.clone() for k, v in model.state_dict().items()}
    result = train(model, pairs, cfg)
    assert result.history == [] and result.checkpoint.iteration == 0
    assert params_equal(result.checkpoint.parameters, init)


def test_out_of_class_leaves_classifier_untouched():
    cfg = tiny_config(iterations=1)
    model = build_model(cfg)
    ab = synth_pairs("abpt", n=2)
    protocol = make_protocol("AL")
    assert protocol.mode == "out_of_class"
    from siamdefect.trainer import _batch
    ng, ok, mask = _batch(ab, 0, cfg)
    out = model(ng, ok, mode=protocol.mode)
    from siamdefect.losses import total_loss
    total_loss(out.logits, out.distmap, mask, protocol.mode, cfg.loss).total.backward()
    head = model.decoder.classifier
    for p in head.parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.encoder.parameters())
    before = {k: v.clone() for k, v in head.state_dict().items()}
    train(model, ab, tiny_config(iterations=2), protocol)
    assert all(torch.equal(before[k], v) for k, v in head.state_dict().items())


def test_nan_loss_aborts_with_diagnostic(pairs):
    cfg = tiny_config(iterations=2)
    model = build_model(cfg)
    with torch.no_grad():
        model.decoder.classifier.bias.fill_(float("nan"))
    with pytest.raises(FloatingPointError, match=r"step 0: cel=nan"):
        train(model, pairs, cfg)


def test_learning_rate_schedule():
    cfg = tiny_config(iterations=100, warmup_iters=10, lr=1.0)
    lrs = [learning_rate(s, cfg) for s in range(100)]
    assert lrs[0] == pytest.approx(1e-6)
    assert lrs[10] == pytest.approx(0.9)
    assert all(a < b for a, b in zip(lrs[:10], lrs[1:11]))
    assert all(a > b for a, b in zip(lrs[10:], lrs[11:]))
    assert lrs[99] == pytest.approx(0.01)


@pytest.mark.parametrize("name,train_c,test_c,ooc", [
    ("LL", {1}, {1}, False), ("AA", {2}, {2}, False), ("LA", {1}, {2}, True), ("AL", {2}, {1}, True),
    ("full", {1, 2}, {1, 2}, False),
])
def test_protocols(name, train_c, test_c, ooc):
    p = make_protocol(name)
    assert p.train_classes == train_c and p.test_classes == test_c
    assert p.out_of_class == ooc and p.mode == ("out_of_class" if ooc else "intra_class")


def test_unknown_protocol():
    with pytest.raises(ValueError, match="unknown protocol"):
        make_protocol("XY")


def test_training_subset_filters_classes_and_fraction():
    pairs = synth_pairs("line", n=3) + synth_pairs("abpt", n=3) + synth_pairs("mixed", n=2)
    assert len(training_subset(pairs, make_protocol("LL"), 0)) == 3
    assert len(training_subset(pairs, make_protocol("AL"), 0)) == 3
    assert len(training_subset(pairs, make_protocol("label_fraction", 0.25), 0)) == 2


def test_empty_labeled_subset_rejected():
    cfg = tiny_config()
    with pytest.raises(ValueError, match="no labeled training pairs"):
        train(build_model(cfg), synth_pairs("abpt", n=2), cfg, make_protocol("LL"))



def _evaluate_with(pred_fn, pairs, protocol, cfg, monkeypatch):
    import siamdefect.trainer as tr

    def fake_predict(model, pair, cfg, mode=None, device="cpu"):
        return pred_fn(pair)

    monkeypatch.setattr(tr, "predict", fake_predict)
    return evaluate(None, pairs, protocol, cfg)


def _onehot(mask, c=3):
    return np.eye(c)[mask].transpose(2, 0, 1)


def test_perfect_prediction_scores_one(pairs, monkeypatch):
    rep = _evaluate_with(lambda p: (_onehot(p.mask), (p.mask > 0).astype(float)), pairs,
                         make_protocol("full"), tiny_config(), monkeypatch)
    assert rep["mIoU"] == 1 and rep["mFscore"] == 1 and rep["best_iou"] == 1


def test_all_background_prediction_has_zero_defect_iou(pairs, monkeypatch):
    rep = _evaluate_with(lambda p: (_onehot(np.zeros_like(p.mask)), np.zeros(p.mask.shape)), pairs,
                         make_protocol("full"), tiny_config(), monkeypatch)
    assert rep["per_class"]["iou"][1] == 0 and rep["per_class"]["iou"][2] == 0


def test_report_matches_summed_confusion(pairs):
    cfg = tiny_config()
    model = build_model(cfg)
    rep = evaluate(model, pairs, make_protocol("full"), cfg, keep_predictions=True)
    total = sum(confusion(pred, p.mask, 3) for pred, p in zip(rep["predictions"], pairs))
    assert np.array_equal(np.array(rep["confusion"]), total)
    s = scores(total)
    for k in ("mIoU", "mAcc", "aAcc", "mFscore"):
        assert rep[k] == pytest.approx(s[k])


def test_out_of_class_report_is_binary(monkeypatch):
    lines = synth_pairs("line", n=2)
    rep = _evaluate_with(lambda p: (_onehot(np.zeros_like(p.mask)), (p.mask > 0).astype(float)), lines,
                         make_protocol("AL"), tiny_config(), monkeypatch)
    assert rep["mode"] == "out_of_class" and rep["best_iou"] == 1 and rep["iou_at_0.5"] == 1
    assert np.array(rep["confusion"]).sum() == sum(p.mask.size for p in lines)


def test_class_outside_test_set_rejected(monkeypatch):
    with pytest.raises(ValueError, match="outside the AL test classes"):
        _evaluate_with(lambda p: None, synth_pairs("abpt", n=1), make_protocol("AL"), tiny_config(),
                       monkeypatch)


def test_background_only_loss_trends_down():
    cfg = dataclasses.replace(tiny_config(iterations=50, lr=1e-3, warmup_iters=0),
                              loss=LossConfig(lambda2=0.0))
    bg = [ImagePair(p.ng, p.ok, np.zeros_like(p.mask)) for p in synth_pairs(n=4)]
    hist = np.array([h[3] for h in train(build_model(cfg), bg, cfg).history])
    slope = np.polyfit(np.arange(50), hist, 1)[0]
    assert slope < 0 and hist[-10:].mean() < hist[:10].mean()


def test_determinism(pairs):
    cfg = tiny_config(iterations=3)
    a = train(build_model(cfg), pairs, cfg)
    b = train(build_model(cfg), pairs, cfg)
    assert a.history == b.history
    assert params_equal(a.checkpoint.parameters, b.checkpoint.parameters)


def test_resume_equivalence(tmp_path, pairs):
    cfg = tiny_config(iterations=4)
    full = train(build_model(cfg), pairs, cfg, log_path=tmp_path / "full.csv")
    part = train(build_model(cfg), pairs, cfg, stop_at=2, log_path=tmp_path / "part.csv")
    save_checkpoint(part.checkpoint, tmp_path / "p.ckpt")
    rest = train(build_model(cfg, seed=99), pairs, cfg, resume=load_checkpoint(tmp_path / "p.ckpt"),
                 log_path=tmp_path / "part.csv")
    assert params_equal(full.checkpoint.parameters, rest.checkpoint.parameters)
    assert read_log(tmp_path / "part.csv") == read_log(tmp_path / "full.csv") == full.history
