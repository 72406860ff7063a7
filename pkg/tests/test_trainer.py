from fractions import Fraction

import numpy as np
import pytest
import torch

from unimed.codec import ConfigurationError, build_vocabulary
from unimed.model import ModelConfig, UniMedModel, param_checksum
from unimed.synth import PALETTE, SceneSpec, make_datasets
from unimed.trainer import (
    JointTrainer,
    LabeledSample,
    MomentumEncoderState,
    StateError,
    TrainConfig,
    TrainingError,
    draw_schedule,
    dual_sample,
    ema_update,
    object_targets,
    read_metrics_log,
)


@pytest.fixture(scope="module")
def vocab():
    return build_vocabulary(PALETTE)


@pytest.fixture(scope="module")
def data():
    (lab,), unl = make_datasets([("classification", "detection", "segmentation")], [8], SceneSpec(min_objects=1), 0, unlabeled=8)
    return lab, unl


def new_model(vocab, seed=0):
    torch.manual_seed(seed)
    return UniMedModel(ModelConfig(vocab_size=len(vocab), max_seq_len=vocab.max_target_len()))


# -- EMA ----------------------------------------------------------------------


def test_ema_extremes():
    online = {"w": torch.randn(3, 4)}
    keep = MomentumEncoderState({"w": torch.ones(3, 4)}, 1.0)
    ema_update(online, keep)
    assert torch.equal(keep.shadow["w"], torch.ones(3, 4))
    copy = MomentumEncoderState({"w": torch.ones(3, 4)}, 0.0)
    ema_update(online, copy)
    assert torch.equal(copy.shadow["w"], online["w"])


def test_ema_geometric_decay():
    state = MomentumEncoderState({"s": torch.tensor(1.0, dtype=torch.float64)}, 0.99)
    for _ in range(100):
        ema_update({"s": torch.tensor(0.0, dtype=torch.float64)}, state)
    assert abs(float(state.shadow["s"]) - 0.36603) <= 1e-5


def test_ema_is_linear():
    g = torch.Generator().manual_seed(0)
    a_s, b_s = torch.randn(5, 3, generator=g, dtype=torch.float64), torch.randn(5, 3, generator=g, dtype=torch.float64)
    a_o, b_o = torch.randn(5, 3, generator=g, dtype=torch.float64), torch.randn(5, 3, generator=g, dtype=torch.float64)
    sa = ema_update({"p": a_o}, MomentumEncoderState({"p": a_s.clone()}, 0.9)).shadow["p"]
    sb = ema_update({"p": b_o}, MomentumEncoderState({"p": b_s.clone()}, 0.9)).shadow["p"]
    sab = ema_update({"p": a_o + b_o}, MomentumEncoderState({"p": a_s + b_s}, 0.9)).shadow["p"]
    assert torch.allclose(sab, sa + sb, atol=1e-14)


def test_ema_shape_mismatch():
    with pytest.raises(StateError):
        ema_update({"w": torch.zeros(2)}, MomentumEncoderState({"w": torch.zeros(3)}, 0.5))
    with pytest.raises(StateError):
        MomentumEncoderState({}, 1.5)


# -- dual sampling ----------------------------------------------------------------


def test_one_to_one_alternates():
    assert draw_schedule("1:1", 20) == ["L", "U"] * 10
    pairs = list(dual_sample(list(range(10)), list(range(100, 110)), "1:1"))
    assert [p[0] for p in pairs] == list(range(10))
    assert all(len(u) == 1 for _, u in pairs)


def test_one_to_two_counts():
    s = draw_schedule("1:2", 30)
    assert s.count("L") == 10 and s.count("U") == 20


def test_half_to_one_long_run_counts():
    a, b = Fraction(1, 2), Fraction(1)
    s = draw_schedule("0.5:1", 10_000)
    labeled = unlabeled = 0
    for t, d in enumerate(s, 1):
        labeled += d == "L"
        unlabeled += d == "U"
        assert abs(labeled - t * a / (a + b)) <= 1
    assert abs(labeled - 0.5 * unlabeled) <= 1


def test_dual_sample_errors():
    with pytest.raises(ConfigurationError):
        list(dual_sample([1, 2], [], "1:1"))
    with pytest.raises(ConfigurationError):
        list(dual_sample([], [1], "1:1"))
    with pytest.raises(ConfigurationError):
        draw_schedule("-1:1", 3)


# -- targets ----------------------------------------------------------------------


def test_classification_target_is_largest_object(vocab, data):
    lab, _ = data
    rec = next(e.record for e in lab.entries if len(e.record.classes) > 1)
    t = object_targets(rec, "classification", vocab, (64, 64))
    assert t.seqs == [vocab.class_ids(rec.classes[0]) + [vocab.eos]]
    det = object_targets(rec, "detection", vocab, (64, 64))
    assert len(det.seqs) == len(rec.classes) and all(len(s) >= 6 for s in det.seqs)
    seg = object_targets(rec, "segmentation", vocab, (64, 64), keep=[rec.classes[-1]])
    assert seg.masks.shape[1:] == (64, 64) and len(seg.seqs) == seg.masks.shape[0]


# -- steps --------------------------------------------------------------------------


def test_loss_identity_and_log(vocab, data, tmp_path):
    lab, unl = data
    log = tmp_path / "metrics.jsonl"
    tr = JointTrainer(new_model(vocab), vocab, TrainConfig(batch_size=4, unlabeled_batch_size=4, lam=0.1), log)
    reports = tr.fit(lab.entries, unl.entries, steps=3)
    rows = read_metrics_log(log)
    assert len(rows) == 3
    for r, row in zip(reports, rows):
        assert r.identity_gap() <= 1e-9
        assert abs(row["L_total"] - ((row["L_s"] + row["L_p"]) + row["lambda"] * (row["L_c"] + row["L_dc"]))) <= 1e-9
        assert set(row) == {"step", "L_s", "L_p", "L_c", "L_dc", "L_total", "lambda", "matched_pairs"}


def test_lambda_zero_equals_supervised_only(vocab, data):
    lab, unl = data
    cfg = TrainConfig(batch_size=4, unlabeled_batch_size=4, lam=0.0, seed=3)
    a = JointTrainer(new_model(vocab), vocab, cfg)
    ra = a.fit(lab.entries, unl.entries, steps=3)
    b = JointTrainer(new_model(vocab), vocab, cfg)
    rb = b.fit(lab.entries, (), steps=3)
    assert [(r.L_s, r.L_p, r.L_total) for r in ra] == [(r.L_s, r.L_p, r.L_total) for r in rb]
    assert param_checksum(a.model) == param_checksum(b.model)
    assert any(r.L_c > 0 for r in ra)  # unlabeled terms were still measured


def test_frozen_batch_loss_halves(vocab, data):
    lab, _ = data
    tr = JointTrainer(new_model(vocab), vocab, TrainConfig(lr=1e-3, steps=50, referring_prob=0.0))
    batch = tr.make_samples(lab.entries[:4])
    first = tr.train_step(batch, None, 0.0).L_total
    for _ in range(48):
        tr.train_step(batch, None, 0.0)
    last = tr.train_step(batch, None, 0.0).L_total
    assert last <= 0.5 * first


def test_non_finite_loss_aborts_with_dump(vocab, data):
    lab, _ = data
    tr = JointTrainer(new_model(vocab), vocab, TrainConfig())
    with torch.no_grad():
        tr.model.semantic.out.bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="L_s=nan"):
        tr.train_step(tr.make_samples(lab.entries[:2]), None, 0.0)


def test_prompts_only_name_palette_classes(vocab, data):
    lab, _ = data
    tr = JointTrainer(new_model(vocab), vocab, TrainConfig(referring_prob=1.0))
    for e in lab.entries:
        p = tr.sample_prompt(e.record)
        assert p and set(p) <= set(PALETTE)


def test_supervised_step_with_prompts_trains(vocab, data):
    lab, _ = data
    tr = JointTrainer(new_model(vocab), vocab, TrainConfig(referring_prob=1.0))
    batch = [LabeledSample(e.image, e.record, ["polyp", "cancer"]) for e in lab.entries[:2]]
    r = tr.train_step(batch, None, 0.0)
    assert np.isfinite(r.L_total)
