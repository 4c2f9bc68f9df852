"""Base training tests: crops, distillation identities, EMA, phase ordering."""

import numpy as np
import pytest

from fscil.backbone import BackboneConfig, Encoder, hash_state
from fscil.base_trainer import (
    DinoHead,
    crop_slots,
    dino_step,
    ema_update_teacher,
    linear_probe,
    make_teacher,
    multi_crop,
    train_base,
    update_center,
)
from fscil.config import TrainingConfig, desk_profile
from fscil.errors import ArgumentError, UsageError
from fscil.events import EventLog
from fscil.numerics import SeededRng


def blob_images(seed=0, classes=4, per_class=20, spread=4.0):
    rng = SeededRng(seed)
    means = rng.child("m").normal(size=(classes, 16), scale=spread)
    xs = [means[c] + rng.child(f"c{c}").normal(size=(per_class, 16)) for c in range(classes)]
    x = np.concatenate(xs).reshape(-1, 1, 4, 4)
    y = np.repeat(np.arange(classes), per_class)
    return x, y


def tiny_model():
    return BackboneConfig(image_size=4, conv_channels=(16,), conv_kernel=3, conv_padding=1, pool_size=2, embed_dim=16, heads=2, layers=1, ffn_hidden=32)


# -- multi-crop ------------------------------------------------------------------


def test_multi_crop_counts():
    img = np.random.default_rng(0).normal(size=(1, 8, 8))
    crops = multi_crop(img, SeededRng(1), n_local=0)
    assert len(crops) == 2 and len(crops.locals) == 0
    crops = multi_crop(img, SeededRng(1), n_local=3)
    assert len(crops) == 5 and len(crops.all_crops) == 5


def test_multi_crop_deterministic_bitwise():
    img = np.random.default_rng(1).normal(size=(1, 8, 8))
    a = multi_crop(img, SeededRng(7), n_local=4)
    b = multi_crop(img, SeededRng(7), n_local=4)
    for ca, cb in zip(a.all_crops, b.all_crops):
        assert np.array_equal(ca, cb)
    assert a.boxes == b.boxes


def test_multi_crop_boxes_within_bounds_oracle():
    img = np.random.default_rng(2).normal(size=(1, 6, 6))
    for seed in range(10_000):
        crops = multi_crop(img, SeededRng(seed), n_local=2)
        for top, left, side in crops.boxes:
            assert 0 <= top and 0 <= left and side >= 1
            assert top + side <= 6 and left + side <= 6
        for c in crops.all_crops:
            assert c.shape == (1, 6, 6)


def test_multi_crop_too_small_image():
    with pytest.raises(ArgumentError):
        multi_crop(np.zeros((1, 1, 1)), SeededRng(0), n_local=0)


# -- dino step ------------------------------------------------------------------------


def _student_teacher(seed=3, proj_dim=8, equal_temps=True):
    cfg = tiny_model()
    encoder = Encoder(cfg, SeededRng(seed)).train()
    proj = DinoHead(SeededRng(seed).child("proj"), cfg.embed_dim, 16, proj_dim)
    tc = desk_profile(proj_dim=proj_dim)
    teacher = make_teacher(encoder, proj, tc)
    if equal_temps:
        teacher.current_temp = tc.student_temp  # match so p_teacher == p_student
    return encoder, proj, teacher, tc


def _iter_bns(encoder):
    for bn in encoder.tokenizer.norms:
        yield bn
    for block in encoder.blocks:
        yield from (block.attn_bn, block.ffn_bn, block.ffn_bn_mid, block.ffn_bn_in)
    if encoder.final_bn is not None:
        yield encoder.final_bn


def _calibrate_teacher_bn(student, teacher_encoder, batch):
    """Set the teacher's running stats to the student's batch statistics so a
    train-mode student and an eval-mode teacher compute the same function."""
    from fscil.backbone import BN_EPS, BN_MOMENTUM
    from fscil.numerics import Tensor

    snaps = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in _iter_bns(student)]
    student.train()
    student.forward(Tensor(batch))
    for bn, tbn, (old_m, old_v) in zip(_iter_bns(student), _iter_bns(teacher_encoder), snaps):
        batch_mean = (bn.running_mean - (1 - BN_MOMENTUM) * old_m) / BN_MOMENTUM
        batch_var = (bn.running_var - (1 - BN_MOMENTUM) * old_v) / BN_MOMENTUM
        tbn.running_mean[...] = batch_mean
        tbn.running_var[...] = batch_var + BN_EPS  # matches the train denominator


def test_teacher_equals_student_loss_is_summed_entropy():
    encoder, proj, teacher, tc = _student_teacher()
    batch = np.random.default_rng(3).normal(size=(2, 1, 4, 4))
    slots = [batch.copy() for _ in range(4)]  # identical deterministic "crops"
    _calibrate_teacher_bn(encoder, teacher.encoder, batch)
    loss, info = dino_step(encoder, proj, teacher, slots, student_temp=tc.student_temp)
    # identical nets, identical inputs, equal temps, zero center -> CE(p, p) = H(p)
    probs = teacher.probs(teacher.logits(batch))
    entropy = float(-(probs * np.log(probs)).sum(axis=-1).mean())
    assert info["n_pairs"] == 2 * (len(slots) - 1)
    assert abs(loss.item() - info["n_pairs"] * entropy) < 1e-9


def test_pair_count_two_global_two_local():
    encoder, proj, teacher, tc = _student_teacher(4)
    batch = np.random.default_rng(4).normal(size=(2, 1, 4, 4))
    slots = [batch, batch * 0.9, batch * 0.8, batch * 0.7]
    loss, info = dino_step(encoder, proj, teacher, slots, student_temp=tc.student_temp)
    assert info["n_pairs"] == 6  # 2 * (|V| - 1)


def test_sharpening_limit_approaches_argmax_ce():
    encoder, proj, teacher, tc = _student_teacher(5)
    batch = np.random.default_rng(5).normal(size=(1, 1, 4, 4))
    slots = [batch, batch * 0.5]
    teacher.current_temp = 1e-4  # tau_t -> 0+: teacher target approaches one-hot
    loss, info = dino_step(encoder, proj, teacher, slots, student_temp=tc.student_temp)

    import fscil.numerics as num

    with num.no_grad():
        t_logits = [teacher.logits(s) for s in slots[:2]]
        s_logits = [proj(encoder.forward(num.Tensor(s))).data / tc.student_temp for s in slots]
    expected = 0.0
    for t_idx in range(2):
        hot = t_logits[t_idx].argmax(axis=-1)
        for s_idx in range(2):
            if s_idx == t_idx:
                continue
            row = s_logits[s_idx][0]
            expected += -(row[hot[0]] - np.log(np.exp(row - row.max()).sum()) - row.max())
    assert abs(loss.item() - expected) < 1e-6


def test_teacher_receives_no_gradient():
    encoder, proj, teacher, tc = _student_teacher(6)
    before = teacher.state_hash()
    batch = np.random.default_rng(6).normal(size=(2, 1, 4, 4))
    loss, _ = dino_step(encoder, proj, teacher, [batch, batch * 0.5, batch * 0.2], student_temp=tc.student_temp)
    loss.backward()
    assert teacher.state_hash() == before
    assert all(p.grad is None for p in teacher.proj.params().values())


def test_dino_step_mode_contracts():
    encoder, proj, teacher, tc = _student_teacher(7)
    encoder.eval()
    with pytest.raises(UsageError):
        dino_step(encoder, proj, teacher, [np.zeros((1, 1, 4, 4))] * 2, student_temp=0.1)
    encoder.train()
    teacher.encoder.mode = "train"
    with pytest.raises(UsageError):
        dino_step(encoder, proj, teacher, [np.zeros((1, 1, 4, 4))] * 2, student_temp=0.1)


# -- center and EMA ----------------------------------------------------------------------


def test_update_center_momentum_zero_is_batch_mean():
    _, _, teacher, _ = _student_teacher(8)
    outputs = np.random.default_rng(8).normal(size=(10, 8))
    update_center(teacher, outputs, momentum=0.0)
    np.testing.assert_allclose(teacher.center, outputs.mean(axis=0), atol=1e-12)


def test_update_center_momentum_one_is_identity():
    _, _, teacher, _ = _student_teacher(9)
    teacher.center = np.arange(8.0)
    update_center(teacher, np.random.default_rng(9).normal(size=(5, 8)), momentum=1.0)
    np.testing.assert_array_equal(teacher.center, np.arange(8.0))


def test_update_center_geometric_convergence():
    # constant outputs o: c_t -> o at rate (1 - m) per step
    _, _, teacher, _ = _student_teacher(10)
    o = np.full(8, 2.0)
    m = 0.9
    teacher.center = np.zeros(8)
    for step in range(1, 40):
        update_center(teacher, np.tile(o, (3, 1)), momentum=m)
        expected = o * (1.0 - m**step)
        np.testing.assert_allclose(teacher.center, expected, atol=1e-10)


def test_update_center_empty_batch_rejected():
    _, _, teacher, _ = _student_teacher(11)
    with pytest.raises(ArgumentError):
        update_center(teacher, np.zeros((0, 8)))


def test_ema_momentum_one_and_zero():
    encoder, proj, teacher, _ = _student_teacher(12)
    for p in encoder.params().values():
        p.data = p.data + 1.0
    before = teacher.state_hash()
    ema_update_teacher(teacher, encoder, proj, momentum=1.0)
    assert teacher.state_hash() == before
    ema_update_teacher(teacher, encoder, proj, momentum=0.0)
    assert hash_state(teacher.encoder) == hash_state(encoder)


def test_ema_contraction_factor_matches_momentum():
    encoder, proj, teacher, _ = _student_teacher(13)
    rng = np.random.default_rng(13)
    for p in encoder.params().values():
        p.data = p.data + rng.normal(size=p.data.shape)

    def distance():
        s = encoder.params()
        return np.sqrt(sum(((p.data - s[n].data) ** 2).sum() for n, p in teacher.encoder.params().items()))

    d0 = distance()
    ema_update_teacher(teacher, encoder, proj, momentum=0.99)
    d1 = distance()
    assert abs(d1 - 0.99 * d0) < 1e-9 * max(1.0, d0)
    assert d1 < d0  # strict contraction toward a fixed student


# -- full phases -------------------------------------------------------------------------


def test_train_base_phases_and_loss_trend():
    x, y = blob_images(seed=20, classes=4, per_class=15)
    tc = desk_profile(ssl_epochs=6, ssl_early_stop=6, sup_epochs=24, sup_early_stop=24, sup_batch_size=30, ssl_batch_size=30)
    log = EventLog()
    encoder, head, teacher, history = train_base(x, y, tiny_model(), tc, SeededRng(21), log=log)

    # distillation strictly precedes supervised work in the event stream
    phases = [r["phase"] for r in log.records if r["phase"] in ("ssl", "supervised")]
    assert "ssl" in phases and "supervised" in phases
    assert max(i for i, p in enumerate(phases) if p == "ssl") < min(i for i, p in enumerate(phases) if p == "supervised")

    # smoothed supervised loss improves on separable data (window mean)
    sup = history["sup_loss"]
    k = min(10, max(1, len(sup) // 2))
    assert np.mean(sup[-k:]) < np.mean(sup[:k])


def test_train_base_enforces_two_classes():
    x, y = blob_images(seed=22, classes=1, per_class=10)
    with pytest.raises(ArgumentError):
        train_base(x, y, tiny_model(), desk_profile(), SeededRng(23))
    with pytest.raises(ArgumentError):
        train_base(np.zeros((0, 1, 4, 4)), np.zeros(0, dtype=int), tiny_model(), desk_profile(), SeededRng(24))


def test_published_early_stop_and_temperature_defaults():
    tc = TrainingConfig()
    assert tc.ssl_early_stop == 30 and tc.sup_early_stop == 30
    assert tc.teacher_temp == 0.07 and tc.warmup_teacher_temp == 0.04
    assert tc.ssl_weight_decay == 0.04 and tc.ssl_weight_decay_end == 0.4


def test_linear_probe_frozen_teacher_and_baseline():
    x, y = blob_images(seed=25, classes=3, per_class=12, spread=6.0)
    tc = desk_profile(ssl_epochs=3, ssl_early_stop=3, sup_epochs=3, sup_early_stop=3, probe_epochs=40, probe_early_stop=40)
    encoder, head, teacher, _ = train_base(x, y, tiny_model(), tc, SeededRng(26))
    before = teacher.state_hash()
    probe, acc = linear_probe(teacher, x, y, tc, SeededRng(27))
    assert teacher.state_hash() == before  # bitwise identical before/after
    majority = max(np.bincount(y)) / len(y)
    assert acc >= majority
    assert tc.probe_lr == 1e-3 and tc.probe_batch_size == 100 and TrainingConfig().probe_epochs == 200


def test_crop_slots_shapes():
    x, _ = blob_images(seed=28, classes=2, per_class=5)
    slots = crop_slots(x[:6], SeededRng(29), n_local=3, global_scale=(0.6, 1.0), local_scale=(0.2, 0.5))
    assert len(slots) == 5
    for s in slots:
        assert s.shape == (6, 1, 4, 4)
