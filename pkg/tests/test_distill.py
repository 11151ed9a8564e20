import math

import numpy as np
import pytest

from gradcheck import check_grads
from silq.data import MixtureSampler, make_synthetic_corpus
from silq.distill import (AdamState, AdamW, DivergenceError, ParamGroup, TrainConfig, adamw_step,
                          kd_eval_loss, kd_loss, kd_weights, lr_schedule, param_groups,
                          scale_lr_for_steps, train_qat)
from silq.model import ModelConfig, build_quantized_model, calibrate_activations, init_weights
from silq.tensor import Value, default_dtype

CFG = ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ff=32, max_seq_len=16)


@pytest.fixture(scope="module")
def corpora():
    return (make_synthetic_corpus("markov-chain", 0, 20000),
            make_synthetic_corpus("template-dialogue", 0, 20000))


def setup_pair(corpora, seed=0, plan="A8s-C8-W4", std=0.1):
    base = init_weights(CFG, seed, std=std)
    teacher = build_quantized_model(CFG, None, base)
    student = build_quantized_model(CFG, plan, base)
    calib = MixtureSampler(*corpora, 0.25, seed=3).batches(2, 4, 16)
    calibrate_activations(student, [b[0] for b in calib])
    return teacher, student


def small_train(**kw):
    opts = dict(base_lr=1e-3, steps=5, batch_size=2, seq_len=15)
    opts.update(kw)
    return TrainConfig(**opts)


# -- KD loss ---------------------------------------------------------------

def test_kd_identical_logits_gives_entropy():
    z = np.array([[1.0, 2.0, 0.5]])
    p = np.exp(z) / np.exp(z).sum()
    loss = kd_loss(Value(z), z, [0])
    assert float(loss.data) == pytest.approx(float(-(p * np.log(p)).sum()), rel=1e-6)


def test_kd_ratio_zero_is_cross_entropy():
    z = np.array([[0.0, math.log(3.0)]])
    loss = kd_loss(Value(z), np.zeros((1, 2)), [1], kd_ratio=0.0)
    assert float(loss.data) == pytest.approx(-math.log(0.75), rel=1e-6)


def test_kd_weights():
    assert kd_weights(1.0) == (1.0, 0.0)
    assert kd_weights(0.25) == (0.25, 0.75)
    assert kd_weights(1.0, "ratio") == (0.5, 0.5)
    with pytest.raises(ValueError):
        kd_weights(0.5, "other")


def test_kd_temperature_scaling():
    rng = np.random.default_rng(0)
    s, t = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    l2 = float(kd_loss(Value(s), t, None, kd_temp=2.0).data)
    l1 = float(kd_loss(Value(s / 2), t / 2, None, kd_temp=1.0).data)
    assert l2 == pytest.approx(4 * l1, rel=1e-5)


def test_kd_lower_bounded_by_teacher_entropy():
    rng = np.random.default_rng(1)
    for _ in range(20):
        s, t = rng.standard_normal((3, 6)) * 3, rng.standard_normal((3, 6)) * 3
        p = np.exp(t - t.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        h = float(-(p * np.log(p)).sum(1).mean())
        assert float(kd_loss(Value(s), t, None).data) >= h - 1e-6


def test_kd_gradient():
    with default_dtype(np.float64):
        rng = np.random.default_rng(2)
        s = Value(rng.standard_normal((4, 6)), requires_grad=True, name="s")
        t = rng.standard_normal((4, 6))
        tg = rng.integers(0, 6, 4)
        check_grads(lambda: kd_loss(s, t, tg, kd_ratio=0.3, kd_temp=1.5), [s])
        check_grads(lambda: kd_loss(s, t, tg, kd_ratio=2.0, mixing="ratio"), [s])


def test_kd_shape_mismatch():
    with pytest.raises(ValueError):
        kd_loss(Value(np.zeros((2, 3))), np.zeros((2, 4)), [0, 0])


# -- learning-rate rules ---------------------------------------------------

def test_scale_lr_examples():
    assert scale_lr_for_steps(5e-6, 8000, 32000) == 2.5e-6
    assert scale_lr_for_steps(5e-6, 8000, 750) == pytest.approx(1.633e-5, rel=5e-3)
    assert scale_lr_for_steps(1e-3, 500, 1000) == pytest.approx(1e-3 / math.sqrt(2))
    with pytest.raises(ValueError):
        scale_lr_for_steps(5e-6, 8000, 0)


def test_cosine_schedule():
    assert lr_schedule(0, 100, 1.0) == 1.0
    assert lr_schedule(100, 100, 1.0) == pytest.approx(0.1)
    assert lr_schedule(50, 100, 1.0) == pytest.approx(0.55)
    vals = [lr_schedule(i, 100, 2e-5) for i in range(101)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        lr_schedule(101, 100, 1.0)


def test_auto_lr_peak():
    cfg = TrainConfig(base_lr=1e-3, base_steps=500, steps=1000, auto_lr=True)
    assert cfg.peak_lr == pytest.approx(1e-3 / math.sqrt(2))
    assert TrainConfig(base_lr=1e-3, steps=1000).peak_lr == 1e-3


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(dropout=0.1)
    with pytest.raises(ValueError):
        TrainConfig(kd_ratio=1.5)
    with pytest.raises(ValueError):
        TrainConfig(base_lr=0)
    d = TrainConfig(steps=10).to_dict()
    assert TrainConfig.from_dict(d) == TrainConfig(steps=10)


# -- AdamW -----------------------------------------------------------------

def adamw_scalar(p, grads, lr, b1, b2, eps, wd):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        p -= lr * wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adamw_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    p0 = rng.standard_normal(7)
    gs = rng.standard_normal((10, 7))
    p = p0.copy()
    st = AdamState.zeros_like([p])
    for g in gs:
        adamw_step([p], [g], st, 1e-2, (0.9, 0.95), 1e-10, 0.1)
    for i in range(7):
        assert p[i] == pytest.approx(adamw_scalar(p0[i], gs[:, i], 1e-2, 0.9, 0.95, 1e-10, 0.1), abs=1e-10)


def test_adamw_zero_grad_only_decays():
    p = np.array([1.0, -2.0])
    adamw_step([p], [np.zeros(2)], AdamState.zeros_like([p]), 0.1, weight_decay=0.1)
    np.testing.assert_allclose(p, [0.99, -1.98])


def test_adamw_groups():
    a = Value(np.ones(3), requires_grad=True)
    b = Value(np.ones(3), requires_grad=True)
    a.grad[...] = 1.0
    b.grad[...] = 1.0
    opt = AdamW([ParamGroup("w", [("a", a)], 1.0, 0.1), ParamGroup("s", [("b", b)], 50.0, 0.0)])
    opt.step(1e-3)
    np.testing.assert_allclose(a.data, 1 - 1e-4 - 1e-3, rtol=1e-6)
    np.testing.assert_allclose(b.data, 1 - 50e-3, rtol=1e-6)
    assert opt.group_lrs(1e-3) == {"w": 1e-3, "s": 0.05}


def test_param_groups_layout(corpora):
    _, student = setup_pair(corpora)
    groups = {g.name: g for g in param_groups(student, TrainConfig())}
    assert groups["act_steps"].lr_scale == 50 and groups["act_steps"].weight_decay == 0
    assert groups["weight_steps"].weight_decay == 0 and groups["weights"].weight_decay == 0.1
    assert all(n.endswith("norm") for n, _ in groups["norms"].params)
    names = {n for g in groups.values() for n, _ in g.params}
    assert "head" in names and "layers.0.key_cache" in names and "layers.0.wq" in names


# -- training loop ---------------------------------------------------------

def test_training_deterministic(corpora):
    def run():
        teacher, student = setup_pair(corpora)
        m = train_qat(student, teacher, MixtureSampler(*corpora, 0.25, seed=1), small_train())
        arrays = student.state_arrays()
        return m.to_lines(), {k: v.tobytes() for k, v in arrays.items()}
    assert run() == run()


def test_teacher_unchanged(corpora):
    teacher, student = setup_pair(corpora)
    before = {k: v.copy() for k, v in teacher.state_arrays().items()}
    train_qat(student, teacher, MixtureSampler(*corpora, 0.25, seed=1), small_train())
    for k, v in teacher.state_arrays().items():
        np.testing.assert_array_equal(v, before[k])
    assert not any(v.requires_grad for _, v in teacher.parameters())


def test_lr_trace_and_groups(corpora):
    teacher, student = setup_pair(corpora)
    cfg = small_train(steps=8, base_lr=2e-3, base_steps=4, auto_lr=True)
    m = train_qat(student, teacher, MixtureSampler(*corpora, 0.25, seed=1), cfg)
    peak = 2e-3 * math.sqrt(4 / 8)
    assert [r["step"] for r in m.records] == list(range(8))
    for r, g in zip(m.records, m.group_lrs):
        assert r["lr"] == pytest.approx(lr_schedule(r["step"], 8, peak))
        assert g["act_steps"] == pytest.approx(50 * g["weights"])
    assert all(math.isfinite(r["loss"]) and r["grad_norm"] > 0 for r in m.records)


def test_step_sizes_stay_positive(corpora):
    teacher, student = setup_pair(corpora)
    train_qat(student, teacher, MixtureSampler(*corpora, 0.25, seed=1), small_train(base_lr=0.5))
    assert all(np.all(st.values >= 1e-8) for _, st in student.step_sizes())


def test_qat_reduces_kd_loss(corpora):
    # large init weights give a peaked teacher, so the quantized student has a real gap to close
    teacher, student = setup_pair(corpora, plan="A8s-C4-W4", std=0.5)
    ev = MixtureSampler(*corpora, 0.25, seed=9).batches(2, 4, 16)
    before = kd_eval_loss(student, teacher, ev)
    train_qat(student, teacher, MixtureSampler(*corpora, 0.25, seed=1),
              small_train(steps=30, base_lr=1e-3, batch_size=4))
    assert kd_eval_loss(student, teacher, ev) < before


def test_divergence_raises(corpora):
    teacher, student = setup_pair(corpora)
    student.params["layers.0.wq"].data[0, 0] = np.nan
    with pytest.raises(DivergenceError) as err:
        train_qat(student, teacher, MixtureSampler(*corpora, 0.25, seed=1), small_train())
    snap = err.value.snapshot
    assert snap["step"] == 0 and "param_norms" in snap


def test_eval_callback(corpora):
    teacher, student = setup_pair(corpora)
    ev = MixtureSampler(*corpora, 0.25, seed=9).batches(1, 2, 16)
    m = train_qat(student, teacher, MixtureSampler(*corpora, 0.25, seed=1), small_train(steps=4),
                  eval_fn=lambda: kd_eval_loss(student, teacher, ev), eval_every=2)
    assert [e["step"] for e in m.evals] == [1, 3]
