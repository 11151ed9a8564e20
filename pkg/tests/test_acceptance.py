"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Tolerances are pinned to the stated acceptance thresholds; nothing here is
tuned to make a result pass. The desk-scale training experiment (criteria 5
and 6) shares one teacher built by a module-scoped fixture.
"""

import json
import math
import time

import numpy as np
import pytest

from gradcheck import analytic_grads, numeric_grad, rel_close
from silq import checkpoint as ckpt
from silq.calib import approx_mse, calibrate_weight_mse, mse_bound
from silq.cli import main as cli_main
from silq.data import MixtureSampler, make_synthetic_corpus
from silq.distill import TrainConfig, kd_eval_loss, scale_lr_for_steps, train_lm, train_qat
from silq.export import export_checkpoint, export_model, load_exported, parity, random_prompts
from silq.model import (ModelConfig, build_quantized_model, calibrate_activations, eval_loss,
                        eval_perplexity, init_weights, next_token_loss)
from silq.quant import (QuantizerSpec, backward_lsq_step, backward_ste, pack_int4, quantize_fake, unpack_int4,
                        weight_spec)
from silq.rotation import decompose
from silq.tensor import default_dtype

f32 = np.float32


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE criterion {n}: {'PASS' if ok else 'FAIL'} -- {detail}", flush=True)
        assert ok, detail
    return report


# ---------------------------------------------------------------------------
# 1. quantizer oracle equivalence
# ---------------------------------------------------------------------------

def scalar_quantize(x, s, bits):
    """Reference quantizer on Python floats; each arithmetic result is rounded to f32 once.

    Python's round() returns an int and drops the sign of zero, so it is restored
    with copysign to keep the comparison bit-exact rather than merely value-equal.
    """
    v = float(f32(float(x) / float(s)))
    v = min(max(v, -(2 ** (bits - 1))), 2 ** (bits - 1) - 1)
    return f32(math.copysign(round(v), v) * float(s))


def test_criterion_1_quantizer_oracle(verdict):
    rng = np.random.default_rng(2024)
    n = 100_000
    x = (rng.standard_normal(n) * 10 ** rng.uniform(-2, 2, n)).astype(f32)
    s = (10 ** rng.uniform(-3, 0, n)).astype(f32)
    bits = rng.choice([2, 4, 8, 16], n)
    t0 = time.perf_counter()
    mismatches = 0
    for p in (2, 4, 8, 16):
        idx = np.flatnonzero(bits == p)
        got = quantize_fake(x[idx, None], s[idx], weight_spec(p)).reshape(-1)
        want = np.array([scalar_quantize(x[i], s[i], p) for i in idx], dtype=f32)
        mismatches += int(np.sum(got.view(np.uint32) != want.view(np.uint32)))
    dt = time.perf_counter() - t0
    verdict(1, mismatches == 0 and dt < 5.0,
            f"{n} cases, {mismatches} bit mismatches, {dt:.2f}s (limit 5s)")


# ---------------------------------------------------------------------------
# 2. gradient suite
# ---------------------------------------------------------------------------

def _far(x, s, lo, hi, gap=1e-3):
    v = x / s
    return (np.abs(v - np.floor(v) - 0.5) > gap) & (np.abs(v - lo) > gap) & (np.abs(v - hi) > gap)


def _ste_and_lsq_failures():
    rng = np.random.default_rng(7)
    bad = total = 0
    for p in (2, 4, 8):
        sp = QuantizerSpec(p)
        lo, hi = sp.lower, sp.upper
        s = 0.37
        x = rng.uniform(1.5 * lo * s, 1.5 * hi * s, 3000)
        x = x[_far(x, s, lo, hi)]
        g = rng.standard_normal(x.size)
        # data gradient: straight-through surrogate clip(x/s)*s
        h = 1e-6
        surr = lambda xx: np.clip(xx / s, lo, hi) * s
        fd = (surr(x + h) - surr(x - h)) / (2 * h) * g
        got = backward_ste(x, s, sp, g)
        bad += int((~rel_close(got, fd, 1e-3, 1e-9)).sum())
        total += x.size
        # step gradient: rounding residual frozen at s, so round is straight-through in s
        v0 = np.clip(x / s, lo, hi)
        resid = np.round(v0) - v0
        surr_s = lambda ss: np.clip(x / ss, lo, hi) * ss + resid * ss
        fd_s = (surr_s(s + 1e-6) - surr_s(s - 1e-6)) / 2e-6 * g
        per = np.array([backward_lsq_step(np.array(xi), np.array(s), sp, np.array(gi),
                                          grad_scale=False) for xi, gi in zip(x, g)])
        bad += int((~rel_close(per, fd_s, 1e-3, 1e-9)).sum())
        total += x.size
    return bad, total


def _model_fd_fraction():
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=32, max_seq_len=8)
    with default_dtype(np.float64):
        W = {k: v.astype(np.float64) for k, v in init_weights(cfg, 0, std=0.3).items()}
        m = build_quantized_model(cfg, None, W)
        tok = np.random.default_rng(0).integers(1, 32, (2, 7))
        loss_fn = lambda: next_token_loss(m, tok)
        vals = [v for _, v in m.parameters()]
        got = analytic_grads(loss_fn, vals)
        ok = total = 0
        for v, g in zip(vals, got):
            num = numeric_grad(lambda: loss_fn().data, v.data, 1e-5)
            ok += int(rel_close(g, num, 1e-3, 1e-8).sum())
            total += g.size
    return ok, total


def test_criterion_2_gradient_suite(verdict):
    t0 = time.perf_counter()
    bad, n = _ste_and_lsq_failures()
    ok, total = _model_fd_fraction()
    dt = time.perf_counter() - t0
    frac = ok / total
    verdict(2, bad == 0 and frac >= 0.99 and dt < 120,
            f"quantizer grads {n - bad}/{n} within 1e-3; model params {ok}/{total} "
            f"({frac:.4%}, need >=99%) within 1e-3; {dt:.1f}s (limit 120s)")


# ---------------------------------------------------------------------------
# 3. convex-MSE calibrator
# ---------------------------------------------------------------------------

def grid_objective(w, bits, grid):
    """Objective on a whole grid at once via sorted prefix sums (independent of approx_mse)."""
    a = np.sort(np.abs(w))
    c1 = np.concatenate([[0.0], np.cumsum(a)])
    c2 = np.concatenate([[0.0], np.cumsum(a * a)])
    n, b = a.size, mse_bound(bits)
    # an element contributes the clipping term exactly when |w| - s*b > s/sqrt(12)
    k = np.searchsorted(a, grid * (b + 1 / math.sqrt(12)), side="right")
    m = n - k
    sb = grid * b
    clip = (c2[n] - c2[k]) - 2 * sb * (c1[n] - c1[k]) + m * sb * sb
    return clip + k * grid * grid / 12


def test_criterion_3_convex_mse(verdict):
    rng = np.random.default_rng(3)
    draws = {"gaussian": rng.standard_normal, "laplace": lambda n: rng.laplace(size=n),
             "uniform": lambda n: rng.uniform(-1, 1, n)}
    worst = 0.0
    cases = 0
    for i in range(50):
        kind = list(draws)[i % 3]
        bits = (4, 8)[i % 2]
        w = draws[kind](4096)
        s = float(calibrate_weight_mse(w, bits))
        hi = np.abs(w).max() / mse_bound(bits)
        grid = np.linspace(1e-8, hi, 100_000)
        best = float(grid_objective(w, bits, grid).min())
        rel = (approx_mse(w, s, bits) - best) / best
        worst = max(worst, rel)
        cases += 1
    closed = 1.0 / (mse_bound(4) + 1 / (2 * math.sqrt(3)))
    s1 = float(calibrate_weight_mse(np.array([1.0]), 4))
    closed_err = abs(s1 - closed) / closed
    ok_mid = True
    w = rng.standard_normal(512)
    for _ in range(10_000):
        bits = int(rng.choice([2, 4, 8]))
        hi = np.abs(w).max() / mse_bound(bits) * 1.5
        s_a, s_b = rng.uniform(1e-6, hi, 2)
        mid = approx_mse(w, (s_a + s_b) / 2, bits)
        ok_mid &= mid <= (approx_mse(w, s_a, bits) + approx_mse(w, s_b, bits)) / 2 * (1 + 1e-12) + 1e-12
    verdict(3, worst <= 1e-4 and closed_err <= 1e-4 and ok_mid,
            f"{cases} vectors: worst excess over 1e5-grid min {worst:.2e} (limit 1e-4); "
            f"closed form rel err {closed_err:.1e}; midpoint convexity on 1e4 triples: {ok_mid}")


# ---------------------------------------------------------------------------
# 4. learning-rate rules
# ---------------------------------------------------------------------------

def test_criterion_4_lr_rules(verdict):
    half = scale_lr_for_steps(5e-6, 8000, 32000)
    short = scale_lr_for_steps(5e-6, 8000, 750)
    ok = half == 2.5e-6 and abs(short - 1.633e-5) / 1.633e-5 <= 0.005
    verdict(4, ok, f"8000->32000: {half:.6g} (want exactly 2.5e-6); 8000->750: {short:.6g} "
                   f"(want 1.633e-5 +-0.5%)")


# ---------------------------------------------------------------------------
# 5 + 6. desk-scale QAT experiment
# ---------------------------------------------------------------------------

DESK = ModelConfig(n_layers=2, d_model=64, n_heads=4, d_ff=256, vocab_size=256, max_seq_len=64)
# library defaults (base 5e-6 over 8000 steps), rescaled to each run length by the sqrt rule
DESK_QAT = dict(auto_lr=True, batch_size=16, seq_len=64)


class Desk:
    def __init__(self):
        t0 = time.perf_counter()
        self.pre = make_synthetic_corpus("markov-chain", 0, 200_000)
        self.sft = make_synthetic_corpus("template-dialogue", 0, 200_000)
        pre_e = make_synthetic_corpus("markov-chain", 99, 20_000)
        sft_e = make_synthetic_corpus("template-dialogue", 99, 20_000)
        self.eval = MixtureSampler(pre_e, sft_e, 0.25, seed=7).batches(8, 16, 65)
        teacher = build_quantized_model(DESK, None, init_weights(DESK, 0))
        train_lm(teacher, MixtureSampler(self.pre, self.sft, 0.25, seed=1),
                 TrainConfig(base_lr=3e-3, steps=1500, batch_size=16, seq_len=64, weight_decay=0.0))
        self.base = {k: v.copy() for k, v in teacher.state_arrays().items()}
        self.teacher = teacher
        self.teacher_ppl = eval_perplexity(teacher, self.eval)
        self.teacher_time = time.perf_counter() - t0

    def student(self, method="percentile"):
        s = build_quantized_model(DESK, "A8s-C8-W4", self.base)
        calib = MixtureSampler(self.pre, self.sft, 0.25, seed=3).batches(5, 16, 64)
        calibrate_activations(s, [b[0] for b in calib], method=method)
        return s

    def qat(self, steps, **kw):
        s = self.student()
        if steps:
            train_qat(s, self.teacher, MixtureSampler(self.pre, self.sft, 0.25, seed=2),
                      TrainConfig(steps=steps, **{**DESK_QAT, **kw}))
        return s


@pytest.fixture(scope="module")
def desk():
    return Desk()


@pytest.fixture(scope="module")
def trend(desk):
    t0 = time.perf_counter()
    ppl, students = {}, {}
    for steps in (0, 50, 200, 500):
        students[steps] = desk.qat(steps)
        ppl[steps] = eval_perplexity(students[steps], desk.eval)
    return ppl, students, desk.teacher_time + time.perf_counter() - t0


def test_criterion_5_qat_trend(desk, trend, verdict):
    ppl, _, runtime = trend
    tp = desk.teacher_ppl
    gap = {k: v / tp - 1 for k, v in ppl.items()}
    decreasing = gap[50] > gap[200] > gap[500]
    close = ppl[500] <= 1.10 * tp
    detail = (f"teacher ppl {tp:.4f}; gap calib-only {gap[0]:+.3%}, 50 {gap[50]:+.3%}, "
              f"200 {gap[200]:+.3%}, 500 {gap[500]:+.3%}; strictly decreasing: {decreasing}; "
              f"final within 10%: {close}; {runtime:.0f}s (limit 900s)")
    verdict(5, decreasing and close and runtime < 900, detail)


def test_criterion_6_ablation_direction(desk, trend, verdict):
    _, students, _ = trend
    kd1 = kd_eval_loss(students[200], desk.teacher, desk.eval)
    kd0 = kd_eval_loss(desk.qat(200, kd_ratio=0.0), desk.teacher, desk.eval)
    pct = eval_loss(desk.student("percentile"), desk.eval)
    mx = eval_loss(desk.student("max"), desk.eval)
    verdict(6, kd1 <= kd0 and pct <= mx,
            f"200-step KD-eval loss kd_ratio=1.0 {kd1:.5f} vs 0.0 {kd0:.5f}; "
            f"step-0 eval loss percentile {pct:.5f} vs max {mx:.5f} (directional, single seed)")


# ---------------------------------------------------------------------------
# 7. rotation analyzer
# ---------------------------------------------------------------------------

def random_rotation(n, rng):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_criterion_7_rotation(verdict):
    rng = np.random.default_rng(11)
    W0 = rng.standard_normal((64, 48))
    pure = decompose(W0, random_rotation(64, rng) @ W0).non_rotational
    # tall matrix rotated on its short side: the rotation has far fewer degrees of freedom
    # than the noise, so the planted residual should be recovered almost entirely
    Wt = rng.standard_normal((512, 16))
    noise = 0.05 * rng.standard_normal(Wt.shape)
    noisy = decompose(Wt, Wt @ random_rotation(16, rng) + noise)
    planted = np.linalg.norm(noise) / np.linalg.norm(Wt)
    noise_err = abs(noisy.non_rotational - planted) / planted
    ordered = True
    for _ in range(10_000):
        r, c = rng.integers(1, 7, 2)
        e = decompose(rng.standard_normal((r, c)), rng.standard_normal((r, c)))
        ordered &= e.procrustes <= e.frobenius
    verdict(7, pure < 1e-6 and noise_err <= 0.2 and ordered,
            f"pure rotation non_rot {pure:.2e} (limit 1e-6); noisy non_rot {noisy.non_rotational:.4f} "
            f"vs planted {planted:.4f} ({noise_err:.1%}, limit 20%); d_p <= d_f on 1e4 pairs: {ordered}")


# ---------------------------------------------------------------------------
# 8. export parity and round trips
# ---------------------------------------------------------------------------

def test_criterion_8_export(tmp_path, verdict):
    cfg = ModelConfig(n_layers=2, d_model=64, n_heads=4, d_ff=256, max_seq_len=64)
    m = build_quantized_model(cfg, "A8s-C8-W4", init_weights(cfg, 5, std=0.05))
    rng = np.random.default_rng(5)
    calibrate_activations(m, [rng.integers(0, 256, (4, 64)) for _ in range(3)])
    prompts = random_prompts(cfg, 16, seed=1)
    diff = export_model(m, tmp_path / "export", prompts, tol=1e-5)
    reparity = parity(m, load_exported(tmp_path / "export"), prompts)

    ckpt.save(tmp_path / "a", export_checkpoint(m))
    ckpt.save(tmp_path / "b", ckpt.load(tmp_path / "a"))
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in (ckpt.MANIFEST, ckpt.PAYLOAD))
    vals = np.concatenate([np.arange(-8, 8), rng.integers(-8, 8, 1001)])
    int4 = np.array_equal(unpack_int4(pack_int4(vals), vals.size), vals)
    verdict(8, diff <= 1e-5 and reparity == diff and same and int4,
            f"max |logit diff| {diff:.2e} over 16 prompts (limit 1e-5); checkpoint re-save "
            f"byte-identical: {same}; int4 round-trip exact: {int4}")


# ---------------------------------------------------------------------------
# 9. determinism of the CLI pipeline
# ---------------------------------------------------------------------------

PIPE = {
    "seed": 17,
    "model": {"n_layers": 2, "d_model": 32, "n_heads": 2, "d_ff": 64, "max_seq_len": 32},
    "data": {"pretrain": {"size": 20_000}, "sft": {"size": 20_000},
             "eval_pretrain": {"size": 5000}, "eval_sft": {"size": 5000}},
    "pretrain": {"base_lr": 3e-3, "steps": 50, "batch_size": 8, "seq_len": 32, "weight_decay": 0.0},
    "calib": {"batches": 5, "batch_size": 8, "seq_len": 32},
    "train": {"base_lr": 1e-4, "base_steps": 100, "steps": 100, "batch_size": 4, "seq_len": 32},
    "eval": {"batches": 2, "batch_size": 8, "seq_len": 32},
}


def run_pipeline(d):
    d.mkdir()
    cfg = d / "config.json"
    cfg.write_text(json.dumps(PIPE))
    codes = [cli_main([c, "--config", str(cfg)]) for c in ("pretrain", "calibrate", "train", "eval")]
    files = {}
    for name in ("teacher", "calibrated", "trained"):
        files[name] = (d / name / ckpt.PAYLOAD).read_bytes()
    files["metrics"] = (d / "metrics.jsonl").read_bytes()
    files["eval"] = (d / "eval.json").read_text().replace(str(d), "")
    return codes, files


def test_criterion_9_determinism(tmp_path, capsys, verdict):
    codes_a, a = run_pipeline(tmp_path / "a")
    codes_b, b = run_pipeline(tmp_path / "b")
    capsys.readouterr()
    records = a["metrics"].decode().count("\n")
    same = {k: a[k] == b[k] for k in a}
    verdict(9, codes_a == codes_b == [0, 0, 0, 0] and all(same.values()) and records == 100,
            f"exit codes {codes_a}/{codes_b}; identical: {same}; {records} metric records")
