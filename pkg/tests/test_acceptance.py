"""End-to-end acceptance checks, one test per criterion.

Each test appends a PASS/FAIL line that is printed in the terminal summary
(and to stdout with ``-s``). The desk run uses seed DESK_SEED.
"""
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from rlasc.codec import (
    QuantizerSpec,
    deserialize,
    empirical_entropy,
    huffman_build,
    huffman_decode,
    huffman_encode,
    quantize_hard,
    quantize_soft,
    rate_psi,
    serialize,
)
from rlasc.core import ParamBlock, RngStream, gradients
from rlasc.criterion import (
    CriterionWeights,
    PerceptualExtractor,
    composite_loss,
    det_loss,
    iou,
    miou_loss,
)
from rlasc.decoder import attention_fuse, attention_weights, hinge_losses
from rlasc.harness import ChannelSpec, bd_metric
from rlasc.harness.config import ExperimentConfig
from rlasc.harness.experiment import agent_set, eval_set, run_stage1, run_stage2, run_stage3, \
    task_oracle, train_set
from rlasc.harness.sweep import evaluate_set, policy_levels
from rlasc.rl import (
    AllocationEnv,
    Policy,
    build_envs,
    PolicySpec,
    enumerate_returns,
    evaluate_policy,
    evaluate_uniform,
    exact_J_oracle,
    expected_reinforce_gradient,
    rollout,
)
from rlasc.semantic import TaskPrediction
from rlasc.training import mean_perceptual
from tests.conftest import ACCEPTANCE_LINES, norm_rel_err
from tests.test_codec import _best_prefix_cost, random_stream

DESK_SEED = 0


@contextmanager
def criterion(number: int, title: str, budget: float | None = None):
    start = time.perf_counter()
    detail = {}
    ok = False
    try:
        yield detail
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        if budget is not None and elapsed >= budget:
            ok = False
            detail["runtime"] = f"over budget {budget:.0f}s"
        info = ", ".join(f"{k}={v}" for k, v in detail.items())
        line = f"#{number} {'PASS' if ok else 'FAIL'} {title} ({elapsed:.1f}s) {info}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
    assert budget is None or elapsed < budget, f"criterion {number} took {elapsed:.1f}s"


@pytest.fixture(scope="module")
def desk():
    """Stage I model trained once on the seeded desk dataset."""
    cfg = ExperimentConfig(seed=DESK_SEED)
    ext = PerceptualExtractor()
    start = time.perf_counter()
    model, log = run_stage1(cfg, extractor=ext)
    return {"cfg": cfg, "model": model, "log": log, "extractor": ext,
            "oracle": task_oracle(cfg), "stage1_seconds": time.perf_counter() - start}


@pytest.fixture(scope="module")
def agent(desk):
    start = time.perf_counter()
    policy, log, envs = run_stage2(desk["cfg"], desk["model"], desk["oracle"], desk["extractor"])
    return {"policy": policy, "log": log, "envs": envs,
            "seconds": time.perf_counter() - start}


# 1 ------------------------------------------------------------------------
def test_01_quantizer_limit():
    with criterion(1, "soft->hard limit and soft-quantiser gradient", budget=5) as d:
        gen = RngStream(DESK_SEED, 1).generator()
        worst = 0.0
        for q in range(1, 7):
            spec = QuantizerSpec(q, sigma=1e4)
            c = spec.centers
            x = gen.uniform(-1, 1, 100_000)
            mids = (c[1:] + c[:-1]) / 2
            x = x[np.min(np.abs(x[:, None] - mids[None]), axis=1) >= 1e-3]
            diff = np.abs(quantize_soft(x, spec).data - quantize_hard(x, spec)[0])
            worst = max(worst, float(diff.max()))
        d["max_soft_hard"] = f"{worst:.2e}"
        assert worst < 1e-4

        worst_grad = 0.0
        for q in range(1, 7):
            spec = QuantizerSpec(q, sigma=10.0)
            x = gen.uniform(-0.99, 0.99, 500)
            block = ParamBlock({"x": x})
            g = gradients(quantize_soft(block["x"], spec).sum(), block)["x"]
            h = 1e-6
            fd = (quantize_soft(x + h, spec).data - quantize_soft(x - h, spec).data) / (2 * h)
            worst_grad = max(worst_grad,
                             float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3))))
        d["grad_rel_err"] = f"{worst_grad:.2e}"
        assert worst_grad < 1e-5


# 2 ------------------------------------------------------------------------
def test_02_entropy_coding():
    with criterion(2, "Huffman round trip, optimality, entropy bound", budget=10) as d:
        gen = RngStream(DESK_SEED, 2).generator()
        gaps = []
        for _ in range(1000):
            q = int(gen.integers(1, 7))
            grid = gen.choice(2 ** q, size=(int(gen.integers(1, 9)), 4, 8),
                              p=gen.dirichlet(np.ones(2 ** q) * 0.5))
            table = huffman_build(grid)
            res = huffman_decode(huffman_encode(grid, table), table, grid.size)
            assert not res.corrupted and np.array_equal(res.symbols, grid.ravel())
            if len(np.unique(grid)) > 1:
                H = empirical_entropy(grid)
                mean = table.coded_length(grid) / grid.size
                assert H - 1e-12 <= mean < H + 1
                gaps.append(mean - H)
        d["max_redundancy"] = f"{max(gaps):.3f}"
        checked = 0
        for _ in range(300):
            k = int(gen.integers(1, 5))
            freqs = dict(zip(gen.choice(64, k, replace=False).tolist(),
                             gen.integers(1, 60, k).tolist()))
            syms = np.repeat(list(freqs), list(freqs.values()))
            assert huffman_build(syms).coded_length(syms) == _best_prefix_cost(freqs)
            checked += 1
        d["optimality_cases"] = checked


# 3 ------------------------------------------------------------------------
def test_03_bitstream():
    with criterion(3, "bit-exact container round trip and rate accounting") as d:
        gen = RngStream(DESK_SEED, 3).generator()
        for _ in range(500):
            bs = random_stream(gen)
            data = serialize(bs)
            back = deserialize(data)
            assert back == bs and serialize(back) == data
            emitted = sum(len(s.payload) for s in bs.segments) + 32 + 24 * len(bs.label_entries)
            assert rate_psi(bs) == emitted / (bs.H * bs.W)
        d["streams"] = 500


# 4 ------------------------------------------------------------------------
def test_04_reward_telescoping(desk):
    with criterion(4, "reward telescoping at gamma = 1") as d:
        model = desk["model"]
        model.frozen = True
        samples = agent_set(desk["cfg"])
        pol = Policy(PolicySpec(2 * model.n + model.scene.h * model.scene.w + model.M,
                                zero_output=False, seed=DESK_SEED))
        worst = 0.0
        for ep in range(100):
            env = AllocationEnv(model, samples[ep % len(samples)], desk["oracle"],
                                desk["extractor"])
            traj = rollout(env, pol, RngStream(DESK_SEED, 400 + ep).generator(), gamma=1.0)
            total = env.step_loss(traj.init_report) - env.step_loss(traj.final_report)
            worst = max(worst, abs(traj.G - total))
        d["max_abs_err"] = f"{worst:.1e}"
        assert worst < 1e-9


# 5 ------------------------------------------------------------------------
def test_05_policy_gradient(tiny_env):
    with criterion(5, "expected REINFORCE estimate vs finite-difference grad J", budget=30) as d:
        pol = Policy(PolicySpec(tiny_env.state_dim, 2, zero_output=False, seed=DESK_SEED))
        returns = enumerate_returns(tiny_env, 0.99)
        expected = expected_reinforce_gradient(tiny_env, pol, 0.99)
        fd = {}
        for name, t in pol.params.items():
            out = np.zeros_like(t.data)
            for i in np.ndindex(t.shape):
                old = t.data[i]
                t.data[i] = old + 1e-6
                up = exact_J_oracle(tiny_env, pol, 0.99, returns).J
                t.data[i] = old - 1e-6
                down = exact_J_oracle(tiny_env, pol, 0.99, returns).J
                t.data[i] = old
                out[i] = (up - down) / 2e-6
            fd[name] = out
        err = norm_rel_err(expected, fd)
        d["rel_err"] = f"{err:.1e}"
        assert err < 1e-4


# 6 ------------------------------------------------------------------------
def test_06_rl_efficacy(desk, agent):
    with criterion(6, "learned allocation vs uniform levels", budget=600) as d:
        envs = agent["envs"]
        learned = evaluate_policy(envs, agent["policy"])
        uniform = {q: evaluate_uniform(envs, q) for q in range(1, 7)}
        best = min(uniform.values())
        d["L_learned"] = f"{learned:.4f}"
        d["L_coarsest"] = f"{uniform[1]:.4f}"
        d["L_best_uniform"] = f"{best:.4f}"
        d["train_s"] = f"{agent['seconds']:.1f}"
        assert len(envs) == 64 and len(agent["log"].rows) == 200
        assert learned <= uniform[1]
        assert learned <= 1.05 * best


# 7 ------------------------------------------------------------------------
def test_07_loss_unit_suite():
    with criterion(7, "criterion and decoder edge cases") as d:
        here = Path(__file__).parent
        proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                               str(here / "test_criterion.py"), str(here / "test_decoder.py")],
                              capture_output=True, text=True, cwd=here.parent)
        d["unit_suite"] = proc.stdout.strip().splitlines()[-1] if proc.stdout else "no output"
        assert proc.returncode == 0, proc.stdout[-2000:]
        e = np.zeros(4, bool)
        a = np.array([1, 1, 0, 0], bool)
        assert iou(e, e) == 1.0 and iou(a, a) == 1.0 and iou(a, ~a) == 0.0
        assert iou([1, 1, 0], [0, 1, 1]) == 1 / 3
        lab = np.array([[1, 1, 2, 2]])
        P = lambda x: TaskPrediction(labels=x)  # noqa: E731
        assert miou_loss(P(lab), P(lab), 2) == 0.0 and miou_loss(P(lab), P(3 - lab), 2) == 1.0
        assert det_loss(P(lab), P(lab), 2) == 0.0
        assert det_loss(P(lab), P(3 - lab), 2) == pytest.approx(18.420680743952367)
        assert hinge_losses(1.0, -1.0)[0] == 0.0 and hinge_losses(0.0, 0.0)[0] == 2.0
        assert composite_loss(0.1, 0.2, 0.03) == pytest.approx(0.6)
        assert composite_loss(0.1, 0.2, 0.03, CriterionWeights(0, 0)) == 0.2
        f = RngStream(DESK_SEED, 7).generator().normal(size=(32, 8))
        att = ParamBlock({"W": RngStream(DESK_SEED, 8).generator().normal(size=(8, 2)),
                          "b": np.zeros(2)})
        wl, wg = attention_weights(f, att)
        assert np.allclose(wl.data + wg.data, 1.0, atol=1e-15)
        x = np.ones((3, 2, 2))
        with pytest.raises(ValueError):
            attention_fuse(x, x, np.full((2, 2), 0.7), np.full((2, 2), 0.7))
        d["inline_checks"] = 15


# 8 ------------------------------------------------------------------------
def test_08_stage1_training(desk):
    with criterion(8, "Stage I perceptual loss reduction") as d:
        cfg = desk["cfg"]
        from rlasc.decoder import CodecModel
        probe = train_set(cfg)[:32]
        init = mean_perceptual(CodecModel(cfg.scene, n=cfg.n, seed=cfg.seed), probe,
                               desk["extractor"])
        final = mean_perceptual(desk["model"], probe, desk["extractor"])
        d["L_P_init"] = f"{init:.4f}"
        d["L_P_final"] = f"{final:.4f}"
        d["ratio"] = f"{final / init:.3f}"
        d["seed"] = cfg.seed
        d["train_s"] = f"{desk['stage1_seconds']:.1f}"
        assert final <= 0.5 * init


# 9 ------------------------------------------------------------------------
def test_09_anti_noise(desk, agent):
    with criterion(9, "oracle mIoU vs channel SNR", budget=300) as d:
        model, oracle, ext = desk["model"], desk["oracle"], desk["extractor"]
        samples = eval_set(desk["cfg"], 100)
        levels = {id(s): policy_levels("learned", model, s, agent["policy"], oracle, ext)
                  for s in samples}
        fn = lambda s: levels[id(s)]  # noqa: E731

        def miou(channel):
            return float(np.mean([r.miou for r in evaluate_set(model, samples, fn, oracle, ext,
                                                                channel, DESK_SEED)]))

        clean = miou(ChannelSpec())
        curve = [miou(ChannelSpec("awgn", snr)) for snr in (0, 3, 6, 9, 12, 15)]
        d["lossless"] = f"{clean:.4f}"
        d["by_snr"] = "/".join(f"{v:.3f}" for v in curve)
        assert all(b >= a for a, b in zip(curve, curve[1:]))
        assert abs(curve[-1] - clean) <= 0.02 * clean


# 10 -----------------------------------------------------------------------
def test_10_bd_metrics():
    with criterion(10, "Bjontegaard deltas") as d:
        rates = np.array([0.25, 0.5, 1.0, 2.0, 4.0])
        qual = np.array([0.31, 0.47, 0.58, 0.64, 0.67])
        zero = (bd_metric((rates, qual), (rates, qual), "bd-rate"),
                bd_metric((rates, qual), (rates, qual), "bd-quality"))
        doubled = bd_metric((rates, qual), (2 * rates, qual), "bd-rate")
        delta = 0.037
        shifted = bd_metric((rates, qual), (rates, qual + delta), "bd-quality")
        d["doubled"] = f"{doubled:.6f}"
        d["offset"] = f"{shifted:.9f}"
        assert abs(zero[0]) < 1e-9 and abs(zero[1]) < 1e-12
        assert abs(doubled - 100.0) <= 0.1
        assert abs(shifted - delta) <= 1e-6


# Stage III runs last because it updates the shared model and policy in place.
def test_stage3_does_not_regress(desk, agent):
    model, oracle, ext = desk["model"], desk["oracle"], desk["extractor"]
    before = evaluate_policy(agent["envs"], agent["policy"])
    model, policy, log = run_stage3(desk["cfg"], model, agent["policy"], oracle, ext)
    model.frozen = True
    after = evaluate_policy(build_envs(model, agent_set(desk["cfg"]), oracle, ext), policy)
    print(f"stage III: L {before:.4f} -> {after:.4f}")
    assert model.stage == 3 and len(log.rows) == desk["cfg"].stage3_steps
    assert after <= before
