"""Semantic bit allocation as an MDP, trained with single-rollout REINFORCE.

One episode codes the M concepts of one image in class order. The state for
step m is (f^(m), s^(m), m); the action is a quantisation level; the reward
is the drop in the rate-semantic-perceptual loss caused by re-coding concept
m at that level. Concepts not yet visited stay at level 1.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .codec import NUM_LEVELS, encode_label_map, label_bits_length
from .core import ParamBlock, RngStream, Tensor, gradients, ops
from .criterion import CriterionReport, CriterionWeights, PerceptualExtractor, make_report, \
    miou_loss
from .decoder import CodecModel, upsample_cells
from .pipeline import Analysis, analyze, concept_bits, quantized_cells
from .semantic import ColorOracle, SceneSample

log = logging.getLogger(__name__)

MAX_ENUMERATION = 4096
# Step size used by the CLI and the acceptance run; the library default keeps 1e-5.
DESK_AGENT_ALPHA = 3e-2


class StaleTrajectoryError(ValueError):
    pass


class FrozenModelError(RuntimeError):
    pass


# --- environment ---------------------------------------------------------
@dataclass
class AllocState:
    features: np.ndarray     # n x h x w, f^(m)
    mask: np.ndarray         # H x W, s^(m)
    step: int                # 1-based m
    vector: np.ndarray       # policy input


@dataclass
class StepResult:
    image: np.ndarray
    report: CriterionReport
    reward: float


class AllocationEnv:
    """Deterministic per-image environment; caches everything the frozen model gives.

    ``levels`` maps action indices to quantisation levels (default 1..6).
    """

    def __init__(self, model: CodecModel, sample: SceneSample, oracle: ColorOracle,
                 extractor: PerceptualExtractor,
                 weights: CriterionWeights = CriterionWeights(),
                 levels: tuple[int, ...] = tuple(range(1, NUM_LEVELS + 1))):
        self.model = model
        self.sample = sample
        self.oracle = oracle
        self.extractor = extractor
        self.weights = weights
        self.levels = tuple(levels)
        self.M = model.M
        a: Analysis = analyze(model, sample.image, sample.labels)
        self.analysis = a
        self.HW = sample.labels.size
        self.label_bits = label_bits_length(encode_label_map(sample.labels))
        self.bits = {(m, q): concept_bits(a, m, q)
                     for m in range(1, self.M + 1) for q in set(self.levels) | {1}}
        self.gt = oracle.segment(sample.image)
        self._ref_feats = [f.data for f in extractor.features(sample.image)]
        self._states = [self._make_state(m) for m in range(1, self.M + 1)]
        self._regions = [upsample_cells((a.cell_labels == m).astype(float).ravel(), a.h, a.w)
                         .astype(bool) for m in range(1, self.M + 1)]
        self.init_levels = [1] * self.M
        self.init_image = self.decode(self.init_levels)
        self.init_rate = self.rate(self.init_levels)
        self.init_report = self.evaluate(self.init_image, self.init_levels)

    # -- pieces -----------------------------------------------------------
    def _make_state(self, m: int) -> AllocState:
        a = self.analysis
        fm = a.concept_map(m)
        sel = (a.cell_labels == m)
        if sel.any():
            vals = fm[:, sel]
            pooled = np.concatenate([vals.mean(axis=1), vals.max(axis=1)])
        else:
            pooled = np.zeros(2 * a.n)
        step = np.zeros(self.M)
        step[m - 1] = 1.0
        vec = np.concatenate([pooled, sel.astype(float).ravel(), step])
        return AllocState(fm, (self.sample.labels == m).astype(np.int64), m, vec)

    def state(self, m: int) -> AllocState:
        return self._states[m - 1]

    @property
    def state_dim(self) -> int:
        return len(self._states[0].vector)

    def decode(self, levels) -> np.ndarray:
        cells = quantized_cells(self.analysis, levels)
        return self.model.reconstruct(cells, self.analysis.cell_labels)

    def rate(self, levels) -> float:
        bits = self.label_bits + sum(self.bits[(m, q)] for m, q in enumerate(levels, 1))
        return bits / self.HW

    def perceptual(self, image: np.ndarray) -> float:
        total = 0.0
        for ref, f in zip(self._ref_feats, self.extractor.features(image)):
            total += float(np.mean((ref - f.data) ** 2))
        return total

    def evaluate(self, image: np.ndarray, levels) -> CriterionReport:
        """Report with the absolute rate psi (bpp) of the given level assignment."""
        ls = miou_loss(self.gt, self.oracle.segment(image), self.M)
        return make_report(self.rate(levels), ls, self.perceptual(image), self.weights)

    def step_loss(self, report: CriterionReport) -> float:
        """L^(m): rate enters as the increase over the all-level-1 initialisation."""
        w = self.weights
        return (w.lam * (report.rate - self.init_rate) + report.semantic
                + w.eta * report.perceptual)

    def step(self, levels: list[int], image: np.ndarray, m: int, action: int) -> StepResult:
        """Re-code concept m at ``self.levels[action]``; only its region of the image changes.

        ``levels`` is updated in place; ``image`` is x_hat^(m-1).
        """
        prev_report = self.evaluate(image, levels)
        levels[m - 1] = self.levels[action]
        decoded = self.decode(levels)
        region = self._regions[m - 1]
        new_image = np.where(region[None], decoded, image)
        report = self.evaluate(new_image, levels)
        reward = self.step_loss(prev_report) - self.step_loss(report)
        return StepResult(new_image, report, reward)

    def run_levels(self, levels) -> CriterionReport:
        return self.evaluate(self.decode(list(levels)), list(levels))


# --- policy --------------------------------------------------------------
@dataclass
class PolicySpec:
    input_dim: int
    num_actions: int = NUM_LEVELS
    hidden: tuple[int, int] = (64, 32)
    alpha: float = 1e-5
    dropout: float = 0.0
    seed: int = 0
    zero_output: bool = True


class Policy:
    """Three fully connected layers with ReLU and dropout, softmax over levels."""

    def __init__(self, spec: PolicySpec):
        self.spec = spec
        gen = RngStream(spec.seed, 0x9011C7).generator()
        h1, h2 = spec.hidden
        d, q = spec.input_dim, spec.num_actions
        out_w = np.zeros((h2, q)) if spec.zero_output else gen.normal(0, 1 / np.sqrt(h2), (h2, q))
        self.params = ParamBlock({
            "W1": gen.normal(0.0, np.sqrt(2.0 / d), size=(d, h1)), "b1": np.zeros(h1),
            "W2": gen.normal(0.0, np.sqrt(2.0 / h1), size=(h1, h2)), "b2": np.zeros(h2),
            "W3": out_w, "b3": np.zeros(q),
        })

    def logits(self, x, masks: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
        p = self.params
        h = ops.relu(ops.as_tensor(np.asarray(x, dtype=np.float64)[None]) @ p["W1"] + p["b1"])
        if masks is not None:
            h = h * masks[0]
        h = ops.relu(h @ p["W2"] + p["b2"])
        if masks is not None:
            h = h * masks[1]
        return (h @ p["W3"] + p["b3"]).reshape(-1)

    def probs(self, x, masks=None) -> np.ndarray:
        return ops.softmax(self.logits(x, masks)).data

    def dropout_masks(self, gen: np.random.Generator):
        r = self.spec.dropout
        if r <= 0:
            return None
        h1, h2 = self.spec.hidden
        keep = 1.0 - r
        return ((gen.random(h1) < keep) / keep, (gen.random(h2) < keep) / keep)

    def fingerprint(self) -> int:
        return self.params.fingerprint()


def policy_forward(state: AllocState, policy: Policy) -> np.ndarray:
    """Action distribution for ``state`` (evaluation mode, no dropout)."""
    return policy.probs(state.vector)


@dataclass
class AllocAction:
    level: int
    index: int


def sample_action(probs, gen: np.random.Generator,
                  levels: tuple[int, ...] | None = None) -> tuple[AllocAction, float]:
    """Inverse-CDF draw; returns the action and log(probs[action])."""
    probs = np.asarray(probs, dtype=np.float64)
    u = gen.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    idx = min(idx, len(probs) - 1)
    while probs[idx] == 0.0 and idx > 0:  # guard against cumsum rounding onto a zero bin
        idx -= 1
    level = (levels[idx] if levels is not None else idx + 1)
    return AllocAction(level, idx), float(np.log(probs[idx]))


# --- trajectories --------------------------------------------------------
@dataclass
class TrajectoryStep:
    state: AllocState
    action: AllocAction
    log_prob: float
    reward: float
    report: CriterionReport
    masks: tuple[np.ndarray, np.ndarray] | None = None


@dataclass
class Trajectory:
    steps: list[TrajectoryStep]
    gamma: float
    fingerprint: int
    init_report: CriterionReport
    init_loss: float
    final_image: np.ndarray | None = None

    @property
    def rewards(self) -> list[float]:
        return [s.reward for s in self.steps]

    @property
    def G(self) -> float:
        return discounted_return(self.rewards, self.gamma)

    @property
    def final_report(self) -> CriterionReport:
        return self.steps[-1].report

    @property
    def levels(self) -> list[int]:
        return [s.action.level for s in self.steps]


def discounted_return(rewards, gamma: float) -> float:
    """sum_{m=1..M} gamma^m r^(m+1); the first reward is already discounted once."""
    r = np.asarray(rewards, dtype=np.float64)
    return float((gamma ** np.arange(1, len(r) + 1) * r).sum())


def rollout(env: AllocationEnv, policy: Policy, gen: np.random.Generator | None = None,
            gamma: float = 0.99, greedy: bool = False,
            actions: list[int] | None = None, train: bool = False) -> Trajectory:
    """Run one episode. ``actions`` (indices) forces a fixed action sequence."""
    levels = list(env.init_levels)
    image = env.init_image
    steps = []
    for m in range(1, env.M + 1):
        st = env.state(m)
        masks = policy.dropout_masks(gen) if (train and gen is not None) else None
        probs = policy.probs(st.vector, masks)
        if actions is not None:
            idx = actions[m - 1]
            act, lp = AllocAction(env.levels[idx], idx), float(np.log(probs[idx]))
        elif greedy:
            idx = int(np.argmax(probs))
            act, lp = AllocAction(env.levels[idx], idx), float(np.log(probs[idx]))
        else:
            act, lp = sample_action(probs, gen, env.levels)
        res = env.step(levels, image, m, act.index)
        image = res.image
        steps.append(TrajectoryStep(st, act, lp, res.reward, res.report, masks))
    init_loss = env.step_loss(env.init_report)
    return Trajectory(steps, gamma, policy.fingerprint(), env.init_report, init_loss, image)


def sum_log_prob_tensor(traj: Trajectory, policy: Policy) -> Tensor:
    total = ops.as_tensor(0.0)
    for s in traj.steps:
        logp = ops.log_softmax(policy.logits(s.state.vector, s.masks))
        total = total + logp[s.action.index]
    return total


def reinforce_gradient(traj: Trajectory, policy: Policy,
                       baseline: float = 0.0) -> dict[str, np.ndarray]:
    """(G - baseline) * sum_m grad log pi(a_m | s_m), for the policy that produced ``traj``."""
    if traj.fingerprint != policy.fingerprint():
        raise StaleTrajectoryError("policy parameters changed since this trajectory was sampled")
    g = gradients(sum_log_prob_tensor(traj, policy), policy.params)
    scale = traj.G - baseline
    return {k: scale * v for k, v in g.items()}


def update_policy(policy: Policy, grad: dict[str, np.ndarray], alpha: float) -> None:
    """Gradient ascent step theta <- theta + alpha * grad, in place."""
    for name, t in policy.params.items():
        if grad[name].shape != t.shape:
            raise ValueError(f"{name}: gradient shape {grad[name].shape} != {t.shape}")
        t.data = t.data + alpha * grad[name]


# --- exact objective on tiny MDPs ---------------------------------------
@dataclass
class ExactResult:
    J: float
    probabilities: dict[tuple[int, ...], float]
    returns: dict[tuple[int, ...], float]


def _check_size(env: AllocationEnv) -> None:
    Q, M = len(env.levels), env.M
    if Q ** M > MAX_ENUMERATION:
        raise ValueError(f"{Q}^{M} trajectories exceeds the enumeration limit {MAX_ENUMERATION}")


def enumerate_returns(env: AllocationEnv, gamma: float = 0.99) -> dict[tuple[int, ...], float]:
    """G of every action-index sequence; transitions are deterministic so G ignores theta."""
    _check_size(env)
    dummy = Policy(PolicySpec(env.state_dim, len(env.levels)))
    return {seq: rollout(env, dummy, gamma=gamma, actions=list(seq)).G
            for seq in itertools.product(range(len(env.levels)), repeat=env.M)}


def exact_J_oracle(env: AllocationEnv, policy: Policy, gamma: float = 0.99,
                   returns: dict[tuple[int, ...], float] | None = None) -> ExactResult:
    """Enumerate every action sequence: J = sum_T P(T) G(T).

    P(T) is the product of the policy's action probabilities along T.
    ``returns`` may be passed in from :func:`enumerate_returns` to skip the rollouts.
    """
    _check_size(env)
    returns = enumerate_returns(env, gamma) if returns is None else returns
    probs = [policy.probs(env.state(m).vector) for m in range(1, env.M + 1)]
    P = {seq: float(np.prod([probs[m][a] for m, a in enumerate(seq)])) for seq in returns}
    J = sum(P[seq] * returns[seq] for seq in returns)
    return ExactResult(float(J), P, dict(returns))


def expected_reinforce_gradient(env: AllocationEnv, policy: Policy,
                                gamma: float = 0.99) -> dict[str, np.ndarray]:
    """Probability-weighted mean of the single-rollout estimator over all trajectories."""
    _check_size(env)
    probs = [policy.probs(env.state(m).vector) for m in range(1, env.M + 1)]
    acc = {k: np.zeros_like(v) for k, v in policy.params.values().items()}
    for seq in itertools.product(range(len(env.levels)), repeat=env.M):
        p = float(np.prod([probs[m][a] for m, a in enumerate(seq)]))
        traj = rollout(env, policy, gamma=gamma, actions=list(seq))
        for k, v in reinforce_gradient(traj, policy).items():
            acc[k] += p * v
    return acc


# --- training --------------------------------------------------------------
@dataclass
class AgentConfig:
    episodes: int = 200
    gamma: float = 0.99
    alpha: float = 1e-5
    dropout: float = 0.0
    baseline: bool = False
    baseline_decay: float = 0.9
    seed: int = 0
    weights: CriterionWeights = field(default_factory=CriterionWeights)


@dataclass
class AgentLog:
    rows: list[dict] = field(default_factory=list)

    def epoch_means(self) -> list[dict]:
        out = {}
        for r in self.rows:
            out.setdefault(r["epoch"], []).append(r)
        return [{"epoch": e, "G": float(np.mean([r["G"] for r in rs])),
                 "L": float(np.mean([r["L"] for r in rs]))} for e, rs in sorted(out.items())]


def build_envs(model: CodecModel, samples: list[SceneSample], oracle: ColorOracle,
               extractor: PerceptualExtractor,
               weights: CriterionWeights = CriterionWeights()) -> list[AllocationEnv]:
    return [AllocationEnv(model, s, oracle, extractor, weights) for s in samples]


def train_agent(envs: list[AllocationEnv], config: AgentConfig = AgentConfig(),
                policy: Policy | None = None) -> tuple[Policy, AgentLog]:
    """Per episode: roll out once, compute G, take one ascent step."""
    if not envs:
        raise ValueError("no training environments")
    model = envs[0].model
    if not model.frozen:
        raise FrozenModelError("encoder/decoder must be frozen before training the agent")
    if policy is None:
        policy = Policy(PolicySpec(envs[0].state_dim, len(envs[0].levels), alpha=config.alpha,
                                   dropout=config.dropout, seed=config.seed))
    gen = RngStream(config.seed, 0xA6E47).generator()
    history = AgentLog()
    baseline = 0.0
    order = []
    for ep in range(config.episodes):
        if not order:
            order = list(gen.permutation(len(envs)))
        env = envs[order.pop()]
        traj = rollout(env, policy, gen, config.gamma, train=True)
        b = baseline if config.baseline else 0.0
        grad = reinforce_gradient(traj, policy, b)
        update_policy(policy, grad, config.alpha)
        if config.baseline:
            baseline = config.baseline_decay * baseline + (1 - config.baseline_decay) * traj.G
        rep = traj.final_report
        history.rows.append(dict(epoch=ep // len(envs), episode=ep, G=traj.G, psi=rep.rate,
                                 L_S=rep.semantic, L_P=rep.perceptual, L=rep.composite))
    model.stage = max(model.stage, 2)
    return policy, history


def evaluate_policy(envs: list[AllocationEnv], policy: Policy) -> float:
    """Mean composite L of greedy (argmax) allocations."""
    return float(np.mean([rollout(e, policy, greedy=True).final_report.composite for e in envs]))


def evaluate_uniform(envs: list[AllocationEnv], level: int) -> float:
    return float(np.mean([e.run_levels([level] * e.M).composite for e in envs]))
