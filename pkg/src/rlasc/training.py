"""Stage I (encoder/decoder GAN training) and Stage III (joint fine-tuning)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .codec import NUM_LEVELS, QuantizerSpec, quantize_hard, quantize_ste
from .core import Adam, RngStream, gradients, ops
from .criterion import PerceptualExtractor, perceptual_loss, perceptual_loss_tensor
from .decoder import CodecModel, discriminate, hinge_d_tensor, joint_generator_loss
from .semantic import SceneSample, cells_to_map, decompose_features, extract_masks, \
    feature_class_loss

log = logging.getLogger(__name__)


# Stage I step size for the desk-scale schedule (200 alternations); see README.
DESK_STAGE1_LR = 3e-3


class StageOrderError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class Stage1Config:
    steps: int = 200
    batch: int = 4
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    lambda1: float = 10.0
    lambda2: float = 1.0
    level: int = NUM_LEVELS
    sigma: float = 10.0
    seed: int = 0
    train_generator: bool = True


@dataclass
class StageLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows])


def _check_finite(**values) -> None:
    for name, v in values.items():
        if not np.isfinite(v):
            raise DivergenceError(f"{name} became non-finite ({v})")


def class_loss_tensor(model: CodecModel, f_cells, labels: np.ndarray):
    fmap = cells_to_map(f_cells, model.scene.h, model.scene.w)
    concepts = [decompose_features(fmap, mk) for mk in extract_masks(labels, model.M)]
    return feature_class_loss(concepts, model.class_head)


def generator_forward(model: CodecModel, sample: SceneSample, spec: QuantizerSpec):
    """Encoder -> straight-through quantiser -> decoder, all on the autodiff graph."""
    f = model.encode(sample.image)
    fq = quantize_ste(f, spec)
    out = model.decode(fq, model.cell_labels(sample.labels))
    return f, out.image


def mean_perceptual(model: CodecModel, samples: list[SceneSample],
                    extractor: PerceptualExtractor, level: int = NUM_LEVELS) -> float:
    """Average L_P of hard-quantised reconstructions at a uniform level."""
    spec = QuantizerSpec(level)
    vals = []
    for s in samples:
        f = model.encode(s.image).data
        x_hat = model.reconstruct(quantize_hard(f, spec)[0], model.cell_labels(s.labels))
        vals.append(perceptual_loss(s.image, x_hat, extractor))
    return float(np.mean(vals))


def train_stage1(dataset: list[SceneSample], config: Stage1Config = Stage1Config(),
                 model: CodecModel | None = None,
                 extractor: PerceptualExtractor | None = None) -> tuple[CodecModel, StageLog]:
    """Alternate one discriminator step and one encoder/generator step per iteration."""
    if model is None:
        model = CodecModel(n=8, seed=config.seed)
    if model.frozen:
        raise StageOrderError("model is frozen; Stage I cannot update it")
    extractor = extractor or PerceptualExtractor()
    spec = QuantizerSpec(config.level, sigma=config.sigma)
    gparams = model.generator_params()
    opt_d = Adam(model.disc, lr=config.lr, betas=config.betas)
    opt_g = Adam(gparams, lr=config.lr, betas=config.betas)
    rng = RngStream(config.seed, 0x57A6E1).generator()
    history = StageLog()
    b = min(config.batch, len(dataset))
    for step in range(config.steps):
        batch = [dataset[i] for i in rng.choice(len(dataset), size=b, replace=False)]
        fwd = [generator_forward(model, s, spec) for s in batch]

        l_d = ops.as_tensor(0.0)
        for s, (_, x_hat) in zip(batch, fwd):
            real = discriminate(s.image, s.labels, model.disc, model.M)
            fake = discriminate(ops.detach(x_hat), s.labels, model.disc, model.M)
            l_d = l_d + hinge_d_tensor(real, fake)
        l_d = l_d / b
        opt_d.step(gradients(l_d, model.disc))

        l_g = ops.as_tensor(0.0)
        adv_sum = lp_sum = lc_sum = 0.0
        for s, (f, x_hat) in zip(batch, fwd):
            adv = discriminate(x_hat, s.labels, model.disc, model.M)
            lp = perceptual_loss_tensor(s.image, x_hat, extractor)
            lc = class_loss_tensor(model, f, s.labels)
            l_g = l_g + joint_generator_loss(adv, lp, lc, config.lambda1, config.lambda2)
            adv_sum += float(adv.data)
            lp_sum += float(lp.data)
            lc_sum += float(lc.data)
        l_g = l_g / b
        if config.train_generator:
            opt_g.step(gradients(l_g, gparams))

        row = dict(step=step, L_D=float(l_d.data), L_G=-adv_sum / b,
                   L_P=lp_sum / b, L_C=lc_sum / b, total=float(l_g.data))
        _check_finite(**{k: v for k, v in row.items() if k != "step"})
        history.append(**row)
        if step % 50 == 0:
            log.info("stage1 step %d: L_D=%.4f L_P=%.4f L_C=%.4f", step, row["L_D"],
                     row["L_P"], row["L_C"])
    model.stage = max(model.stage, 1)
    return model, history


# --- Stage III -----------------------------------------------------------
@dataclass
class Stage3Config:
    steps: int = 50
    batch: int = 4
    lr: float = DESK_STAGE1_LR / 10
    alpha: float = 3e-3
    betas: tuple[float, float] = (0.5, 0.999)
    lambda1: float = 10.0
    lambda2: float = 1.0
    gamma: float = 0.99
    seed: int = 0


def mixed_quantize(f, cell_labels: np.ndarray, levels) -> object:
    """Straight-through quantisation where every cell uses the level of its class."""
    flat = np.asarray(cell_labels).ravel()
    out = None
    for q in sorted(set(int(v) for v in levels)):
        sel = np.isin(flat, [m for m, lv in enumerate(levels, 1) if lv == q])
        if not sel.any():
            continue
        part = quantize_ste(f, QuantizerSpec(q)) * sel[:, None].astype(np.float64)
        out = part if out is None else out + part
    return out if out is not None else f * 0.0


def finetune_stage3(dataset: list[SceneSample], model: CodecModel, policy, oracle,
                    config: Stage3Config = Stage3Config(),
                    extractor: PerceptualExtractor | None = None,
                    weights=None) -> tuple[CodecModel, object, StageLog]:
    """Joint updates of encoder, decoder and policy at reduced step sizes.

    Each step the policy picks per-concept levels (greedy); the generator side
    is trained at those levels and the policy takes one REINFORCE step on a
    fresh episode of the updated model.
    """
    from .criterion import CriterionWeights
    from .rl import AllocationEnv, reinforce_gradient, rollout, update_policy

    if model.stage < 2:
        raise StageOrderError("Stage III needs a Stage I model and a Stage II policy")
    extractor = extractor or PerceptualExtractor()
    weights = weights or CriterionWeights()
    model.frozen = False
    gparams = model.generator_params()
    opt_d = Adam(model.disc, lr=config.lr, betas=config.betas)
    opt_g = Adam(gparams, lr=config.lr, betas=config.betas)
    gen = RngStream(config.seed, 0x57A6E3).generator()
    history = StageLog()
    b = min(config.batch, len(dataset))
    for step in range(config.steps):
        batch = [dataset[i] for i in gen.choice(len(dataset), size=b, replace=False)]
        envs = [AllocationEnv(model, s, oracle, extractor, weights) for s in batch]
        trajs = [rollout(e, policy, gamma=config.gamma, greedy=True) for e in envs]

        fwd = []
        for s, t in zip(batch, trajs):
            f = model.encode(s.image)
            cells = model.cell_labels(s.labels)
            fwd.append((f, model.decode(mixed_quantize(f, cells, t.levels), cells).image))

        l_d = ops.as_tensor(0.0)
        for s, (_, x_hat) in zip(batch, fwd):
            real = discriminate(s.image, s.labels, model.disc, model.M)
            fake = discriminate(ops.detach(x_hat), s.labels, model.disc, model.M)
            l_d = l_d + hinge_d_tensor(real, fake)
        l_d = l_d / b
        opt_d.step(gradients(l_d, model.disc))

        l_g = ops.as_tensor(0.0)
        for s, (f, x_hat) in zip(batch, fwd):
            adv = discriminate(x_hat, s.labels, model.disc, model.M)
            lp = perceptual_loss_tensor(s.image, x_hat, extractor)
            lc = class_loss_tensor(model, f, s.labels)
            l_g = l_g + joint_generator_loss(adv, lp, lc, config.lambda1, config.lambda2)
        l_g = l_g / b
        opt_g.step(gradients(l_g, gparams))

        env = AllocationEnv(model, batch[0], oracle, extractor, weights)
        traj = rollout(env, policy, gen, config.gamma, train=True)
        update_policy(policy, reinforce_gradient(traj, policy), config.alpha)

        rep = traj.final_report
        row = dict(step=step, L_D=float(l_d.data), total=float(l_g.data), G=traj.G,
                   psi=rep.rate, L_S=rep.semantic, L_P=rep.perceptual, L=rep.composite)
        _check_finite(**{k: v for k, v in row.items() if k != "step"})
        history.append(**row)
    model.frozen = True
    model.stage = 3
    return model, policy, history
