"""Seeded datasets and the three training stages wired to an ExperimentConfig."""
from __future__ import annotations

from ..criterion import PerceptualExtractor
from ..decoder import CodecModel
from ..rl import AgentConfig, Policy, build_envs, train_agent
from ..semantic import ColorOracle, SceneSample, fit_oracle, generate_dataset
from ..training import Stage1Config, Stage3Config, StageLog, finetune_stage3, train_stage1
from .config import EVAL_OFFSET, ExperimentConfig


def train_set(cfg: ExperimentConfig) -> list[SceneSample]:
    return generate_dataset(cfg.seed, cfg.dataset_size, cfg.scene)


def agent_set(cfg: ExperimentConfig) -> list[SceneSample]:
    return train_set(cfg)[:cfg.agent_scenes]


def eval_set(cfg: ExperimentConfig, count: int | None = None) -> list[SceneSample]:
    return generate_dataset(cfg.seed, cfg.eval_size if count is None else count, cfg.scene,
                            offset=EVAL_OFFSET)


def task_oracle(cfg: ExperimentConfig) -> ColorOracle:
    return fit_oracle(cfg.scene, cfg.seed)


def run_stage1(cfg: ExperimentConfig, n: int | None = None,
               extractor: PerceptualExtractor | None = None) -> tuple[CodecModel, StageLog]:
    n = cfg.n if n is None else n
    model = CodecModel(cfg.scene, n=n, seed=cfg.seed)
    conf = Stage1Config(steps=cfg.stage1_steps, batch=cfg.stage1_batch, lr=cfg.stage1_lr,
                        seed=cfg.seed)
    return train_stage1(train_set(cfg), conf, model, extractor or PerceptualExtractor())


def run_stage2(cfg: ExperimentConfig, model: CodecModel, oracle: ColorOracle | None = None,
               extractor: PerceptualExtractor | None = None):
    model.frozen = True
    envs = build_envs(model, agent_set(cfg), oracle or task_oracle(cfg),
                      extractor or PerceptualExtractor(), cfg.weights)
    conf = AgentConfig(episodes=cfg.episodes, gamma=cfg.gamma, alpha=cfg.alpha,
                       seed=cfg.seed, weights=cfg.weights)
    policy, log = train_agent(envs, conf)
    return policy, log, envs


def run_stage3(cfg: ExperimentConfig, model: CodecModel, policy: Policy,
               oracle: ColorOracle | None = None,
               extractor: PerceptualExtractor | None = None):
    conf = Stage3Config(steps=cfg.stage3_steps, lr=cfg.stage1_lr / 10, alpha=cfg.alpha / 10,
                        gamma=cfg.gamma, seed=cfg.seed)
    return finetune_stage3(agent_set(cfg), model, policy, oracle or task_oracle(cfg), conf,
                           extractor or PerceptualExtractor(), cfg.weights)
