from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .. import kvconfig
from ..criterion import CriterionWeights
from ..rl import DESK_AGENT_ALPHA
from ..semantic import SceneConfig
from ..training import DESK_STAGE1_LR
from .channel import ChannelSpec

EVAL_OFFSET = 1 << 16


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run; config plus seed fixes every output."""

    seed: int = 0
    dataset_size: int = 256
    agent_scenes: int = 64
    eval_size: int = 100
    n: int = 8
    modes: tuple[int, ...] = (4, 8, 16)
    stage1_steps: int = 200
    stage1_lr: float = DESK_STAGE1_LR
    stage1_batch: int = 4
    episodes: int = 200
    alpha: float = DESK_AGENT_ALPHA
    gamma: float = 0.99
    stage3_steps: int = 50
    lam: float = 1.0
    eta: float = 10.0
    channel: str = "lossless"
    snr_db: float | None = None
    out: str = "out"
    scene: SceneConfig = field(default_factory=SceneConfig)

    @property
    def weights(self) -> CriterionWeights:
        return CriterionWeights(self.lam, self.eta)

    @property
    def channel_spec(self) -> ChannelSpec:
        return ChannelSpec(self.channel, self.snr_db)

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)} - {"scene"}
        unknown = set(values) - names - {"H", "W", "M", "palette_seed", "active",
                                         "color_jitter", "texture_noise"}
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kw = {k: v for k, v in values.items() if k in names}
        if "modes" in kw:
            m = kw["modes"]
            kw["modes"] = tuple(m) if isinstance(m, list) else (int(m),)
        return cls(scene=SceneConfig.from_dict(values), **kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(kvconfig.load_kv(path))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("scene")
        return d
