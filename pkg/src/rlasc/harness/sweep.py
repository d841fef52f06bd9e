"""Rate / semantic / perceptual sweeps over modes and allocation policies."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..codec import deserialize, rate_psi, serialize
from ..criterion import PerceptualExtractor, mean_iou, perceptual_loss, psnr, ssim, \
    frechet_proxy
from ..decoder import CodecModel
from ..pipeline import decode_bitstream, encode_image
from ..rl import AllocationEnv, Policy, rollout
from ..semantic import ColorOracle, SceneSample
from .channel import ChannelSpec, transmit_bitstream
from ..core import RngStream

CSV_FIELDS = ["mode", "policy", "bpp", "miou", "L_P", "psnr", "ssim", "frechet"]


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass
class ImageResult:
    bpp: float
    miou: float
    lp: float
    psnr: float
    ssim: float
    recon: np.ndarray


def policy_levels(policy_name: str, model: CodecModel, sample: SceneSample,
                  policy: Policy | None, oracle: ColorOracle,
                  extractor: PerceptualExtractor, weights=None) -> list[int]:
    if policy_name == "learned":
        if policy is None:
            raise ValueError("learned policy requested but no policy is available")
        kw = {} if weights is None else {"weights": weights}
        env = AllocationEnv(model, sample, oracle, extractor, **kw)
        return rollout(env, policy, greedy=True).levels
    level = int(policy_name.removeprefix("uniform-"))
    return [level] * model.M


def code_image(model: CodecModel, sample: SceneSample, levels, oracle: ColorOracle,
               extractor: PerceptualExtractor, channel: ChannelSpec = ChannelSpec(),
               gen: np.random.Generator | None = None) -> ImageResult:
    """Encode, serialise, send, parse and decode one image; return its metrics."""
    bs = deserialize(serialize(encode_image(model, sample.image, sample.labels, levels)))
    bpp = rate_psi(bs)
    if channel.kind != "lossless":
        bs = transmit_bitstream(bs, channel, gen)
    x_hat = decode_bitstream(model, bs).image
    return ImageResult(bpp, mean_iou(oracle.segment(sample.image), oracle.segment(x_hat),
                                     model.M),
                       perceptual_loss(sample.image, x_hat, extractor),
                       psnr(sample.image, x_hat), ssim(sample.image, x_hat), x_hat)


def evaluate_set(model, samples, levels_fn, oracle, extractor,
                 channel: ChannelSpec = ChannelSpec(), seed: int = 0) -> list[ImageResult]:
    base = RngStream(seed, 0xC4A7)
    return [code_image(model, s, levels_fn(s), oracle, extractor, channel,
                       base.child(i).generator()) for i, s in enumerate(samples)]


def summarize(mode: int, name: str, samples, results: list[ImageResult],
              extractor: PerceptualExtractor) -> dict:
    real = np.stack([extractor.descriptor(s.image) for s in samples])
    fake = np.stack([extractor.descriptor(r.recon) for r in results])
    return {"mode": mode, "policy": name,
            "bpp": float(np.mean([r.bpp for r in results])),
            "miou": float(np.mean([r.miou for r in results])),
            "L_P": float(np.mean([r.lp for r in results])),
            "psnr": float(np.mean([r.psnr for r in results])),
            "ssim": float(np.mean([r.ssim for r in results])),
            "frechet": frechet_proxy(real, fake)}


@dataclass
class SweepResult:
    rows: list[dict]
    per_image: dict[tuple[int, str], list[ImageResult]]


def run_rd_sweep(checkpoints: dict[int, str | Path], samples: list[SceneSample],
                 oracle: ColorOracle, extractor: PerceptualExtractor | None = None,
                 channel: ChannelSpec = ChannelSpec(), seed: int = 0,
                 policies: list[str] | None = None) -> SweepResult:
    """For each mode n and each policy, code ``samples`` and average the metrics."""
    from .checkpoint import load_checkpoint

    extractor = extractor or PerceptualExtractor()
    rows, per_image = [], {}
    for mode in sorted(checkpoints):
        path = Path(checkpoints[mode])
        if not path.is_file():
            raise MissingCheckpointError(f"no checkpoint for mode n={mode}: {path}")
        model, policy, _ = load_checkpoint(path)
        names = policies or ((["learned"] if policy is not None else [])
                             + [f"uniform-{q}" for q in range(1, 7)])
        for name in names:
            results = evaluate_set(
                model, samples,
                lambda s: policy_levels(name, model, s, policy, oracle, extractor),
                oracle, extractor, channel, seed)
            per_image[(mode, name)] = results
            rows.append(summarize(mode, name, samples, results, extractor))
    return SweepResult(rows, per_image)


def rows_to_csv(rows: list[dict], fields: list[str] | None = None) -> str:
    fields = fields or list(rows[0]) if rows else (fields or [])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
