"""Generative semantic decoder at desk scale.

Convolutional generators become per-cell linear patch emitters (one 8x8x3
patch per feature cell), keeping the local / global / attention topology.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ParamBlock, RngStream, Tensor, ops
from .semantic import PATCH, SceneConfig, depatchify, downscale_labels, encode_cells, \
    init_class_head, init_encoder, patchify

PATCH_DIM = 3 * PATCH * PATCH
HIDDEN = 32
LEAKY = 0.2


def one_hot(labels: np.ndarray, M: int) -> np.ndarray:
    """(..., ) ints in 1..M -> (..., M) float one-hot."""
    return (np.asarray(labels)[..., None] == np.arange(1, M + 1)).astype(np.float64)


# --- parameter initialisation -------------------------------------------
def init_local(n: int, M: int, rng: RngStream, hidden: int = HIDDEN) -> ParamBlock:
    gen = rng.generator()
    return ParamBlock({
        "W_trunk": gen.normal(0.0, 1.0 / np.sqrt(n), size=(n, hidden)),
        "b_trunk": np.zeros(hidden),
        "W_heads": gen.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, M * PATCH_DIM)),
        "b_heads": np.zeros((M, PATCH_DIM)),
    })


def init_global(n: int, M: int, rng: RngStream, hidden: int = HIDDEN) -> ParamBlock:
    gen = rng.generator()
    return ParamBlock({
        "W_in": gen.normal(0.0, 1.0 / np.sqrt(n), size=(n, hidden)),
        "b_in": np.zeros(hidden),
        "scale": np.ones((M, hidden)),
        "shift": gen.normal(0.0, 0.1, size=(M, hidden)),
        "W_out": gen.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, PATCH_DIM)),
        "b_out": np.zeros(PATCH_DIM),
    })


def init_attention(n: int, rng: RngStream) -> ParamBlock:
    gen = rng.generator()
    return ParamBlock({"W": gen.normal(0.0, 0.1, size=(n, 2)), "b": np.zeros(2)})


def init_discriminator(M: int, rng: RngStream) -> ParamBlock:
    gen = rng.generator()
    d = (3 + M) * PATCH * PATCH
    return ParamBlock({
        "w1": gen.normal(0.0, 0.01, size=(d, 1)), "b1": np.zeros(1),
        "w2": gen.normal(0.0, 0.01, size=(d, 1)), "b2": np.zeros(1),
    })


# --- generators ----------------------------------------------------------
def local_generate(fhat_cells, cell_labels: np.ndarray, params: ParamBlock, M: int) -> Tensor:
    """Class-specific heads: each cell is rendered by the head of its own class.

    ``fhat_cells`` is (cells x n); ``cell_labels`` the h x w downscaled label
    grid. Returns (cells x 192) patches, i.e. the sum over classes of y^(m),
    where y^(m) is nonzero only on cells of class m.
    """
    f = ops.as_tensor(fhat_cells)
    C = f.shape[0]
    trunk = ops.leaky_relu(f @ params["W_trunk"] + params["b_trunk"], LEAKY)
    heads = (trunk @ params["W_heads"]).reshape(C, M, PATCH_DIM)
    sel = one_hot(np.asarray(cell_labels).ravel(), M)
    y = (heads * sel[:, :, None]).sum(axis=1) + ops.matmul(sel, params["b_heads"])
    return ops.sigmoid(y)


def local_class_outputs(fhat_cells, cell_labels, params: ParamBlock, M: int) -> list[np.ndarray]:
    """The individual y^(m) as (cells x 192) arrays, zero outside class m."""
    f = ops.as_tensor(fhat_cells)
    trunk = ops.leaky_relu(f @ params["W_trunk"] + params["b_trunk"], LEAKY).data
    heads = (trunk @ params["W_heads"].data).reshape(len(trunk), M, PATCH_DIM)
    heads = 1.0 / (1.0 + np.exp(-(heads + params["b_heads"].data[None])))
    flat = np.asarray(cell_labels).ravel()
    return [np.where((flat == m)[:, None], heads[:, m - 1], 0.0) for m in range(1, M + 1)]


def global_generate(fhat_cells, cell_labels: np.ndarray, params: ParamBlock, M: int) -> Tensor:
    """Linear decoder whose hidden activations get a per-class scale and shift."""
    f = ops.as_tensor(fhat_cells)
    sel = one_hot(np.asarray(cell_labels).ravel(), M)
    h = f @ params["W_in"] + params["b_in"]
    h = h * ops.matmul(sel, params["scale"]) + ops.matmul(sel, params["shift"])
    return ops.sigmoid(ops.leaky_relu(h, LEAKY) @ params["W_out"] + params["b_out"])


def attention_weights(fhat_cells, params: ParamBlock) -> tuple[Tensor, Tensor]:
    """Per-cell (W_l, W_g) from a 2-way softmax; each is (cells x 1)."""
    a = ops.softmax(ops.as_tensor(fhat_cells) @ params["W"] + params["b"], axis=-1)
    return a[:, 0:1], a[:, 1:2]


def attention_fuse(x_l, x_g, w_l, w_g, atol: float = 1e-9):
    """W_l * x_l + W_g * x_g for 3 x H x W images and H x W weights that sum to one."""
    wl = np.asarray(w_l.data if isinstance(w_l, Tensor) else w_l)
    wg = np.asarray(w_g.data if isinstance(w_g, Tensor) else w_g)
    if np.any(np.abs(wl + wg - 1.0) > atol) or np.any(wl < 0) or np.any(wg < 0):
        raise ValueError("attention weights must be non-negative and sum to one per pixel")
    if isinstance(x_l, Tensor) or isinstance(x_g, Tensor) or isinstance(w_l, Tensor):
        return ops.mul(w_l, x_l) + ops.mul(w_g, x_g)
    return wl * np.asarray(x_l) + wg * np.asarray(x_g)


def upsample_cells(values: np.ndarray, h: int, w: int, patch: int = PATCH) -> np.ndarray:
    """(cells,) per-cell scalars -> (h*patch) x (w*patch) map."""
    grid = np.asarray(values).reshape(h, w)
    return np.kron(grid, np.ones((patch, patch)))


# --- discriminator -------------------------------------------------------
def discriminate(image, labels: np.ndarray, params: ParamBlock, M: int) -> Tensor:
    """Mean linear patch score over (image, one-hot label map) at full and half scale."""
    x = ops.as_tensor(image)
    _, H, W = x.shape
    s = one_hot(labels, M).transpose(2, 0, 1)
    joint = ops.concat([x, s], axis=0)
    c = 3 + M
    full = patchify(joint) @ params["w1"] + params["b1"]
    half = joint.reshape(c, H // 2, 2, W // 2, 2).mean(axis=(2, 4))
    coarse = patchify(half) @ params["w2"] + params["b2"]
    return (full.mean() + coarse.mean()) * 0.5


def hinge_losses(real_scores, fake_scores) -> tuple[float, float]:
    """(L_D, L_G) of the hinge GAN objective for arrays of discriminator scores."""
    real = np.atleast_1d(np.asarray(real_scores, dtype=np.float64))
    fake = np.atleast_1d(np.asarray(fake_scores, dtype=np.float64))
    l_d = np.maximum(0.0, 1.0 - real).mean() + np.maximum(0.0, 1.0 + fake).mean()
    return float(l_d), float(-fake.mean())


def hinge_d_tensor(real: Tensor, fake: Tensor) -> Tensor:
    return ops.relu(1.0 - real) + ops.relu(1.0 + fake)


def joint_generator_loss(adv, perceptual, class_loss, lambda1: float = 10.0,
                         lambda2: float = 1.0):
    """-E[D(x_hat, s)] + lambda1 * L_P + lambda2 * L_C; ``adv`` is E[D(x_hat, s)]."""
    return -adv + lambda1 * perceptual + lambda2 * class_loss


# --- the full encoder/decoder model -------------------------------------
@dataclass
class DecodeOutput:
    image: Tensor        # 3 x H x W
    local: Tensor        # cells x 192
    glob: Tensor         # cells x 192
    w_local: Tensor      # cells x 1
    w_global: Tensor     # cells x 1


class CodecModel:
    """Encoder, feature-classification head, generators, attention and discriminator."""

    def __init__(self, scene: SceneConfig = SceneConfig(), n: int = 8, seed: int = 0):
        self.scene = scene
        self.n = n
        self.seed = seed
        base = RngStream(seed, 0xDEC0)
        M = scene.M
        self.encoder = init_encoder(n, base.child(1))
        self.class_head = init_class_head(n, M, base.child(2))
        self.local = init_local(n, M, base.child(3))
        self.glob = init_global(n, M, base.child(4))
        self.attention = init_attention(n, base.child(5))
        self.disc = init_discriminator(M, base.child(6))
        self.frozen = False
        self.stage = 0

    @property
    def M(self) -> int:
        return self.scene.M

    def blocks(self) -> dict[str, ParamBlock]:
        return {"encoder": self.encoder, "class_head": self.class_head, "local": self.local,
                "global": self.glob, "attention": self.attention, "disc": self.disc}

    def generator_params(self) -> ParamBlock:
        return ParamBlock.join(encoder=self.encoder, class_head=self.class_head,
                               local=self.local, **{"global": self.glob},
                               attention=self.attention)

    def encode(self, image) -> Tensor:
        """Cell-layout features (cells x n)."""
        return encode_cells(image, self.encoder)

    def cell_labels(self, labels: np.ndarray) -> np.ndarray:
        return downscale_labels(labels, self.M)

    def decode(self, fhat_cells, cell_labels: np.ndarray) -> DecodeOutput:
        M = self.M
        x_l = local_generate(fhat_cells, cell_labels, self.local, M)
        x_g = global_generate(fhat_cells, cell_labels, self.glob, M)
        w_l, w_g = attention_weights(fhat_cells, self.attention)
        fused = w_l * x_l + w_g * x_g
        img = depatchify(fused, self.scene.H, self.scene.W)
        return DecodeOutput(img, x_l, x_g, w_l, w_g)

    def reconstruct(self, fhat_cells, cell_labels: np.ndarray) -> np.ndarray:
        return self.decode(fhat_cells, cell_labels).image.data

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, block in self.blocks().items():
            for name, value in block.values().items():
                out[f"{prefix}.{name}"] = value
        return out

    def load_state_dict(self, values: dict[str, np.ndarray]) -> None:
        for prefix, block in self.blocks().items():
            block.load({k.split(".", 1)[1]: v for k, v in values.items()
                        if k.split(".", 1)[0] == prefix})
