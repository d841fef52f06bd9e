"""Synthetic street scenes, semantic concepts, the feature encoder and the task oracle."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import kvconfig
from .core import ParamBlock, RngStream, Tensor, ops

PATCH = 8
MAX_CLASSES = 16
FEATURE_SCALE = 0.5
NORM_EPS = 1e-5
LEAKY_SLOPE = 0.2

CLASS_NAMES = ("background", "sky", "road", "building", "tree", "car", "person", "sign")


@dataclass(frozen=True)
class SceneConfig:
    H: int = 32
    W: int = 64
    M: int = 8
    palette_seed: int = 0
    # class ids that may be drawn; None means all of 1..M
    active: tuple[int, ...] | None = None
    color_jitter: float = 0.02
    texture_noise: float = 0.025

    def __post_init__(self):
        if self.M < 2:
            raise ValueError(f"need at least 2 classes, got M={self.M}")
        if self.M > MAX_CLASSES:
            raise ValueError(f"at most {MAX_CLASSES} classes, got M={self.M}")
        if self.H % PATCH or self.W % PATCH:
            raise ValueError(f"H, W must be divisible by {PATCH}: got {self.H}x{self.W}")

    @property
    def h(self) -> int:
        return self.H // PATCH

    @property
    def w(self) -> int:
        return self.W // PATCH

    @classmethod
    def from_file(cls, path: str | Path) -> "SceneConfig":
        return cls.from_dict(kvconfig.load_kv(path))

    @classmethod
    def from_dict(cls, values: dict) -> "SceneConfig":
        known = {k: values[k] for k in ("H", "W", "M", "palette_seed",
                                         "color_jitter", "texture_noise") if k in values}
        if "active" in values:
            act = values["active"]
            known["active"] = tuple(act) if isinstance(act, list) else (int(act),)
        return cls(**known)

    def class_name(self, m: int) -> str:
        return CLASS_NAMES[m - 1] if m <= len(CLASS_NAMES) else f"object{m}"


@dataclass
class SceneSample:
    image: np.ndarray       # 3 x H x W, values in [0, 1]
    labels: np.ndarray      # H x W, int, values in 1..M

    @property
    def H(self) -> int:
        return self.labels.shape[0]

    @property
    def W(self) -> int:
        return self.labels.shape[1]


@dataclass
class SemanticMask:
    class_id: int
    full: np.ndarray        # H x W, {0, 1}
    down: np.ndarray        # h x w, {0, 1}


@dataclass
class SemanticConcept:
    class_id: int
    features: Tensor | np.ndarray   # n x h x w, zero where mask.down == 0
    mask: SemanticMask

    @property
    def empty(self) -> bool:
        return not self.mask.down.any()


@dataclass
class TaskPrediction:
    labels: np.ndarray | None = None
    probs: np.ndarray | None = None


# --- scene generation ----------------------------------------------------
def make_palette(M: int, palette_seed: int) -> np.ndarray:
    """M well-separated mean colours, greedy farthest-point over seeded candidates."""
    rng = RngStream(palette_seed, 0xC0102).generator()
    cand = rng.uniform(0.1, 0.9, size=(512, 3))
    chosen = [int(np.argmin(cand.sum(axis=1)))]
    dist = np.linalg.norm(cand - cand[chosen[0]], axis=1)
    while len(chosen) < M:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(cand - cand[nxt], axis=1))
    return cand[chosen]


def _rect(lab, r0, r1, c0, c1, m):
    H, W = lab.shape
    lab[max(r0, 0):min(r1, H), max(c0, 0):min(c1, W)] = m


def _ellipse(lab, cy, cx, ry, rx, m):
    H, W = lab.shape
    yy, xx = np.mgrid[0:H, 0:W]
    lab[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = m


def _draw_layout(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    H, W = cfg.H, cfg.W
    active = set(cfg.active) if cfg.active is not None else set(range(1, cfg.M + 1))
    lab = np.ones((H, W), dtype=np.int64)
    sy = H / 32.0
    sx = W / 64.0

    def on(m, p):
        # draw decision is consumed even for inactive classes so layouts stay aligned
        hit = rng.random() < p
        return hit and m in active and m <= cfg.M

    if on(2, 0.85):  # sky band
        _rect(lab, 0, int(rng.integers(int(5 * sy), int(12 * sy) + 1)), 0, W, 2)
    road_top = H - int(rng.integers(int(7 * sy), int(13 * sy) + 1))
    if on(3, 0.85):
        _rect(lab, road_top, H, 0, W, 3)
    for _ in range(int(rng.integers(1, 3))):
        if on(4, 0.6):  # buildings
            bw = int(rng.integers(int(10 * sx), int(22 * sx) + 1))
            c0 = int(rng.integers(0, W - bw + 1))
            top = int(rng.integers(int(3 * sy), int(10 * sy) + 1))
            _rect(lab, top, road_top, c0, c0 + bw, 4)
    for _ in range(int(rng.integers(1, 3))):
        if on(5, 0.55):  # trees
            _ellipse(lab, rng.uniform(8 * sy, 16 * sy), rng.uniform(0, W),
                     rng.uniform(4 * sy, 8 * sy), rng.uniform(4 * sx, 8 * sx), 5)
    for _ in range(int(rng.integers(1, 3))):
        if on(6, 0.6):  # cars sit on the road edge
            cw = int(rng.integers(int(10 * sx), int(18 * sx) + 1))
            ch = int(rng.integers(int(6 * sy), int(10 * sy) + 1))
            c0 = int(rng.integers(0, W - cw + 1))
            base = min(H, road_top + int(rng.integers(int(2 * sy), int(8 * sy) + 1)))
            _rect(lab, base - ch, base, c0, c0 + cw, 6)
    if on(7, 0.7):  # person
        pw = int(rng.integers(int(3 * sx), int(6 * sx) + 1))
        ph = int(rng.integers(int(9 * sy), int(14 * sy) + 1))
        c0 = int(rng.integers(0, W - pw + 1))
        base = min(H, road_top + int(rng.integers(0, int(4 * sy) + 1)))
        _rect(lab, base - ph, base, c0, c0 + pw, 7)
    if on(8, 0.7):  # sign
        sw = int(rng.integers(int(4 * sx), int(8 * sx) + 1))
        c0 = int(rng.integers(0, W - sw + 1))
        r0 = int(rng.integers(int(4 * sy), int(14 * sy) + 1))
        _rect(lab, r0, r0 + sw, c0, c0 + sw, 8)
    for m in range(9, cfg.M + 1):
        if on(m, 0.6):
            rh = int(rng.integers(int(4 * sy), int(12 * sy) + 1))
            rw = int(rng.integers(int(4 * sx), int(16 * sx) + 1))
            r0 = int(rng.integers(0, H - rh + 1))
            c0 = int(rng.integers(0, W - rw + 1))
            _rect(lab, r0, r0 + rh, c0, c0 + rw, m)
    return lab


def generate_scene(rng: RngStream, config: SceneConfig = SceneConfig()) -> SceneSample:
    """Layered synthetic street scene with its ground-truth label map."""
    gen = rng.generator()
    labels = _draw_layout(config, gen)
    palette = make_palette(config.M, config.palette_seed)
    offsets = gen.normal(0.0, config.color_jitter, size=(config.M, 3))
    colors = np.clip(palette + offsets, 0.0, 1.0)
    image = colors[labels - 1].transpose(2, 0, 1)
    image = image + gen.normal(0.0, config.texture_noise, size=image.shape)
    return SceneSample(np.clip(image, 0.0, 1.0), labels)


def generate_dataset(seed: int, count: int, config: SceneConfig = SceneConfig(),
                     offset: int = 0) -> list[SceneSample]:
    base = RngStream(seed, 0x5CE7E)
    return [generate_scene(base.child(offset + i), config) for i in range(count)]


# --- masks & concepts ----------------------------------------------------
def downscale_labels(labels: np.ndarray, M: int, patch: int = PATCH) -> np.ndarray:
    """Per-cell plurality class; ties go to the lowest class id."""
    H, W = labels.shape
    h, w = H // patch, W // patch
    blocks = labels.reshape(h, patch, w, patch).transpose(0, 2, 1, 3).reshape(h, w, -1)
    counts = np.stack([(blocks == m).sum(axis=2) for m in range(1, M + 1)], axis=-1)
    return counts.argmax(axis=-1) + 1


def extract_mask(labels: np.ndarray, m: int, M: int | None = None,
                 patch: int = PATCH) -> SemanticMask:
    M = int(labels.max()) if M is None else M
    M = max(M, m)
    if m < 1:
        raise ValueError(f"class id must be >= 1, got {m}")
    full = (labels == m).astype(np.int64)
    down = (downscale_labels(labels, M, patch) == m).astype(np.int64)
    return SemanticMask(m, full, down)


def extract_masks(labels: np.ndarray, M: int, patch: int = PATCH) -> list[SemanticMask]:
    cells = downscale_labels(labels, M, patch)
    return [SemanticMask(m, (labels == m).astype(np.int64), (cells == m).astype(np.int64))
            for m in range(1, M + 1)]


def patchify(image, patch: int = PATCH):
    """3 x H x W -> (h*w) x (3*patch*patch), cells row-major; works on arrays and Tensors."""
    c, H, W = image.shape
    h, w = H // patch, W // patch
    x = image.reshape(c, h, patch, w, patch).transpose(1, 3, 0, 2, 4)
    return x.reshape(h * w, c * patch * patch)


def depatchify(patches, H: int, W: int, patch: int = PATCH, channels: int = 3):
    h, w = H // patch, W // patch
    x = patches.reshape(h, w, channels, patch, patch).transpose(2, 0, 3, 1, 4)
    return x.reshape(channels, H, W)


def init_encoder(n: int, rng: RngStream, patch: int = PATCH) -> ParamBlock:
    gen = rng.generator()
    d = 3 * patch * patch
    return ParamBlock({
        "W": gen.normal(0.0, 1.0 / np.sqrt(d), size=(d, n)),
        "b": np.zeros(n),
    })


def encode_cells(image, params: ParamBlock, normalize: bool = True) -> Tensor:
    """Feature encoder in cell layout: returns (h*w) x n."""
    x = patchify(ops.as_tensor(image))
    act = ops.leaky_relu(x @ params["W"] + params["b"], LEAKY_SLOPE)
    if not normalize:
        return act
    mu = act.mean(axis=0, keepdims=True)
    centered = act - mu
    var = ops.square(centered).mean(axis=0, keepdims=True)
    return centered / ops.sqrt(var + NORM_EPS) * FEATURE_SCALE


def cells_to_map(cells, h: int, w: int):
    return cells.transpose(1, 0).reshape(cells.shape[1], h, w)


def map_to_cells(fmap):
    n = fmap.shape[0]
    return fmap.reshape(n, -1).transpose(1, 0)


def encode_features(image, params: ParamBlock, normalize: bool = True) -> Tensor:
    """Per-patch linear map + leaky-relu + per-channel normalisation -> n x h x w."""
    _, H, W = np.shape(image.data if isinstance(image, Tensor) else image)
    if H % PATCH or W % PATCH:
        raise ValueError(f"image {H}x{W} not divisible by {PATCH}")
    return cells_to_map(encode_cells(image, params, normalize), H // PATCH, W // PATCH)


def decompose_features(f, mask: SemanticMask) -> SemanticConcept:
    """Concept features f * s_d, the mask broadcast over channels."""
    down = np.asarray(mask.down, dtype=np.float64)
    if tuple(f.shape[1:]) != down.shape:
        raise ValueError(f"mask grid {down.shape} does not match features {f.shape}")
    feats = ops.mul(f, down[None]) if isinstance(f, Tensor) else f * down[None]
    return SemanticConcept(mask.class_id, feats, mask)


def extract_concepts(f, labels: np.ndarray, M: int) -> list[SemanticConcept]:
    concepts = [decompose_features(f, mk) for mk in extract_masks(labels, M)]
    total = sum(np.asarray(c.mask.down) for c in concepts)
    assert np.all(total == 1), "downscaled masks must partition the cell grid"
    return concepts


# --- feature classification head ---------------------------------------
def init_class_head(n: int, M: int, rng: RngStream) -> ParamBlock:
    gen = rng.generator()
    return ParamBlock({"W": gen.normal(0.0, 1.0 / np.sqrt(n), size=(n, M)),
                       "b": np.zeros(M)})


def feature_class_loss(concepts: list[SemanticConcept], head: ParamBlock) -> Tensor:
    """Cross entropy of the shared max-pool + linear head over concepts; empty ones skipped."""
    total = ops.as_tensor(0.0)
    for c in concepts:
        if c.empty:
            continue
        f = ops.as_tensor(c.features)
        pooled = f.reshape(f.shape[0], -1).max(axis=1).reshape(1, -1)
        logp = ops.log_softmax(pooled @ head["W"] + head["b"], axis=-1)
        total = total - logp[0, c.class_id - 1]
    return total


# --- task oracle ---------------------------------------------------------
@dataclass
class ColorOracle:
    """Nearest mean-colour segmenter standing in for a pretrained analysis network."""

    prototypes: np.ndarray      # M x 3
    task: str = "segmentation"

    @property
    def M(self) -> int:
        return len(self.prototypes)

    def segment(self, image: np.ndarray) -> TaskPrediction:
        px = np.asarray(image, dtype=np.float64).reshape(3, -1).T
        d = ((px[:, None, :] - self.prototypes[None]) ** 2).sum(axis=-1)
        labels = d.argmin(axis=1).reshape(image.shape[1:]) + 1
        return TaskPrediction(labels=labels)

    def classify(self, image: np.ndarray) -> TaskPrediction:
        """Class-frequency distribution of the segmentation, Laplace-smoothed."""
        labels = self.segment(image).labels
        counts = np.bincount(labels.ravel() - 1, minlength=self.M) + 1.0
        return TaskPrediction(probs=counts / counts.sum())

    def predict(self, image: np.ndarray) -> TaskPrediction:
        if self.task == "classification":
            return self.classify(image)
        return self.segment(image)


def fit_oracle(config: SceneConfig = SceneConfig(), seed: int = 0,
               count: int = 256) -> ColorOracle:
    sums = np.zeros((config.M, 3))
    counts = np.zeros(config.M)
    for s in generate_dataset(seed, count, config, offset=1 << 20):
        px = s.image.reshape(3, -1).T
        lab = s.labels.ravel() - 1
        np.add.at(sums, lab, px)
        counts += np.bincount(lab, minlength=config.M)
    protos = make_palette(config.M, config.palette_seed).copy()
    seen = counts > 0
    protos[seen] = sums[seen] / counts[seen, None]
    return ColorOracle(protos)


def oracle_segment(image: np.ndarray, oracle: ColorOracle) -> TaskPrediction:
    return oracle.segment(image)


# --- PPM / PGM -----------------------------------------------------------
def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    _, H, W = img.shape
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + img.transpose(1, 2, 0).tobytes())


def write_pgm(path: str | Path, labels: np.ndarray) -> None:
    lab = np.asarray(labels)
    if lab.min() < 0 or lab.max() > 255:
        raise ValueError("label values must fit in a byte")
    H, W = lab.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + lab.astype(np.uint8).tobytes())


def _read_netpbm(path: str | Path, magic: bytes) -> tuple[int, int, bytes]:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    if int(tokens[3]) != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    return int(tokens[1]), int(tokens[2]), raw[pos + 1:]


def read_ppm(path: str | Path) -> np.ndarray:
    W, H, body = _read_netpbm(path, b"P6")
    arr = np.frombuffer(body[:3 * W * H], dtype=np.uint8)
    if arr.size != 3 * W * H:
        raise ValueError(f"{path}: truncated pixel data")
    return arr.reshape(H, W, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path: str | Path) -> np.ndarray:
    W, H, body = _read_netpbm(path, b"P5")
    arr = np.frombuffer(body[:W * H], dtype=np.uint8)
    if arr.size != W * H:
        raise ValueError(f"{path}: truncated pixel data")
    return arr.reshape(H, W).astype(np.int64)


def with_active(config: SceneConfig, active) -> SceneConfig:
    return replace(config, active=tuple(active))
