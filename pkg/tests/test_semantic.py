import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rlasc.core import ParamBlock, RngStream, ops
from rlasc.semantic import (
    ColorOracle,
    SceneConfig,
    decompose_features,
    downscale_labels,
    encode_features,
    extract_concepts,
    extract_mask,
    feature_class_loss,
    fit_oracle,
    generate_dataset,
    generate_scene,
    make_palette,
    read_pgm,
    read_ppm,
    with_active,
    write_pgm,
    write_ppm,
)
from rlasc.semantic import SemanticConcept, SemanticMask


def test_scene_is_deterministic():
    a = generate_scene(RngStream(7, 0))
    b = generate_scene(RngStream(7, 0))
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.image.shape == (3, 32, 64) and a.labels.shape == (32, 64)
    assert a.image.min() >= 0 and a.image.max() <= 1


def test_too_few_classes_rejected():
    with pytest.raises(ValueError):
        SceneConfig(M=1)


def test_background_only_scene_is_uniform():
    s = generate_scene(RngStream(3, 0), with_active(SceneConfig(), [1]))
    assert np.all(s.labels == 1)


def test_inactive_classes_keep_layout_aligned():
    full = generate_scene(RngStream(5, 0)).labels
    partial = generate_scene(RngStream(5, 0), with_active(SceneConfig(), [1, 2, 3])).labels
    sky = full == 2
    # the sky band is the first draw, painted before anything can cover it
    assert np.all(partial[sky & (partial != 3)] == 2) or not sky.any()


def test_palette_is_well_separated():
    pal = make_palette(8, 0)
    d = np.linalg.norm(pal[:, None] - pal[None], axis=-1)
    assert d[np.triu_indices(8, 1)].min() > 0.2


# --- masks ---------------------------------------------------------------
def test_mask_all_class():
    lab = np.full((16, 16), 3)
    mk = extract_mask(lab, 3, 4)
    assert mk.full.all() and mk.down.all()


def test_mask_absent_class():
    lab = np.full((16, 16), 3)
    mk = extract_mask(lab, 2, 4)
    assert not mk.full.any() and not mk.down.any()


def test_majority_cell_33_of_64():
    lab = np.full((8, 8), 1)
    lab.ravel()[:33] = 2
    assert extract_mask(lab, 2, 2).down[0, 0] == 1
    lab = np.full((8, 8), 1)
    lab.ravel()[:32] = 2
    # exact tie goes to the lower id
    assert extract_mask(lab, 2, 2).down[0, 0] == 0


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_downscale_matches_brute_force_plurality(seed):
    gen = np.random.default_rng(seed)
    lab = gen.integers(1, 5, size=(16, 24))
    got = downscale_labels(lab, 4)
    for i in range(2):
        for j in range(3):
            block = lab[8 * i:8 * i + 8, 8 * j:8 * j + 8].ravel()
            counts = [np.sum(block == m) for m in range(1, 5)]
            best = max(counts)
            assert got[i, j] == counts.index(best) + 1


# --- encoder -------------------------------------------------------------
def test_zero_image_gives_zero_features():
    p = ParamBlock({"W": np.random.default_rng(0).normal(size=(192, 4)), "b": np.zeros(4)})
    f = encode_features(np.zeros((3, 16, 16)), p, normalize=False)
    assert f.shape == (4, 2, 2) and np.all(f.data == 0)


def test_identical_images_identical_features():
    gen = np.random.default_rng(1)
    p = ParamBlock({"W": gen.normal(size=(192, 4)), "b": gen.normal(size=4)})
    x = gen.random((3, 16, 16))
    np.testing.assert_array_equal(encode_features(x, p).data, encode_features(x.copy(), p).data)


def test_single_patch_projection_by_hand():
    x = np.arange(192, dtype=float).reshape(3, 8, 8) / 192.0
    W = np.zeros((192, 2))
    W[0, 0] = 1.0        # channel 0, pixel (0, 0)
    W[64 + 9, 1] = -2.0  # channel 1, pixel (1, 1)
    p = ParamBlock({"W": W, "b": np.array([0.5, 0.0])})
    f = encode_features(x, p, normalize=False).data
    assert f[0, 0, 0] == pytest.approx(0.5)
    assert f[1, 0, 0] == pytest.approx(0.2 * (-2.0 * 73 / 192.0))


def test_normalized_features_have_target_spread():
    s = generate_dataset(0, 1)[0]
    from rlasc.decoder import CodecModel
    f = CodecModel().encode(s.image).data
    np.testing.assert_allclose(f.mean(axis=0), 0, atol=1e-10)
    np.testing.assert_allclose(f.std(axis=0), 0.5, atol=5e-3)  # eps in the denominator


# --- concepts ------------------------------------------------------------
def _mask(down):
    down = np.asarray(down)
    return SemanticMask(1, np.kron(down, np.ones((8, 8), int)), down)


def test_decompose_identity_zero_checkerboard():
    f = np.random.default_rng(2).normal(size=(3, 4, 4))
    np.testing.assert_array_equal(decompose_features(f, _mask(np.ones((4, 4)))).features, f)
    assert not decompose_features(f, _mask(np.zeros((4, 4)))).features.any()
    cb = np.indices((4, 4)).sum(axis=0) % 2
    got = decompose_features(f, _mask(cb)).features
    for c, i, j in np.ndindex(3, 4, 4):
        assert got[c, i, j] == (f[c, i, j] if cb[i, j] else 0.0)


def test_concepts_partition_the_grid():
    s = generate_dataset(2, 1)[0]
    f = np.random.default_rng(0).normal(size=(4, 4, 8))
    concepts = extract_concepts(f, s.labels, 8)
    np.testing.assert_allclose(sum(c.features for c in concepts), f)


def _concepts(M, n=3, seed=0):
    gen = np.random.default_rng(seed)
    out = []
    for m in range(1, M + 1):
        down = np.zeros((2, 2), int)
        down[(m - 1) % 2, (m - 1) // 2 % 2] = 1
        out.append(SemanticConcept(m, gen.normal(size=(n, 2, 2)) * down, _mask(down)))
    return out


def test_class_loss_uniform_head_is_M_ln_M():
    M = 4
    head = ParamBlock({"W": np.zeros((3, M)), "b": np.zeros(M)})
    assert float(feature_class_loss(_concepts(M), head).data) == pytest.approx(M * np.log(M))


def test_class_loss_sharp_correct_head_goes_to_zero():
    M = 3
    concepts = _concepts(M)
    for c in concepts:
        c.features[:] = 0.0
    head = ParamBlock({"W": np.zeros((3, M)), "b": np.zeros(M)})
    # bias alone cannot separate classes; give each concept a distinct pooled channel
    for m, c in enumerate(concepts):
        c.features[m][np.asarray(c.mask.down, bool)] = 1.0
    losses = []
    for scale in (1.0, 10.0, 50.0):
        head["W"].data = np.eye(3) * scale
        losses.append(float(feature_class_loss(concepts, head).data))
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-15


def test_class_loss_matches_direct_cross_entropy():
    M = 4
    gen = np.random.default_rng(9)
    head = ParamBlock({"W": gen.normal(size=(3, M)), "b": gen.normal(size=M)})
    concepts = _concepts(M, seed=4)
    ref = 0.0
    for c in concepts:
        z = c.features.reshape(3, -1).max(axis=1) @ head["W"].data + head["b"].data
        p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        ref -= np.log(p[c.class_id - 1])
    assert float(feature_class_loss(concepts, head).data) == pytest.approx(ref, rel=1e-12)


def test_class_loss_skips_empty_concepts():
    M = 2
    head = ParamBlock({"W": np.zeros((3, M)), "b": np.zeros(M)})
    full = _concepts(1)[0]
    empty = SemanticConcept(2, np.zeros((3, 2, 2)), _mask(np.zeros((2, 2), int)))
    assert float(feature_class_loss([full, empty], head).data) == pytest.approx(np.log(2))


# --- oracle --------------------------------------------------------------
@pytest.fixture(scope="module")
def oracle():
    return fit_oracle(SceneConfig(), 0)


def test_oracle_accuracy_on_clean_scenes(oracle):
    acc = [np.mean(oracle.segment(s.image).labels == s.labels)
           for s in generate_dataset(0, 100)]
    assert np.mean(acc) >= 0.95


def test_oracle_on_mean_colour_image(oracle):
    img = np.broadcast_to(oracle.prototypes[4][:, None, None], (3, 8, 8))
    assert np.all(oracle.segment(img).labels == 5)


def test_oracle_deterministic(oracle):
    s = generate_dataset(1, 1)[0]
    np.testing.assert_array_equal(oracle.segment(s.image).labels,
                                  oracle.segment(s.image).labels)


def test_classification_mode_gives_distribution():
    o = ColorOracle(make_palette(4, 0), task="classification")
    p = o.predict(np.zeros((3, 8, 8))).probs
    assert p.sum() == pytest.approx(1.0) and np.all(p > 0)


# --- netpbm --------------------------------------------------------------
def test_ppm_pgm_roundtrip(tmp_path):
    s = generate_dataset(0, 1)[0]
    write_ppm(tmp_path / "a.ppm", s.image)
    write_pgm(tmp_path / "a.pgm", s.labels)
    np.testing.assert_allclose(read_ppm(tmp_path / "a.ppm"), s.image, atol=0.5 / 255 + 1e-12)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), s.labels)


def test_truncated_ppm_rejected(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.zeros((3, 8, 8)))
    data = (tmp_path / "a.ppm").read_bytes()
    (tmp_path / "b.ppm").write_bytes(data[:-10])
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "b.ppm")


def test_ppm_header_comments(tmp_path):
    body = bytes(range(12))
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 2\n255\n" + body)
    img = read_ppm(tmp_path / "c.ppm")
    assert img.shape == (3, 2, 2) and img[0, 0, 0] == 0 and img[2, 1, 1] == 11 / 255


def test_scene_config_from_file(tmp_path):
    (tmp_path / "s.cfg").write_text("# scene\nM = 6\nactive = 1, 2, 3\n")
    cfg = SceneConfig.from_file(tmp_path / "s.cfg")
    assert cfg.M == 6 and cfg.active == (1, 2, 3)
