import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semadapt import data as D
from semadapt.training import ToyData


def test_scene_is_pure_function_of_seed():
    a, spec_a = D.gen_scene(11)
    b, spec_b = D.gen_scene(11)
    assert np.array_equal(a, b) and spec_a == spec_b
    assert not np.array_equal(a, D.gen_scene(12)[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_scene_labels_valid_and_sky_on_top(seed):
    labels, spec = D.gen_scene(seed, 32)
    assert labels.shape == (32, 32) and labels.dtype == np.uint8
    assert labels.max() < len(D.CLASSES)
    assert 0.30 <= spec.horizon <= 0.50 and 1 <= len(spec.boxes) <= 4 and len(spec.discs) <= 3
    assert set(np.unique(labels[0])) <= {D.SKY, D.DISC}
    assert (labels == D.ROAD).any()


def test_render_deterministic_and_in_range():
    labels, spec = D.gen_scene(5)
    a = D.render_domain(spec, D.DomainStyle.target(), 9)
    b = D.render_domain(labels, D.DomainStyle.target(), 9)
    assert np.array_equal(a, b)
    assert a.shape == (3, 64, 64) and a.dtype == np.float32
    assert a.min() >= -1 and a.max() <= 1


def test_domains_differ_on_same_scene():
    labels, _ = D.gen_scene(5)
    src = D.render_domain(labels, D.DomainStyle.source(), 1)
    tgt = D.render_domain(labels, D.DomainStyle.target(), 1)
    assert np.abs(src - tgt).mean() > 0.1


def test_target_style_textures_ground_and_road():
    labels = np.full((16, 16), D.GROUND, np.uint8)
    style = D.DomainStyle.target()
    style.noise = 0.0
    style.gradient = 0.0
    img = D.render_domain(labels, style, 0)
    assert len(np.unique(img[0].round(4))) == 2  # checkerboard


def test_ppm_pgm_round_trip(tmp_path, rng):
    img = D.from_bytes(rng.integers(0, 256, (3, 5, 7), dtype=np.uint8).transpose(1, 2, 0)).transpose(2, 0, 1)
    D.write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(D.read_ppm(tmp_path / "a.ppm"), img)
    labels = rng.integers(-1, 5, (5, 7))
    D.write_pgm(tmp_path / "a.pgm", labels)
    assert np.array_equal(D.read_pgm(tmp_path / "a.pgm"), labels)


def test_byte_quantization_is_stable(rng):
    b = rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)
    assert np.array_equal(D.to_bytes(D.from_bytes(b)), b)


@pytest.mark.parametrize("payload,match", [
    (b"P3\n1 1\n255\nabc", "bad magic"),
    (b"P6\n2 2\n255\nabc", "payload bytes"),
    (b"P6\nx 2\n255\n", "malformed"),
    (b"P6\n1 1\n65535\n\x00\x00\x00", "maxval"),
])
def test_ppm_errors(tmp_path, payload, match):
    p = tmp_path / "bad.ppm"
    p.write_bytes(payload)
    with pytest.raises(D.DatasetError, match=match):
        D.read_ppm(p)


def test_ppm_header_comments(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n1 1\n255\n\xff\x00\x80")
    assert D.read_ppm_bytes(p).tolist() == [[[255, 0, 128]]]


def test_dataset_write_read(tmp_path):
    m = D.DatasetManifest(str(tmp_path / "ds"), seed=3, image_size=16, n_train_s=3, n_train_t=2,
                          n_val_t=2)
    D.write_dataset(m)
    back = D.read_dataset(tmp_path / "ds")
    assert back.n_train_s == 3 and back.seed == 3
    xs, ys = D.load_split(back, "source", with_labels=True)
    assert xs.shape == (3, 3, 16, 16) and ys.shape == (3, 16, 16)
    # target-train and validation labels live apart from anything training reads
    assert "eval_only" in str(back.label_path("target", 0))
    assert "eval_only" in str(back.label_path("val", 1))
    # on-disk and in-memory generation agree pixel for pixel
    mem = ToyData.synthesize(3, 3, 2, 2, size=16)
    assert np.array_equal(mem.source_images, xs) and np.array_equal(mem.source_labels, ys)
    assert np.array_equal(mem.val_images, D.load_split(back, "val"))


def test_dataset_is_reproducible(tmp_path):
    for name in ("a", "b"):
        D.write_dataset(D.DatasetManifest(str(tmp_path / name), seed=1, image_size=16,
                                          n_train_s=2, n_train_t=2, n_val_t=1))
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.p?m"))
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_read_dataset_errors(tmp_path):
    with pytest.raises(D.DatasetError, match="not found"):
        D.read_dataset(tmp_path)
    (tmp_path / D.MANIFEST_NAME).write_text("seed=1\nbogus=2\n")
    with pytest.raises(D.DatasetError, match="unknown"):
        D.read_dataset(tmp_path)
    (tmp_path / D.MANIFEST_NAME).write_text("n_train_s=1\nn_train_t=0\nn_val_t=0\n")
    with pytest.raises(D.DatasetError, match="missing"):
        D.read_dataset(tmp_path)


def test_derive_rng_labels_separate_streams():
    a = D.derive_rng(0, "x").integers(0, 2 ** 31, 4)
    b = D.derive_rng(0, "y").integers(0, 2 ** 31, 4)
    c = D.derive_rng(0, "x").integers(0, 2 ** 31, 4)
    assert np.array_equal(a, c) and not np.array_equal(a, b)
