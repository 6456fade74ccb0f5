import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from diffseg.rng import stream
from diffseg.synthdata import (
    LabelFormatError,
    PlacementError,
    SceneSpec,
    augment,
    gen_scene,
    load_image,
    load_labels,
    read_manifest,
    sample_for,
    save_image,
    save_labels,
    write_dataset,
)

SPEC = SceneSpec()
HOUSE, ROOF, CHIMNEY = 1, 2, 3
FOUR = ndimage.generate_binary_structure(2, 1)


@pytest.fixture(scope="module")
def scenes():
    return [sample_for(SPEC, 11, "train", i).labels for i in range(1000)]


def test_same_seed_is_bit_identical():
    a = gen_scene(SPEC, stream(3, 1, 0, 5))
    b = gen_scene(SPEC, stream(3, 1, 0, 5))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)


def test_different_indices_differ():
    assert not np.array_equal(sample_for(SPEC, 0, "train", 0).labels, sample_for(SPEC, 0, "train", 1).labels)


def test_zero_objects_gives_background():
    spec = SceneSpec(object_count=(0, 0))
    pair = gen_scene(spec, np.random.default_rng(0))
    assert not pair.labels.any()
    assert pair.image.shape == (64, 64, 3)


def test_output_ranges():
    pair = sample_for(SPEC, 0, "eval", 3)
    assert pair.labels.dtype.kind == "i" and pair.labels.min() >= 0 and pair.labels.max() < 4
    assert 0.0 <= pair.image.min() and pair.image.max() <= 1.0


def test_chimneys_always_touch_a_house(scenes):
    seen = 0
    for labels in scenes:
        comps, n = ndimage.label(labels == CHIMNEY, FOUR)
        for c in range(1, n + 1):
            seen += 1
            ring = ndimage.binary_dilation(comps == c, FOUR) & (comps != c)
            assert (labels[ring] == HOUSE).any()
    assert seen > 100


def test_roofs_always_touch_a_house(scenes):
    for labels in scenes:
        comps, n = ndimage.label(labels == ROOF, FOUR)
        for c in range(1, n + 1):
            ring = ndimage.binary_dilation(comps == c, FOUR) & (comps != c)
            assert np.isin(labels[ring], (HOUSE, CHIMNEY)).any()


def test_components_have_no_holes(scenes):
    for labels in scenes[:300]:
        for k in range(1, SPEC.num_classes):
            comps, n = ndimage.label(labels == k, FOUR)
            for c in range(1, n + 1):
                comp = comps == c
                assert np.array_equal(ndimage.binary_fill_holes(comp), comp)


def test_rect_classes_fill_their_bounding_box(scenes):
    # rectangle-only classes: a component equals its bounding box, so its boundary sits on 2 rows and 2 columns
    for labels in scenes[:300]:
        for k in (ROOF, CHIMNEY):
            comps, _ = ndimage.label(labels == k, FOUR)
            for i, sl in enumerate(ndimage.find_objects(comps), 1):
                assert np.all(comps[sl] == i)


def test_class_histogram_covers_all_classes(scenes):
    counts = np.bincount(np.concatenate([s.ravel() for s in scenes]), minlength=4)
    assert np.all(counts > 0)


def test_shapes_include_l_polygons(scenes):
    # some house component must be a non-rectangle
    for labels in scenes:
        comps, _ = ndimage.label(labels == HOUSE, FOUR)
        for i, sl in enumerate(ndimage.find_objects(comps), 1):
            if not np.all(comps[sl] == i) and not np.isin(labels[sl][comps[sl] != i], (ROOF, CHIMNEY)).all():
                return
    pytest.fail("no L-shaped house generated")


def test_rule_cycle_rejected():
    with pytest.raises(ValueError):
        SceneSpec(requires=((2, 1), (1, 2)))


def test_single_class_rejected():
    with pytest.raises(ValueError):
        SceneSpec(num_classes=1, class_shapes={}, class_sizes={}, requires=())


def test_unplaceable_parent_raises():
    spec = SceneSpec(height=8, width=8, grid=1)
    with pytest.raises(PlacementError):
        gen_scene(spec, np.random.default_rng(0))


def test_augment_keeps_shapes_and_label_set():
    pair = sample_for(SPEC, 0, "train", 2)
    rng = np.random.default_rng(0)
    for _ in range(5):
        img, lab = augment(pair.image, pair.labels, rng)
        assert img.shape == pair.image.shape and lab.shape == pair.labels.shape
        assert set(np.unique(lab)) <= set(range(4))


def test_augment_flip_only_is_mirror():
    pair = sample_for(SPEC, 0, "train", 2)

    class AlwaysFlip:
        def random(self):
            return 0.0

        def uniform(self, lo, hi):
            return 1.0

    img, lab = augment(pair.image, pair.labels, AlwaysFlip())
    assert np.array_equal(lab, pair.labels[:, ::-1]) and np.array_equal(img, pair.image[:, ::-1])


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def test_label_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    for i, K in enumerate((2, 4, 17, 255)):
        g = rng.integers(0, K, (13, 7))
        save_labels(g, tmp_path / f"{i}.pgm", K)
        assert np.array_equal(load_labels(tmp_path / f"{i}.pgm"), g)


def test_label_too_many_classes(tmp_path):
    with pytest.raises(LabelFormatError):
        save_labels(np.zeros((2, 2), int), tmp_path / "x.pgm", 256)
    with pytest.raises(LabelFormatError):
        save_labels(np.array([[256]]), tmp_path / "x.pgm")


def test_label_file_readable_by_pillow(tmp_path):
    g = np.random.default_rng(1).integers(0, 5, (9, 11))
    save_labels(g, tmp_path / "x.pgm", 5)
    with Image.open(tmp_path / "x.pgm") as im:
        assert im.mode == "L"
        assert np.array_equal(np.asarray(im), g)


def test_label_file_written_by_pillow(tmp_path):
    g = np.random.default_rng(2).integers(0, 7, (6, 10)).astype(np.uint8)
    Image.fromarray(g, mode="L").save(tmp_path / "x.pgm")
    assert np.array_equal(load_labels(tmp_path / "x.pgm"), g)


def test_label_header_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n# depth\n255\n\x01\x03")
    assert load_labels(tmp_path / "c.pgm").tolist() == [[1, 3]]


def test_label_bad_files(tmp_path):
    (tmp_path / "deep.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x01")
    with pytest.raises(LabelFormatError):
        load_labels(tmp_path / "deep.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(LabelFormatError):
        load_labels(tmp_path / "short.pgm")
    (tmp_path / "ppm.pgm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(LabelFormatError):
        load_labels(tmp_path / "ppm.pgm")


def test_image_constant_half(tmp_path):
    save_image(np.full((4, 4, 3), 0.5), tmp_path / "h.ppm")
    out = load_image(tmp_path / "h.ppm")
    np.testing.assert_array_equal(out, 128 / 255)
    assert abs(out - 0.5).max() <= 1 / 255


def test_image_black_white_exact(tmp_path):
    for v in (0.0, 1.0):
        save_image(np.full((3, 5, 3), v), tmp_path / "bw.ppm")
        np.testing.assert_array_equal(load_image(tmp_path / "bw.ppm"), v)


def test_image_random_roundtrip_bound(tmp_path):
    img = np.random.default_rng(3).random((32, 32, 3))
    save_image(img, tmp_path / "r.ppm")
    assert np.abs(load_image(tmp_path / "r.ppm") - img).max() <= 1 / 255
    with Image.open(tmp_path / "r.ppm") as im:
        assert np.array_equal(np.asarray(im), np.round(img * 255).astype(np.uint8))


def test_image_wrong_shape(tmp_path):
    with pytest.raises(LabelFormatError):
        save_image(np.zeros((4, 4)), tmp_path / "x.ppm")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_dataset_layout_and_determinism(tmp_path):
    m = write_dataset(SPEC, tmp_path / "a", 7, 5, 3)
    write_dataset(SPEC, tmp_path / "b", 7, 5, 3, workers=3)
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")
    rows = read_manifest(m["eval"])
    assert len(rows) == 3 and rows[0][2] == "eval/labels/00000.pgm"
    img_path, lab_path, _ = rows[1]
    ref = sample_for(SPEC, 7, "eval", 1)
    assert np.array_equal(load_labels(lab_path), ref.labels)
    assert np.abs(load_image(img_path) - ref.image).max() <= 1 / 255


def test_every_drawn_class_is_visible():
    # each labelled class has its own colour in the image
    pair = gen_scene(SceneSpec(noise_level=0.0), np.random.default_rng(4))
    for k in np.unique(pair.labels):
        region = pair.image[pair.labels == k]
        assert region.std(axis=0).max() < 0.1
