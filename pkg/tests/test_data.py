import numpy as np
import pytest
from PIL import Image

from lesionclass.data import (
    LabeledImage,
    LesionBox,
    ManifestError,
    MaskPair,
    _axis_weights,
    class_counts,
    downsample_mask,
    load_image,
    load_manifest,
    rasterize_mask,
    stratified_split,
    write_manifest,
)


# ---------------------------------------------------------------------------
# Boxes
# ---------------------------------------------------------------------------


def test_box_validate_bounds():
    LesionBox(0, 0, 4, 4).validate(8, 8)
    with pytest.raises(ValueError):
        LesionBox(2, 0, 2, 4).validate(8, 8)  # empty x-range
    with pytest.raises(ValueError):
        LesionBox(0, 0, 9, 4).validate(8, 8)  # past right edge
    with pytest.raises(ValueError):
        LesionBox(-1, 0, 4, 4).validate(8, 8)


def test_box_area_and_hflip():
    box = LesionBox(1, 2, 4, 7)
    assert box.area == 3 * 5
    flipped = box.hflip(10)
    assert flipped == LesionBox(6, 2, 9, 7)
    assert flipped.hflip(10) == box  # involution
    assert flipped.area == box.area


def test_box_rescale_rounds_outward():
    box = LesionBox(3, 3, 5, 5)
    up = box.rescale(1.5, 1.5)
    # original extent maps to [4.5, 7.5); outward rounding covers it fully
    assert up == LesionBox(4, 4, 8, 8)
    down = box.rescale(0.5, 0.5)
    assert down == LesionBox(1, 1, 3, 3)
    down.validate(8, 8)


# ---------------------------------------------------------------------------
# Image / mask containers
# ---------------------------------------------------------------------------


def test_labeled_image_validation():
    pixels = np.zeros((8, 8), dtype=np.float32)
    LabeledImage("a", pixels, 1, [LesionBox(0, 0, 2, 2)]).validate(3)
    with pytest.raises(ValueError, match="normal"):
        LabeledImage("a", pixels, 0, [LesionBox(0, 0, 2, 2)]).validate(3)
    with pytest.raises(ValueError, match="label"):
        LabeledImage("a", pixels, 3, []).validate(3)
    with pytest.raises(ValueError, match="range"):
        LabeledImage("a", pixels + 2.0, 1, []).validate(3)


def test_mask_pair_invariant():
    pos = np.zeros((4, 4), dtype=np.uint8)
    pos[1:3, 1:3] = 1
    pair = MaskPair(pos, 1 - pos, 4, 4)
    pair.validate()
    assert pair.lesion_fraction == pytest.approx(4 / 16)
    with pytest.raises(ValueError, match="!= 1"):
        MaskPair(pos, pos, 4, 4).validate()


# ---------------------------------------------------------------------------
# Manifest IO
# ---------------------------------------------------------------------------


def _write_png(path, size=16, value=128):
    Image.fromarray(np.full((size, size), value, dtype=np.uint8), mode="L").save(path)


def test_manifest_round_trip(tmp_path):
    _write_png(tmp_path / "a.png")
    _write_png(tmp_path / "b.png")
    text = "normal,lesion\na.png,0\nb.png,1,2;3;10;12|1;1;4;4\n"
    (tmp_path / "manifest.csv").write_text(text)
    manifest = load_manifest(tmp_path / "manifest.csv")
    assert manifest.class_names == ["normal", "lesion"]
    assert len(manifest) == 2
    assert manifest.entries[1].boxes == (LesionBox(2, 3, 10, 12), LesionBox(1, 1, 4, 4))

    out = tmp_path / "copy.csv"
    write_manifest(manifest, out)
    again = load_manifest(out)
    assert again.entries == manifest.entries
    assert again.class_names == manifest.class_names


@pytest.mark.parametrize(
    "row, fragment",
    [
        ("a.png,7", "unknown label"),
        ("a.png,x", "not an integer"),
        ("a.png,1,1;2;3", "4 ';'-separated"),
        ("a.png,0,1;1;4;4", "normal class"),
        ("a.png,1,1;1;99;4", "invalid for width"),
        ("missing.png,1", "not found"),
    ],
)
def test_manifest_errors_name_the_line(tmp_path, row, fragment):
    _write_png(tmp_path / "a.png")
    (tmp_path / "manifest.csv").write_text(f"normal,lesion\n{row}\n")
    with pytest.raises(ManifestError, match="line 2"):
        load_manifest(tmp_path / "manifest.csv")
    with pytest.raises(ManifestError, match=fragment):
        load_manifest(tmp_path / "manifest.csv")


def test_manifest_missing_file_and_header(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "nope.csv")
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(ManifestError, match="header"):
        load_manifest(tmp_path / "empty.csv")


def test_load_image_normalization(tmp_path):
    arr8 = np.arange(256, dtype=np.uint8).reshape(16, 16)
    Image.fromarray(arr8, mode="L").save(tmp_path / "a.png")
    arr16 = (np.arange(256, dtype=np.uint16) * 257).reshape(16, 16)
    Image.fromarray(arr16).save(tmp_path / "b.png")
    (tmp_path / "manifest.csv").write_text("normal,lesion\na.png,0\nb.png,0\n")
    manifest = load_manifest(tmp_path / "manifest.csv")
    im8 = load_image(manifest, manifest.entries[0])
    assert im8.pixels.dtype == np.float32
    assert im8.pixels.max() == pytest.approx(1.0)
    assert im8.pixels[0, 1] == pytest.approx(1 / 255)
    im16 = load_image(manifest, manifest.entries[1])
    assert im16.pixels.max() == pytest.approx(1.0)
    assert im16.id == "b"


# ---------------------------------------------------------------------------
# Mask rasterization + downsampling
# ---------------------------------------------------------------------------


def test_rasterize_union_counts_overlap_once():
    pair = rasterize_mask([LesionBox(0, 0, 4, 4), LesionBox(2, 2, 6, 6)], 8, 8)
    pair.validate()
    assert pair.mask_pos.sum() == 16 + 16 - 4
    assert pair.mask_pos.max() == 1
    empty = rasterize_mask([], 8, 8)
    assert empty.mask_pos.sum() == 0
    empty.validate()


def _area_average_reference(src: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Brute-force per-cell integration, independent of the matrix formulation."""
    h, w = src.shape
    out = np.zeros((th, tw))
    for i in range(th):
        for j in range(tw):
            y0, y1 = i * h / th, (i + 1) * h / th
            x0, x1 = j * w / tw, (j + 1) * w / tw
            total = 0.0
            for yy in range(int(np.floor(y0)), int(np.ceil(y1))):
                for xx in range(int(np.floor(x0)), int(np.ceil(x1))):
                    oy = min(y1, yy + 1) - max(y0, yy)
                    ox = min(x1, xx + 1) - max(x0, xx)
                    if oy > 0 and ox > 0:
                        total += oy * ox * src[yy, xx]
            out[i, j] = total / ((y1 - y0) * (x1 - x0))
    return out


def test_downsample_matches_area_average_oracle():
    rng = np.random.default_rng(7)
    for th, tw in [(3, 3), (5, 7), (4, 4)]:
        src = (rng.random((10, 14)) < 0.4).astype(np.uint8)
        pair = MaskPair(src, 1 - src, 10, 14)
        got = downsample_mask(pair, th, tw)
        got.validate()
        ref_avg = _area_average_reference(src.astype(np.float64), th, tw)
        away_from_tie = np.abs(ref_avg - 0.5) > 1e-9
        assert np.array_equal(got.mask_pos[away_from_tie], (ref_avg >= 0.5)[away_from_tie])


def test_downsample_block_and_fractional_paths_agree():
    rng = np.random.default_rng(11)
    src = (rng.random((16, 16)) < 0.5).astype(np.uint8)
    pair = MaskPair(src, 1 - src, 16, 16)
    block = downsample_mask(pair, 4, 4)
    general = _axis_weights(16, 4) @ src.astype(np.float64) @ _axis_weights(16, 4).T
    assert np.array_equal(block.mask_pos, (general >= 0.5 - 1e-12).astype(np.uint8))


def test_downsample_tie_rounds_to_lesion():
    src = np.array([[1], [0]], dtype=np.uint8)
    pair = MaskPair(src, 1 - src, 2, 1)
    assert downsample_mask(pair, 1, 1).mask_pos[0, 0] == 1


def test_downsample_identity_and_upsample_error():
    src = (np.random.default_rng(3).random((6, 6)) < 0.5).astype(np.uint8)
    pair = MaskPair(src, 1 - src, 6, 6)
    same = downsample_mask(pair, 6, 6)
    assert np.array_equal(same.mask_pos, src)
    once = downsample_mask(pair, 3, 3)
    twice = downsample_mask(once, 3, 3)
    assert np.array_equal(once.mask_pos, twice.mask_pos)  # idempotent at a fixed scale
    with pytest.raises(ValueError, match="upsampling"):
        downsample_mask(pair, 12, 12)


def test_downsample_complement_invariant_random_boxes():
    rng = np.random.default_rng(42)
    for _ in range(50):
        boxes = []
        for _ in range(rng.integers(1, 4)):
            x0 = int(rng.integers(0, 60))
            y0 = int(rng.integers(0, 60))
            boxes.append(LesionBox(x0, y0, x0 + int(rng.integers(1, 64 - x0 + 1)) if x0 < 63 else 64,
                                   y0 + int(rng.integers(1, 64 - y0 + 1)) if y0 < 63 else 64))
        pair = rasterize_mask(boxes, 64, 64)
        for scale in (16, 8, 4, 2, 5):
            down = downsample_mask(pair, scale, scale)
            down.validate()  # includes mask_pos + mask_neg == 1


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def test_stratified_split_counts(mini_dataset):
    train, test = stratified_split(mini_dataset, 0.25, seed=0)
    # sizes 8/6/5/4 -> test 2/2(1.5 rounds up)/1(1.25 rounds down)/1
    assert list(class_counts(test).counts) == [2, 2, 1, 1]
    assert list(class_counts(train).counts) == [6, 4, 4, 3]
    got = sorted(e.path for e in train.entries) + sorted(e.path for e in test.entries)
    assert sorted(got) == sorted(e.path for e in mini_dataset.entries)  # disjoint + exhaustive


def test_stratified_split_min_one_and_determinism(mini_dataset):
    train, test = stratified_split(mini_dataset, 0.01, seed=5)
    assert all(c >= 1 for c in class_counts(test).counts)  # min-1 rule
    t2, s2 = stratified_split(mini_dataset, 0.01, seed=5)
    assert [e.path for e in t2.entries] == [e.path for e in train.entries]
    assert [e.path for e in s2.entries] == [e.path for e in test.entries]
    t3, _ = stratified_split(mini_dataset, 0.01, seed=6)
    assert [e.path for e in t3.entries] != [e.path for e in train.entries]


def test_stratified_split_rejects_emptying_a_class(tmp_path):
    _write_png(tmp_path / "a.png")
    (tmp_path / "manifest.csv").write_text("normal,lesion\na.png,0\na.png,0\na.png,1,0;0;4;4\n")
    manifest = load_manifest(tmp_path / "manifest.csv")
    with pytest.raises(ManifestError, match="empty the train side"):
        stratified_split(manifest, 0.6, seed=0)


def test_class_counts(mini_dataset):
    table = class_counts(mini_dataset)
    assert list(table.counts) == [8, 6, 5, 4]
    table.validate()
