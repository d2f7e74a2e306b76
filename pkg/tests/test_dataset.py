import numpy as np
import pytest

from biqa.dataset import (
    DatasetError,
    DatasetManifest,
    ImageRecord,
    bilinear_resize,
    load_manifest,
    rescale_mos,
    resize_short_side_and_center_crop,
    sample_patches,
    split_dataset,
    write_manifest_csv,
)
from biqa.png_io import write_png
from biqa.rng import SplitMix64


def _record(rid="img", h=20, w=20, seed=0):
    pixels = SplitMix64(seed).uniform_block(h * w).reshape(h, w, 1)
    return ImageRecord(id=rid, pixels=pixels)


def _write_dataset(tmp_path, n=6):
    rows = []
    for i in range(n):
        rid = f"r{i:03d}"
        img = SplitMix64(i).uniform_block(12 * 12).reshape(12, 12)
        write_png(str(tmp_path / f"{rid}.png"), img)
        rows.append((rid, f"{rid}.png", 10.0 + 5.0 * i))
    path = str(tmp_path / "set.csv")
    write_manifest_csv(path, rows)
    return path


def test_manifest_roundtrip(tmp_path):
    path = _write_dataset(tmp_path)
    m = load_manifest(path)
    assert m.name == "set"
    assert len(m.records) == 6
    assert m.records[0].pixels.shape == (12, 12, 1)
    assert m.labels["r002"] == 20.0
    assert m.rescaled is None


def test_manifest_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,path,score\nx,y,1\n")
    with pytest.raises(DatasetError, match="header"):
        load_manifest(str(path))


def test_manifest_rejects_duplicate_ids(tmp_path):
    img = np.zeros((4, 4))
    write_png(str(tmp_path / "a.png"), img)
    path = tmp_path / "dup.csv"
    path.write_text("id,image_path,mos\na,a.png,1\na,a.png,2\n")
    with pytest.raises(DatasetError, match="duplicate"):
        load_manifest(str(path))


def test_manifest_rejects_missing_image(tmp_path):
    path = tmp_path / "gone.csv"
    path.write_text("id,image_path,mos\na,missing.png,1\n")
    with pytest.raises(DatasetError, match="cannot read"):
        load_manifest(str(path))


def test_rescale_spans_unit_interval():
    m = DatasetManifest(
        name="t",
        records=[_record(f"i{k}") for k in range(3)],
        labels={"i0": 10.0, "i1": 30.0, "i2": 20.0},
    )
    r = rescale_mos(m)
    assert r.rescaled == {"i0": 0.0, "i1": 1.0, "i2": 0.5}
    assert r.labels == m.labels  # raw labels kept


def test_rescale_rejects_constant_labels():
    m = DatasetManifest(
        name="t", records=[_record("a"), _record("b")], labels={"a": 5.0, "b": 5.0}
    )
    with pytest.raises(DatasetError, match="identical"):
        rescale_mos(m)


def test_split_sizes_and_disjointness():
    recs = [_record(f"i{k:02d}") for k in range(10)]
    m = DatasetManifest(name="t", records=recs, labels={r.id: float(k) for k, r in enumerate(recs)})
    s = split_dataset(m, seed=5, fraction=0.8)
    assert len(s.train_ids) == 8 and len(s.test_ids) == 2
    assert set(s.train_ids) | set(s.test_ids) == {r.id for r in recs}
    assert not set(s.train_ids) & set(s.test_ids)


def test_split_independent_of_record_order():
    recs = [_record(f"i{k:02d}") for k in range(10)]
    labels = {r.id: 0.5 for r in recs}
    a = split_dataset(DatasetManifest("t", recs, labels), seed=3)
    b = split_dataset(DatasetManifest("t", recs[::-1], labels), seed=3)
    assert a == b


def test_split_varies_with_seed():
    recs = [_record(f"i{k:02d}") for k in range(30)]
    m = DatasetManifest("t", recs, {r.id: 0.5 for r in recs})
    assert split_dataset(m, 1).train_ids != split_dataset(m, 2).train_ids


def test_split_rejects_degenerate():
    recs = [_record("a"), _record("b")]
    m = DatasetManifest("t", recs, {"a": 1.0, "b": 2.0})
    with pytest.raises(DatasetError):
        split_dataset(m, 0, fraction=0.99)


def test_sample_patches_within_bounds_and_deterministic():
    rec = _record(h=20, w=20)
    pats = sample_patches(rec, 8, 9, allow_flip=True, rng=SplitMix64(4))
    assert len(pats) == 8
    for p in pats:
        assert p.pixels.shape == (9, 9, 1)
        assert p.source_id == rec.id
    again = sample_patches(rec, 8, 9, allow_flip=True, rng=SplitMix64(4))
    for a, b in zip(pats, again):
        assert np.array_equal(a.pixels, b.pixels)
        assert a.flipped == b.flipped


def test_sample_patches_no_flip_means_none_flipped():
    rec = _record(h=16, w=16)
    pats = sample_patches(rec, 50, 8, allow_flip=False, rng=SplitMix64(1))
    assert not any(p.flipped for p in pats)


def test_sample_patches_flip_mirrors_columns():
    rec = _record(h=10, w=10, seed=9)
    pats = sample_patches(rec, 40, 10, allow_flip=True, rng=SplitMix64(2))
    # patch size == image size pins the crop, so only the flip varies
    flipped = [p for p in pats if p.flipped]
    straight = [p for p in pats if not p.flipped]
    assert flipped and straight
    assert np.array_equal(flipped[0].pixels, straight[0].pixels[:, ::-1, :])


def test_sample_patches_rejects_small_image():
    with pytest.raises(DatasetError, match="smaller than patch"):
        sample_patches(_record(h=5, w=5), 1, 8, allow_flip=False, rng=SplitMix64(0))


def test_bilinear_identity_when_same_size():
    img = SplitMix64(6).uniform_block(7 * 9).reshape(7, 9, 1)
    out = bilinear_resize(img, 7, 9)
    assert np.array_equal(out, img)


def test_bilinear_preserves_constant():
    img = np.full((5, 8, 1), 0.375)
    out = bilinear_resize(img, 11, 3)
    assert np.allclose(out, 0.375, atol=1e-15)


def test_bilinear_downscale_range():
    img = SplitMix64(8).uniform_block(32 * 32).reshape(32, 32, 1)
    out = bilinear_resize(img, 16, 16)
    assert out.shape == (16, 16, 1)
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


def test_resize_and_crop_shapes():
    rec = ImageRecord(id="x", pixels=SplitMix64(3).uniform_block(30 * 48).reshape(30, 48, 1))
    p = resize_short_side_and_center_crop(rec, short_side=20, crop=16)
    assert p.pixels.shape == (16, 16, 1)
    with pytest.raises(DatasetError):
        resize_short_side_and_center_crop(rec, short_side=10, crop=16)


def test_resize_keeps_aspect():
    rec = ImageRecord(id="x", pixels=np.zeros((30, 60, 1)))
    p = resize_short_side_and_center_crop(rec, short_side=15, crop=15)
    assert p.pixels.shape == (15, 15, 1)
