import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slicerecon.data import (
    DatasetManifest,
    ManifestEntry,
    PhantomSpec,
    Volume,
    default_slice_range,
    generate_phantoms,
    load_volume,
    normalize_volume,
    plan_phantoms,
    preprocess,
    render_phantom,
    save_volume,
    select_slices,
    zero_pad_slice,
)
from slicerecon.errors import BoundsError, ConfigError, DataError, DimensionError, FormatError


def _vol(pixels, **kw):
    return Volume(kw.pop("subject_id", "s1"), kw.pop("scan_id", "s1_a"), pixels, **kw)


# ---------------------------------------------------------------- zero padding


def test_pad_paper_size():
    s = np.random.default_rng(0).random((176, 240))
    out = zero_pad_slice(s, 256)
    assert out.shape == (176, 256)
    assert np.all(out[:, :8] == 0) and np.all(out[:, -8:] == 0)
    np.testing.assert_array_equal(out[:, 8:248], s)


def test_pad_noop():
    s = np.random.default_rng(1).random((176, 256))
    np.testing.assert_array_equal(zero_pad_slice(s, 256), s)


def test_pad_odd_remainder_goes_right():
    out = zero_pad_slice(np.ones((4, 5)), 9)
    expected = np.zeros((4, 9))
    expected[:, 2:7] = 1
    np.testing.assert_array_equal(out, expected)


def test_pad_too_wide():
    with pytest.raises(DimensionError):
        zero_pad_slice(np.ones((4, 10)), 9)


@given(
    h=st.integers(1, 6),
    w=st.integers(1, 12),
    extra=st.integers(0, 9),
    seed=st.integers(0, 2**16),
)
def test_pad_then_crop_recovers_input(h, w, extra, seed):
    s = np.random.default_rng(seed).random((h, w))
    out = zero_pad_slice(s, w + extra)
    left = extra // 2
    np.testing.assert_array_equal(out[:, left : left + w], s)
    assert out.shape == (h, w + extra)


# ---------------------------------------------------------------- normalization


def test_normalize_midpoint():
    px = np.full((2, 3, 3), 60.0)
    px[0, 0, 0], px[1, 2, 2] = 10.0, 110.0
    out = normalize_volume(_vol(px)).pixels
    assert out[0, 1, 1] == pytest.approx(0.5)
    assert out.min() == 0 and out.max() == 1


def test_normalize_constant_is_zero():
    out = normalize_volume(_vol(np.full((3, 4, 4), 7))).pixels
    assert np.all(out == 0)


def test_normalize_random_extrema():
    px = np.random.default_rng(2).normal(size=(3, 8, 8)) * 40 + 100
    out = normalize_volume(_vol(px)).pixels
    assert out.min() == 0.0 and out.max() == 1.0


def test_normalize_rejects_nonfinite():
    px = np.ones((1, 2, 2))
    px[0, 0, 0] = np.nan
    with pytest.raises(DataError):
        normalize_volume(_vol(px))


@settings(max_examples=50)
@given(arrays(np.float64, (2, 4, 5), elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_normalize_idempotent(px):
    once = normalize_volume(_vol(px))
    twice = normalize_volume(once)
    np.testing.assert_array_equal(once.pixels, twice.pixels)
    assert once.pixels.min() >= 0 and once.pixels.max() <= 1


# ---------------------------------------------------------------- slice selection


def test_select_slices_count_and_identity():
    v = _vol(np.arange(256 * 4, dtype=np.float64).reshape(256, 2, 2))
    sub = select_slices(v, (100, 139))
    assert sub.n_slices == 40
    np.testing.assert_array_equal(sub.pixels[0], v.pixels[100])
    same = select_slices(v, (0, 255))
    np.testing.assert_array_equal(same.pixels, v.pixels)
    assert same.scan_id == v.scan_id and same.cdr == v.cdr


@pytest.mark.parametrize("rng_", [(10, 9), (-1, 3), (0, 256)])
def test_select_slices_bounds(rng_):
    v = _vol(np.zeros((256, 2, 2)))
    with pytest.raises(BoundsError):
        select_slices(v, rng_)


def test_default_slice_range_middle_40_percent():
    assert default_slice_range(100) == (30, 69)
    lo, hi = default_slice_range(256)
    assert hi - lo + 1 == 102 and lo == 77


def test_preprocess_order_and_exclusion():
    px = np.arange(10 * 2 * 3, dtype=np.float64).reshape(10, 2, 3)
    v = _vol(px)
    out = preprocess(v, target_width=5, slice_range=(2, 8), exclude=[4, 9])
    # slices 2..8 minus original index 4
    assert out.n_slices == 6
    assert out.pixels.shape[2] == 5
    assert np.all(out.pixels[:, :, 0] == 0) and np.all(out.pixels[:, :, 4] == 0)


def test_volume_rejects_bad_label():
    with pytest.raises(DataError):
        _vol(np.zeros((1, 2, 2)), cdr=3)
    with pytest.raises(DataError):
        _vol(np.zeros((1, 2, 2)), split="holdout")


# ---------------------------------------------------------------- volume files


def _random_volume(seed=0, n=12):
    px = np.random.default_rng(seed).integers(0, 65536, size=(n, 6, 7), dtype=np.uint16)
    return Volume("sub-1", "sub-1_ses-1", px, cdr=0.5, split="validation")


def _entry_for(v, path, n_slices=None):
    return ManifestEntry(
        path=str(path),
        subject_id=v.subject_id,
        scan_id=v.scan_id,
        cdr=v.cdr,
        split=v.split,
        n_slices=v.n_slices if n_slices is None else n_slices,
    )


def test_volume_round_trip(tmp_path):
    v = _random_volume()
    p = tmp_path / "a.vol"
    save_volume(v, p)
    back = load_volume(p, _entry_for(v, p))
    assert back.same_as(v)
    raw = p.read_bytes()
    assert raw[:4] == b"VOLR" and len(raw) == 32 + 2 * v.pixels.size


def test_truncated_volume_file(tmp_path):
    v = _random_volume()
    p = tmp_path / "a.vol"
    save_volume(v, p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_volume(p)
    p.write_bytes(b"VOLR\x01")
    with pytest.raises(FormatError):
        load_volume(p)


def test_bad_magic(tmp_path):
    v = _random_volume()
    p = tmp_path / "a.vol"
    save_volume(v, p)
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(FormatError):
        load_volume(p)


def test_manifest_slice_count_mismatch(tmp_path):
    v = _random_volume(n=11)
    p = tmp_path / "a.vol"
    save_volume(v, p)
    with pytest.raises(FormatError):
        load_volume(p, _entry_for(v, p, n_slices=12))


def test_save_rejects_non_integral(tmp_path):
    with pytest.raises(FormatError):
        save_volume(_vol(np.full((1, 2, 2), 0.5)), tmp_path / "x.vol")


# ---------------------------------------------------------------- manifest


def test_manifest_round_trip_and_discipline(tmp_path):
    e1 = ManifestEntry("a.vol", "s1", "s1_a", 0.0, "train", 12)
    e2 = ManifestEntry("b.vol", "s1", "s1_b", 0.0, "train", 12, (2, 9), (4,))
    m = DatasetManifest([e1, e2])
    m.save(tmp_path / "m.json")
    back = DatasetManifest.read(tmp_path / "m.json")
    assert back.entries == [e1, e2]
    assert back.root == tmp_path

    with pytest.raises(DataError, match="both"):
        DatasetManifest([e1, ManifestEntry("c.vol", "s1", "s1_c", 0.0, "test")]).validate()
    with pytest.raises(DataError, match="duplicate"):
        DatasetManifest([e1, e1]).validate()


def test_manifest_rejects_unknown_keys(tmp_path):
    doc = {"format_version": 1, "entries": [{"path": "a", "subject_id": "s", "scan_id": "x", "cdr": 0,
                                             "split": "train", "quality": "good"}]}
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        DatasetManifest.read(tmp_path / "m.json")


# ---------------------------------------------------------------- phantoms

SMALL = PhantomSpec(seed=1, n_healthy=4, n_anomalous=4, slices_per_volume=12, slice_size=(64, 64),
                    n_train=2, validation_fraction=0.5)


def _dir_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_phantoms_deterministic(tmp_path):
    generate_phantoms(SMALL, tmp_path / "a")
    generate_phantoms(SMALL, tmp_path / "b")
    a, b = _dir_bytes(tmp_path / "a"), _dir_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) == 9
    assert a == b


def test_phantom_manifest_labels(tmp_path):
    m = generate_phantoms(SMALL, tmp_path)
    assert all(e.cdr == 0 for e in m.split("train"))
    assert len(m.split("train")) == 2
    assert {e.cdr for e in m.entries if e.cdr} <= {0.5, 1.0, 2.0}
    v = m.load(m.entries[0])
    assert v.pixels.shape == (12, 64, 64) and v.pixels.dtype == np.uint16


def test_criterion7_split_sizes():
    plan = plan_phantoms(PhantomSpec())
    count = lambda split, healthy: sum(
        1 for p in plan if p["split"] == split and (p["cdr"] == 0) == healthy
    )
    assert count("train", True) == 40 and count("train", False) == 0
    assert count("validation", True) == 10 and count("validation", False) == 10
    assert count("test", True) == 20 and count("test", False) == 20
    test_tiers = [p["cdr"] for p in plan if p["split"] == "test" and p["cdr"]]
    assert {test_tiers.count(c) for c in (0.5, 1.0, 2.0)} == {7, 6}


def test_phantom_too_few_slices():
    with pytest.raises(ConfigError):
        plan_phantoms(PhantomSpec(slices_per_volume=5))


def test_zero_severity_matches_healthy_path():
    a = render_phantom(np.random.default_rng(5), 12, (32, 32), severity=0.0, noise_sigma=0.02)
    b = render_phantom(np.random.default_rng(5), 12, (32, 32), noise_sigma=0.02)
    np.testing.assert_array_equal(a, b)


def test_severity_shrinks_bright_structures():
    # threshold above the tissue/ribbon-jitter range picks out ribbon + nuclei
    def bright_area(sev):
        areas = []
        for s in range(8):
            img = render_phantom(np.random.default_rng(s), 12, (64, 64), severity=sev)
            areas.append((img > 0.68).sum())
        return np.mean(areas)

    assert bright_area(1.0) < bright_area(0.1)
