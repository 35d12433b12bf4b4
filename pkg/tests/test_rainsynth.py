import numpy as np
import pytest
from conftest import smooth_video
from hypothesis import given
from hypothesis import strategies as st

from rainstream.analysis import psnr
from rainstream.rainsynth import (
    GRID,
    RainConfig,
    assign_splits,
    build_dataset,
    composite,
    load_split,
    random_config,
    read_manifest,
    render_streaks,
    snap,
)


@pytest.mark.parametrize("kw", [{"density": 0.0}, {"opacity": 0.0}])
def test_no_rain_renders_zeros(kw):
    s = render_streaks((3, 20, 20), RainConfig(**kw))
    assert s.shape == (3, 1, 20, 20) and s.dtype == np.float32
    assert not np.any(s)


@pytest.mark.parametrize("field,value", [("direction", 80), ("density", 60), ("opacity", 1.5),
                                         ("falling_speed", 50), ("scene_depth", 0), ("wind_variation", 40)])
def test_config_ranges_are_enforced(field, value):
    with pytest.raises(ValueError, match=field):
        RainConfig(**{field: value})


def test_streak_geometry_follows_direction_and_speed():
    cfg = RainConfig(direction=30.0, falling_speed=240.0, density=20, seed=1)
    _, geom = render_streaks((5, 40, 40), cfg, return_geometry=True)
    d = geom.displacements().reshape(-1, 2)
    angles = np.degrees(np.arctan2(d[:, 0], d[:, 1]))
    np.testing.assert_allclose(angles, 30.0, atol=0.5)
    np.testing.assert_allclose(np.hypot(d[:, 0], d[:, 1]), 10.0, rtol=1e-9)
    axis = geom.heads - geom.tails
    np.testing.assert_allclose(np.degrees(np.arctan2(axis[..., 0], axis[..., 1])), 30.0, atol=0.5)


def test_streaks_stay_below_opacity_and_on_grid():
    cfg = RainConfig(opacity=0.37, density=50, scale=2.0, seed=3)
    s = render_streaks((4, 32, 32), cfg)
    assert s.max() <= np.float32(snap(0.37)) and s.min() >= 0
    assert s.max() > 0.3
    np.testing.assert_array_equal(s / GRID, np.round(s / GRID))


def test_rendering_is_deterministic_per_seed():
    a = render_streaks((3, 24, 24), RainConfig(seed=11, density=30))
    b = render_streaks((3, 24, 24), RainConfig(seed=11, density=30))
    c = render_streaks((3, 24, 24), RainConfig(seed=12, density=30))
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()


def test_composite_worked_examples():
    c = np.array([0.2, 0.9, 0.5], np.float32).reshape(1, 3, 1, 1)
    s = np.array([0.25], np.float32).reshape(1, 1, 1, 1)
    t = composite(c, s)
    np.testing.assert_allclose(t.x.ravel(), [0.45, 1.0, 0.75], atol=GRID)
    np.testing.assert_allclose(t.s.ravel(), [0.25, 0.1, 0.25], atol=GRID)
    with pytest.raises(ValueError):
        composite(np.zeros((2, 3, 4, 4)), np.zeros((2, 2, 4, 4)))


@given(st.integers(0, 2 ** 32 - 1))
def test_composite_is_exact(seed):
    r = np.random.default_rng(seed)
    c = r.uniform(0, 1, (2, 3, 5, 5))
    s = r.uniform(0, 1, (2, 1, 5, 5)) * (r.uniform(size=(2, 1, 5, 5)) > 0.5)
    t = composite(c, s)
    assert np.array_equal(t.c + t.s, t.x)
    assert np.array_equal(t.x - t.s, t.c)
    assert t.x.max() <= 1.0 and t.s.min() >= 0.0
    assert np.abs(t.c - c).max() <= GRID / 2


def test_random_configs_give_a_wide_quality_span():
    clean = smooth_video(6, 48, 48, seed=2)
    rng = np.random.default_rng(0)
    values = []
    for _ in range(12):
        trip = composite(clean, render_streaks((6, 48, 48), random_config(rng)))
        values.append(psnr(trip.x, trip.c)[1])
    assert min(values) < 30.0 and max(values) > 36.0


def test_split_assignment():
    names = [f"v{i}" for i in range(142)]
    auto = assign_splits(names, "auto", seed=0)
    counts = {k: sum(v == k for v in auto.values()) for k in ("train", "val", "test")}
    assert counts == {"train": 87, "val": 27, "test": 28}
    assert assign_splits(names, "auto", seed=0) == auto
    assert set(assign_splits(names[:3], "val", 0).values()) == {"val"}
    with pytest.raises(ValueError):
        assign_splits(names, "nope", 0)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    clean = {f"clip{i}": smooth_video(3, 16, 20, seed=i) for i in range(4)}
    entries = build_dataset(clean, root, seed=5)
    return root, clean, entries


def test_dataset_layout_and_manifest(dataset):
    root, clean, entries = dataset
    assert len(entries) == 12  # three renders per training video
    vdir = root / "train" / "clip0_r1"
    assert sorted(p.name for p in vdir.iterdir()) == ["clean", "rain", "streak"]
    assert sorted(p.name for p in (vdir / "rain").iterdir()) == [f"frame_{i:05d}.ppm" for i in range(3)]
    assert (vdir / "streak" / "frame_00000.pgm").exists()
    parsed = read_manifest(root)
    assert [e.line() for e in parsed] == [e.line() for e in entries]
    line = (root / "manifest.txt").read_text().splitlines()[0]
    for key in ("video=", "split=", "clean=", "scale=", "direction=", "density=", "scene_depth=",
                "depth_attenuation=", "opacity=", "falling_speed=", "wind_variation=", "seed=", "psnr_db="):
        assert key in line
    assert len({e.config.seed for e in entries}) == 12


def test_dataset_bytes_are_deterministic(dataset, tmp_path):
    root, clean, _ = dataset
    build_dataset(clean, tmp_path, seed=5)
    for a in sorted(root.rglob("*")):
        if a.is_file():
            assert a.read_bytes() == (tmp_path / a.relative_to(root)).read_bytes(), a


def test_loaded_split_is_exact(dataset):
    root, _, _ = dataset
    items = load_split(root, "train")
    assert len(items) == 12
    for _, t in items:
        assert np.array_equal(t.x, t.c + t.s)
        assert t.s.min() >= 0
    with pytest.raises(FileNotFoundError):
        load_split(root, "test")


def test_base_config_fixes_everything_but_the_seed(tmp_path):
    base = RainConfig(direction=10.0, density=5.0)
    entries = build_dataset({"a": smooth_video(2, 8, 8)}, tmp_path, split="test", base_config=base)
    assert len(entries) == 1 and entries[0].split == "test"
    assert entries[0].config.direction == 10.0 and entries[0].config.seed != base.seed
