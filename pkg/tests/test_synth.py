import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Point, Polygon

from bevbridge.det import BoxBEV
from bevbridge.model import ToyEncoder
from bevbridge.synth import (CLASSES_5, MAX_BDA_ROT, BdaParams, SceneConfig, SceneGenerationError, apply_bda,
                             boxes_overlap, class_masks, generate_scene, in_convex_polygon, radar_points,
                             rasterize, read_scenes, sample_bda, vehicle_mask, write_scenes)
from bevbridge.tensor import Tensor

CFG = SceneConfig()


def _poly(box: BoxBEV) -> Polygon:
    return Polygon(box.corners())


def test_scene_sweep_against_shapely():
    for seed in range(1000):
        s = generate_scene(seed, CFG)
        road = Polygon(s.drivable)
        lo, hi = CFG.vehicles
        assert lo <= len(s.vehicles) <= hi
        for i, a in enumerate(s.vehicles):
            assert road.covers(Point(a.x, a.y)), seed
            for b in s.vehicles[i + 1:]:
                assert not _poly(a).intersects(_poly(b)), seed
        for c in s.crossings:
            assert road.buffer(1e-9).covers(Polygon(c)), seed


def test_generation_is_deterministic():
    a, b = generate_scene(42, CFG), generate_scene(42, CFG)
    assert a.same_as(b)
    assert a.to_record() == b.to_record()
    assert not generate_scene(43, CFG).same_as(a)


def test_zero_vehicle_scene():
    cfg = SceneConfig(vehicles=(0, 0))
    s = generate_scene(5, cfg)
    entry = rasterize(s, cfg, np.random.default_rng(0))
    assert s.vehicles == [] and entry.boxes == []
    assert not entry.seg_gt[CLASSES_5.index("vehicle")].any()
    assert not entry.inputs[2].any()  # no radar hits


def test_impossible_constraints_are_rejected():
    cfg = SceneConfig(vehicles=(6, 6), road_width=(4.0, 4.0), min_vehicle_gap=10.0, max_attempts=20)
    with pytest.raises(SceneGenerationError, match="vehicle"):
        generate_scene(0, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(num_classes=6)
    with pytest.raises(ValueError):
        SceneConfig(vehicles=(3, 1))


def test_grids():
    assert CFG.extent == pytest.approx(25.6)
    assert CFG.fine_cells == 50
    assert CFG.fine_grid.cell_size == pytest.approx(0.512)


def test_bda_identity_and_range():
    s = generate_scene(3, CFG)
    assert apply_bda(s, BdaParams()) is s
    with pytest.raises(ValueError):
        apply_bda(s, BdaParams(rot=math.radians(30)))
    with pytest.raises(ValueError):
        apply_bda(s, BdaParams(scale=1.2))
    rng = np.random.default_rng(0)
    for _ in range(50):
        sample_bda(rng).validate()


def test_bda_flip_mirrors_and_reflects_yaw():
    s = generate_scene(11, CFG)
    f = apply_bda(s, BdaParams(flip_x=True))
    for a, b in zip(s.vehicles, f.vehicles):
        assert b.x == pytest.approx(-a.x) and b.y == pytest.approx(a.y)
        assert math.cos(b.yaw - (math.pi - a.yaw)) == pytest.approx(1.0)


def test_bda_rotation_inverse():
    s = generate_scene(8, CFG)
    r = math.radians(10)
    back = apply_bda(apply_bda(s, BdaParams(rot=r)), BdaParams(rot=-r))
    assert back.same_as(s, atol=1e-9)


@given(st.integers(0, 10_000), st.booleans(), st.floats(-MAX_BDA_ROT, MAX_BDA_ROT), st.floats(0.95, 1.05))
@settings(max_examples=25)
def test_augmented_vehicle_mask_matches_boxes(seed, flip, rot, scale):
    s = apply_bda(generate_scene(seed, CFG), BdaParams(flip, rot, scale))
    entry = rasterize(s, CFG, np.random.default_rng(seed))
    mask = entry.seg_gt[CLASSES_5.index("vehicle")]
    assert np.array_equal(mask.astype(bool), vehicle_mask(s.vehicles, CFG.fine_grid))
    masks = class_masks(s, CFG.fine_grid, CLASSES_5)
    crossing, drivable = masks[CLASSES_5.index("ped_crossing")], masks[CLASSES_5.index("drivable")]
    assert np.all(crossing <= drivable)


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_radar_points_inside_boxes(seed):
    s = generate_scene(seed, CFG)
    pts, keep = radar_points(s, np.random.default_rng(seed))
    assert len(pts) == 8 * len(s.vehicles) and keep.shape == (len(pts),)
    for x, y in pts:
        assert any(b.contains(x, y) for b in s.vehicles)


def test_rasterize_shapes_and_binary_gt():
    entry = rasterize(generate_scene(1, CFG), CFG, np.random.default_rng(1))
    assert entry.inputs.shape == (6, 32, 32)
    assert entry.seg_gt.shape == (5, 50, 50)
    assert set(np.unique(entry.seg_gt)) <= {0.0, 1.0}
    cfg7 = SceneConfig(num_classes=7)
    gt7 = rasterize(generate_scene(1, cfg7), cfg7, np.random.default_rng(1)).seg_gt
    assert gt7.shape == (7, 50, 50) and not gt7[1].any() and not gt7[4].any()


def test_interior_cell_is_drivable():
    s = generate_scene(2, CFG)
    centroid = s.drivable.mean(axis=0)
    assert in_convex_polygon(s.drivable, *centroid)


def test_overlap_predicate_matches_shapely():
    rng = np.random.default_rng(0)
    for _ in range(500):
        a = BoxBEV(*rng.uniform(-3, 3, 2), *rng.uniform(0.5, 3, 2), rng.uniform(-3, 3))
        b = BoxBEV(*rng.uniform(-3, 3, 2), *rng.uniform(0.5, 3, 2), rng.uniform(-3, 3))
        assert boxes_overlap(a, b) == _poly(a).intersects(_poly(b))


def test_scene_file_round_trip(tmp_path):
    scenes = [generate_scene(s, CFG) for s in range(4)]
    path = tmp_path / "scenes.jsonl"
    assert write_scenes(path, scenes) == 4
    back = read_scenes(path)
    assert all(a.same_as(b) for a, b in zip(scenes, back))
    path.write_text('{"format": "other", "version": 1}\n')
    with pytest.raises(ValueError):
        read_scenes(path)


def test_toy_encoder(f64, rng):
    enc = ToyEncoder(6, (64, 128), 16, rng)
    x = Tensor(np.zeros((2, 6, 5, 5)))
    a, b = enc(x).data, enc(x).data
    assert a.shape == (2, 16, 5, 5) and np.all(np.isfinite(a)) and np.array_equal(a, b)
    with pytest.raises(ValueError):
        enc(Tensor(np.zeros((1, 5, 4, 4))))
