import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest

from depthdistill.stereo import (
    CameraRig,
    ConfigError,
    GenConfig,
    Primitive,
    Scene,
    StereoSample,
    build_dataset,
    disparity_grid,
    generate_scene,
    read_manifest,
    read_sample,
    render_pair,
    render_view,
    write_sample,
)


# ---- brute-force per-pixel ray oracle --------------------------------------
# Independent of the renderer's painter loop: visits every pixel, walks all
# surfaces, resolves occlusion by explicit nearest-depth bookkeeping.


def oracle_surface_color(x, y, base, freq, ang, phase, amp, z, beta, haze):
    wave = np.sin(2.0 * np.pi * freq * (x * np.cos(ang) + y * np.sin(ang)) + phase)
    rgb = np.clip(np.asarray(base) * (1.0 + amp * wave), 0.0, 1.0)
    t = np.exp(-beta * z)
    return rgb * t + np.asarray(haze) * (1.0 - t)


def oracle_render(scene, rig, view):
    h, w = rig.height, rig.width
    img = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    for v in range(h):
        for u in range(w):
            best_z = scene.bg_depth_m
            shift = scene.bg_disp_px if view == "right" else 0
            scale = scene.bg_depth_m / rig.focal_px
            x = (u + shift + 0.5 - w / 2.0) * scale
            y = (v + 0.5 - h / 2.0) * scale
            best = oracle_surface_color(x, y, scene.bg_color, scene.bg_tex_freq,
                                        scene.bg_tex_angle, scene.bg_tex_phase,
                                        scene.tex_amp, scene.bg_depth_m,
                                        scene.fog_beta, scene.haze)
            for p in scene.primitives:
                if not p.depth_m < best_z:
                    continue
                shift = p.disp_px if view == "right" else 0
                scale = p.depth_m / rig.focal_px
                x = (u + shift + 0.5 - w / 2.0) * scale
                y = (v + 0.5 - h / 2.0) * scale
                if p.kind == "rect":
                    hit = abs(x - p.center_x) <= p.half_w and abs(y - p.center_y) <= p.half_h
                else:
                    hit = ((x - p.center_x) / p.half_w) ** 2 + ((y - p.center_y) / p.half_h) ** 2 <= 1.0
                if hit:
                    best_z = p.depth_m
                    best = oracle_surface_color(x, y, p.color, p.tex_freq, p.tex_angle,
                                                p.tex_phase, scene.tex_amp, p.depth_m,
                                                scene.fog_beta, scene.haze)
            img[v, u] = best
            depth[v, u] = best_z
    return np.round(img * 255.0) / 255.0, depth


def consistency_violations(left_img, right_img, left_depth, right_depth, rig):
    """Non-occluded left pixels whose color is not reproduced at u - f*B/Z."""
    h, w = left_depth.shape
    fb = rig.focal_px * rig.baseline_m
    checked = bad = 0
    for v in range(h):
        for u in range(w):
            z = left_depth[v, u]
            ur = int(np.round(u - fb / z))
            if not 0 <= ur < w:
                continue
            if right_depth[v, ur] != z:
                continue  # occluded in the right view
            checked += 1
            if not np.array_equal(left_img[v, u], right_img[v, ur]):
                bad += 1
    return checked, bad


# ---- scene generation -------------------------------------------------------


def test_same_seed_same_scene():
    a, b = generate_scene(5), generate_scene(5)
    assert asdict(a) == asdict(b)


def test_primitive_depths_within_range():
    cfg = GenConfig()
    for seed in range(100):
        s = generate_scene(seed, cfg)
        assert 3 <= len(s.primitives) <= 8
        for p in s.primitives:
            assert 4.0 <= p.depth_m <= 30.0
        assert 40.0 <= s.bg_depth_m <= 60.0


def test_seeds_mostly_differ():
    scenes = [generate_scene(s) for s in range(100)]
    keys = {json.dumps(asdict(sc), sort_keys=True) for sc in scenes}
    assert len(keys) >= 95


def test_depth_snaps_to_whole_pixel_disparities():
    rig = CameraRig()
    fb = rig.focal_px * rig.baseline_m
    for seed in range(20):
        s = generate_scene(seed)
        for p in s.primitives:
            assert p.depth_m == fb / p.disp_px
            assert fb / p.depth_m == pytest.approx(p.disp_px, abs=1e-9)


def test_disparity_grid_contents():
    rig = CameraRig()
    assert disparity_grid(rig, 40.0, 60.0) == [1]
    grid = disparity_grid(rig, 4.0, 30.0)
    assert grid == list(range(2, 14))
    with pytest.raises(ConfigError):
        disparity_grid(CameraRig(focal_px=10.0, baseline_m=0.1), 4.0, 30.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        GenConfig(prim_depth_range=(30.0, 30.0))
    with pytest.raises(ConfigError):
        GenConfig(bg_depth_range=(40.0, 75.0))
    with pytest.raises(ConfigError):
        GenConfig(n_prims_range=(1, 8))
    with pytest.raises(ConfigError):
        CameraRig(focal_px=0.0)


def test_nearer_primitive_has_larger_disparity():
    for seed in range(10):
        s = generate_scene(seed)
        for a in s.primitives:
            for b in s.primitives:
                if a.depth_m < b.depth_m:
                    assert a.disp_px > b.disp_px


# ---- rendering --------------------------------------------------------------


def test_render_matches_ray_oracle_both_views():
    rig = CameraRig(width=48, height=32)
    cfg = GenConfig(rig=rig)
    for seed in (0, 3, 11):
        scene = generate_scene(seed, cfg)
        for view in ("left", "right"):
            img, depth = render_view(scene, rig, view)
            oimg, odepth = oracle_render(scene, rig, view)
            assert np.array_equal(depth, odepth), f"depth mismatch seed {seed} {view}"
            assert np.array_equal(img, oimg), f"color mismatch seed {seed} {view}"


def test_full_frame_plane_shifts_exactly_one_pixel():
    # focal 100 px, baseline 0.5 m, plane at Z = 50 m: disparity is exactly 1
    rig = CameraRig(focal_px=100.0, baseline_m=0.5, width=40, height=24)
    plane = Primitive(kind="rect", disp_px=1, depth_m=50.0, center_x=0.0, center_y=0.0,
                      half_w=1e4, half_h=1e4, color=(0.7, 0.5, 0.3),
                      tex_freq=0.15, tex_angle=0.4, tex_phase=1.0)
    scene = Scene(seed=0, bg_disp_px=1, bg_depth_m=50.0, bg_color=(0.5, 0.5, 0.5),
                  bg_tex_freq=0.1, bg_tex_angle=0.0, bg_tex_phase=0.0,
                  fog_beta=0.03, haze=(0.75, 0.78, 0.82), tex_amp=0.35,
                  primitives=[plane])
    s = render_pair(scene, rig)
    assert np.array_equal(s.right[:, :-1], s.left[:, 1:])
    assert np.all(s.depth_gt == 50.0)


def test_disocclusion_shows_far_surface():
    rig = CameraRig()  # f*B = 54
    fb = rig.focal_px * rig.baseline_m
    z_near, z_far = fb / 10.0, fb / 2.0
    # near rect spans left-view columns ~40..60, far rect ~28..68, same rows
    def world(px, z):
        return (px - rig.width / 2.0) * z / rig.focal_px

    near = Primitive("rect", 10, z_near, world(50, z_near), 0.0,
                     10 * z_near / rig.focal_px, 20 * z_near / rig.focal_px,
                     (0.9, 0.2, 0.2), 0.5, 0.1, 0.0)
    far = Primitive("rect", 2, z_far, world(48, z_far), 0.0,
                    20 * z_far / rig.focal_px, 22 * z_far / rig.focal_px,
                    (0.2, 0.9, 0.2), 0.2, 1.2, 0.5)
    scene = Scene(seed=0, bg_disp_px=1, bg_depth_m=54.0, bg_color=(0.5, 0.5, 0.55),
                  bg_tex_freq=0.05, bg_tex_angle=0.0, bg_tex_phase=0.0,
                  fog_beta=0.03, haze=(0.75, 0.78, 0.82), tex_amp=0.35,
                  primitives=[near, far])
    left, ldepth = render_view(scene, rig, "left")
    right, rdepth = render_view(scene, rig, "right")
    v = rig.height // 2
    # left view: near covers far where they overlap
    assert ldepth[v, 54] == z_near
    # right view: near spans ~30..50, so column 52 reveals the far surface
    assert rdepth[v, 52] == z_far
    # and that far point projects back to left column 54, where near won
    assert ldepth[v, 52 + 2] == z_near


def test_disparity_consistency_exact():
    rig = CameraRig(width=48, height=32)
    cfg = GenConfig(rig=rig)
    total_checked = 0
    for seed in range(6):
        scene = generate_scene(seed, cfg)
        left, ldepth = render_view(scene, rig, "left")
        right, rdepth = render_view(scene, rig, "right")
        checked, bad = consistency_violations(left, right, ldepth, rdepth, rig)
        assert bad == 0, f"seed {seed}: {bad}/{checked} mismatches"
        total_checked += checked
    assert total_checked > 0


def test_depth_everywhere_in_range():
    for seed in range(10):
        s = render_pair(generate_scene(seed), CameraRig())
        assert np.all(np.isfinite(s.depth_gt))
        assert s.depth_gt.min() >= 4.0 and s.depth_gt.max() <= 60.0


def test_disparity_must_fit_image_width():
    rig = CameraRig(width=8, height=8)
    plane = Primitive("rect", 10, 5.4, 0.0, 0.0, 1.0, 1.0, (0.5, 0.5, 0.5), 0.1, 0.0, 0.0)
    scene = Scene(seed=0, bg_disp_px=1, bg_depth_m=54.0, bg_color=(0.5, 0.5, 0.5),
                  bg_tex_freq=0.05, bg_tex_angle=0.0, bg_tex_phase=0.0,
                  fog_beta=0.0, haze=(0.75, 0.78, 0.82), tex_amp=0.35,
                  primitives=[plane])
    with pytest.raises(ConfigError, match="width"):
        render_pair(scene, rig)


def test_images_live_on_8bit_grid():
    s = render_pair(generate_scene(2), CameraRig())
    for img in (s.left, s.right):
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert np.array_equal(img, np.round(img * 255.0) / 255.0)


# ---- persistence ------------------------------------------------------------


def test_sample_round_trip(tmp_path):
    s = render_pair(generate_scene(4), CameraRig(), sample_id="t")
    write_sample(s, tmp_path / "s0")
    back = read_sample(tmp_path / "s0")
    assert np.array_equal(back.left, s.left)
    assert np.array_equal(back.right, s.right)
    rel = np.abs(back.depth_gt - s.depth_gt) / s.depth_gt
    assert rel.max() <= 1e-7
    assert back.rig == s.rig and back.id == "t"


def test_build_dataset_counts_and_split_labels(tmp_path):
    cfg = GenConfig(rig=CameraRig(width=32, height=24))
    recs = build_dataset(8, 2, 0, tmp_path / "d", config=cfg)
    lines = (tmp_path / "d" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 10 and len(recs) == 10
    splits = [json.loads(ln)["split"] for ln in lines]
    assert splits.count("train") == 8 and splits.count("test") == 2
    ids = {r["id"] for r in recs}
    assert len(ids) == 10
    train_ids = {r["id"] for r in recs if r["split"] == "train"}
    test_ids = {r["id"] for r in recs if r["split"] == "test"}
    assert not (train_ids & test_ids)
    # seeds drawn from disjoint ranges
    train_seeds = {r["scene_seed"] for r in recs if r["split"] == "train"}
    test_seeds = {r["scene_seed"] for r in recs if r["split"] == "test"}
    assert not (train_seeds & test_seeds)


def dir_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_build_dataset_deterministic_bytes(tmp_path):
    cfg = GenConfig(rig=CameraRig(width=32, height=24))
    build_dataset(3, 2, 9, tmp_path / "a", config=cfg)
    build_dataset(3, 2, 9, tmp_path / "b", config=cfg)
    assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")


def test_build_dataset_refuses_nonempty_dir(tmp_path):
    d = tmp_path / "d"
    d.mkdir()
    (d / "junk.txt").write_text("x")
    cfg = GenConfig(rig=CameraRig(width=32, height=24))
    with pytest.raises(FileExistsError):
        build_dataset(1, 1, 0, d, config=cfg)
    build_dataset(1, 1, 0, d, config=cfg, overwrite=True)
    assert (d / "manifest.jsonl").exists()


def test_read_manifest_roundtrip(tmp_path):
    cfg = GenConfig(rig=CameraRig(width=32, height=24))
    recs = build_dataset(2, 1, 3, tmp_path / "d", config=cfg)
    back = read_manifest(tmp_path / "d" / "manifest.jsonl")
    assert back == recs
