"""Procedural rectified stereo pairs with exact dense ground-truth depth.

Scenes are fronto-parallel rectangles and ellipses at constant depth over a
constant-depth background, textured by world-space sinusoids and attenuated
by exponential haze (the haze ties appearance to depth, which is what a
monocular net can learn from).

Depths are snapped to integer pixel disparities for the generating rig:
Z = focal*baseline/d with d a whole number. The right view then renders each
surface by sampling world coordinates at column u + d, which is the exact
same float sequence the left view evaluates at column u, so a surface point
visible in both views gets a bit-identical color. That makes the
left/right consistency check exact rather than approximate, at the cost of
restricting depths to the disparity grid inside the configured ranges.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fileformats import read_pfm, read_ppm, write_pfm, write_ppm


class ConfigError(ValueError):
    """Invalid generator or rig configuration."""


@dataclass(frozen=True)
class CameraRig:
    focal_px: float = 100.0
    baseline_m: float = 0.54
    width: int = 96
    height: int = 64

    def __post_init__(self):
        if self.focal_px <= 0 or self.baseline_m <= 0:
            raise ConfigError(f"focal and baseline must be positive, got {self.focal_px}, {self.baseline_m}")
        if self.width < 8 or self.height < 8:
            raise ConfigError(f"image extents too small: {self.width}x{self.height}")

    def to_json(self) -> dict:
        return {"focal_px": self.focal_px, "baseline_m": self.baseline_m,
                "width": self.width, "height": self.height}

    @staticmethod
    def from_json(d: dict) -> "CameraRig":
        return CameraRig(focal_px=float(d["focal_px"]), baseline_m=float(d["baseline_m"]),
                         width=int(d["width"]), height=int(d["height"]))


@dataclass(frozen=True)
class GenConfig:
    rig: CameraRig = field(default_factory=CameraRig)
    prim_depth_range: tuple = (4.0, 30.0)
    bg_depth_range: tuple = (40.0, 60.0)
    n_prims_range: tuple = (3, 8)
    fog_beta: float = 0.02
    haze: tuple = (0.75, 0.78, 0.82)
    tex_amp: float = 0.35

    def __post_init__(self):
        for lo, hi in (self.prim_depth_range, self.bg_depth_range):
            if not (4.0 <= lo < hi <= 60.0):
                raise ConfigError(f"depth range ({lo}, {hi}) must be non-empty and inside [4, 60] m")
        nlo, nhi = self.n_prims_range
        if not (3 <= nlo <= nhi <= 8):
            raise ConfigError(f"primitive count range {self.n_prims_range} must sit inside [3, 8]")
        if self.fog_beta < 0:
            raise ConfigError(f"fog_beta must be non-negative, got {self.fog_beta}")


@dataclass
class Primitive:
    kind: str  # "rect" | "ellipse"
    disp_px: int  # whole-pixel disparity under the generating rig
    depth_m: float
    center_x: float  # world meters at depth_m
    center_y: float
    half_w: float
    half_h: float
    color: tuple  # base RGB in [0, 1]
    tex_freq: float  # cycles per world meter
    tex_angle: float
    tex_phase: float


@dataclass
class Scene:
    seed: int
    bg_disp_px: int
    bg_depth_m: float
    bg_color: tuple
    bg_tex_freq: float
    bg_tex_angle: float
    bg_tex_phase: float
    fog_beta: float
    haze: tuple
    tex_amp: float
    primitives: list


@dataclass
class StereoSample:
    left: np.ndarray  # (H, W, 3) float in [0, 1], values on the 1/255 grid
    right: np.ndarray
    depth_gt: np.ndarray  # (H, W) meters, left camera
    rig: CameraRig
    id: str


def disparity_grid(rig: CameraRig, lo: float, hi: float) -> list[int]:
    """Whole-pixel disparities whose depth focal*baseline/d lies in [lo, hi]."""
    fb = rig.focal_px * rig.baseline_m
    d_min = int(np.ceil(fb / hi - 1e-9))
    d_max = int(np.floor(fb / lo + 1e-9))
    grid = [d for d in range(max(d_min, 1), d_max + 1) if lo - 1e-9 <= fb / d <= hi + 1e-9]
    if not grid:
        raise ConfigError(
            f"no whole-pixel disparity gives a depth in [{lo}, {hi}] m for this rig"
        )
    return grid


def generate_scene(seed: int, config: GenConfig = GenConfig()) -> Scene:
    """Deterministic scene from seed: background plane plus 3-8 primitives."""
    rig = config.rig
    rng = np.random.default_rng(seed)
    prim_grid = disparity_grid(rig, *config.prim_depth_range)
    bg_grid = disparity_grid(rig, *config.bg_depth_range)
    fb = rig.focal_px * rig.baseline_m

    bg_disp = int(rng.choice(bg_grid))
    bg_depth = fb / bg_disp
    n = int(rng.integers(config.n_prims_range[0], config.n_prims_range[1] + 1))
    prims = []
    for _ in range(n):
        disp = int(rng.choice(prim_grid))
        depth = fb / disp
        scale = depth / rig.focal_px  # meters per pixel at this depth
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        ucenter = rng.uniform(10.0, rig.width - 10.0)
        vcenter = rng.uniform(8.0, rig.height - 8.0)
        half_w_px = rng.uniform(7.0, 26.0)
        half_h_px = rng.uniform(5.0, 18.0)
        color = tuple(rng.uniform(0.25, 0.95, size=3))
        # texture frequency drawn in cycles per screen pixel, stored in world units
        freq_px = rng.uniform(0.03, 0.12)
        prims.append(Primitive(
            kind=kind,
            disp_px=disp,
            depth_m=depth,
            center_x=(ucenter - rig.width / 2.0) * scale,
            center_y=(vcenter - rig.height / 2.0) * scale,
            half_w=half_w_px * scale,
            half_h=half_h_px * scale,
            color=color,
            tex_freq=freq_px / scale,
            tex_angle=rng.uniform(0.0, np.pi),
            tex_phase=rng.uniform(0.0, 2.0 * np.pi),
        ))
    bg_scale = bg_depth / rig.focal_px
    return Scene(
        seed=seed,
        bg_disp_px=bg_disp,
        bg_depth_m=bg_depth,
        bg_color=tuple(rng.uniform(0.35, 0.75, size=3)),
        bg_tex_freq=rng.uniform(0.03, 0.10) / bg_scale,
        bg_tex_angle=rng.uniform(0.0, np.pi),
        bg_tex_phase=rng.uniform(0.0, 2.0 * np.pi),
        fog_beta=config.fog_beta,
        haze=config.haze,
        tex_amp=config.tex_amp,
        primitives=prims,
    )


def _shaded(xs, ys, base, freq, angle, phase, amp, depth, fog_beta, haze):
    """Color of a surface at world (xs, ys): sinusoidal albedo under haze."""
    wave = np.sin(2.0 * np.pi * freq * (xs * np.cos(angle) + ys * np.sin(angle)) + phase)
    rgb = np.clip(np.asarray(base) * (1.0 + amp * wave)[..., None], 0.0, 1.0)
    t = np.exp(-fog_beta * depth)
    return rgb * t + np.asarray(haze) * (1.0 - t)


def render_view(scene: Scene, rig: CameraRig, view: str) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffer render of one view; returns (image, depth).

    The right camera sits baseline_m along +x, so a surface with disparity d
    appears d pixels left of its left-view position; sampling its world
    coordinates at column u + d reuses the left view's exact floats.
    """
    if view not in ("left", "right"):
        raise ConfigError(f"view must be 'left' or 'right', got {view!r}")
    h, w = rig.height, rig.width
    us = np.arange(w, dtype=np.float64)
    vs = np.arange(h, dtype=np.float64)

    def world_grid(disp: int, depth: float):
        shift = disp if view == "right" else 0
        scale = depth / rig.focal_px
        xs = ((us + shift) + 0.5 - w / 2.0) * scale
        ys = (vs + 0.5 - h / 2.0) * scale
        return np.broadcast_to(xs, (h, w)), np.broadcast_to(ys[:, None], (h, w))

    xs, ys = world_grid(scene.bg_disp_px, scene.bg_depth_m)
    img = _shaded(xs, ys, scene.bg_color, scene.bg_tex_freq, scene.bg_tex_angle,
                  scene.bg_tex_phase, scene.tex_amp, scene.bg_depth_m,
                  scene.fog_beta, scene.haze)
    depth = np.full((h, w), scene.bg_depth_m)

    for p in scene.primitives:
        xs, ys = world_grid(p.disp_px, p.depth_m)
        if p.kind == "rect":
            inside = (np.abs(xs - p.center_x) <= p.half_w) & (np.abs(ys - p.center_y) <= p.half_h)
        else:
            inside = (((xs - p.center_x) / p.half_w) ** 2
                      + ((ys - p.center_y) / p.half_h) ** 2) <= 1.0
        # ties at equal depth resolve to the earlier primitive in list order
        mask = inside & (p.depth_m < depth)
        if not mask.any():
            continue
        rgb = _shaded(xs, ys, p.color, p.tex_freq, p.tex_angle, p.tex_phase,
                      scene.tex_amp, p.depth_m, scene.fog_beta, scene.haze)
        img[mask] = rgb[mask]
        depth[mask] = p.depth_m

    img = np.round(img * 255.0) / 255.0  # snap to the 8-bit grid PPM storage uses
    return img, depth


def render_pair(scene: Scene, rig: CameraRig, sample_id: str = "") -> StereoSample:
    max_disp = max([scene.bg_disp_px] + [p.disp_px for p in scene.primitives])
    if max_disp >= rig.width:
        raise ConfigError(f"disparity {max_disp} px does not fit in width {rig.width}")
    left, depth = render_view(scene, rig, "left")
    right, _ = render_view(scene, rig, "right")
    return StereoSample(left=left, right=right, depth_gt=depth, rig=rig, id=sample_id)


# ---- sample and dataset persistence -----------------------------------------


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_sample(sample: StereoSample, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "left.ppm", _to_u8(sample.left))
    write_ppm(out / "right.ppm", _to_u8(sample.right))
    write_pfm(out / "depth.pfm", sample.depth_gt)
    meta = {"id": sample.id, "rig": sample.rig.to_json()}
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def read_sample(sample_dir) -> StereoSample:
    d = Path(sample_dir)
    meta = json.loads((d / "meta.json").read_text())
    left = read_ppm(d / "left.ppm").astype(np.float64) / 255.0
    right = read_ppm(d / "right.ppm").astype(np.float64) / 255.0
    depth = read_pfm(d / "depth.pfm")
    return StereoSample(left=left, right=right, depth_gt=depth,
                        rig=CameraRig.from_json(meta["rig"]), id=meta["id"])


def build_dataset(n_train: int, n_test: int, seed: int, out_dir,
                  config: GenConfig = GenConfig(), overwrite: bool = False) -> list[dict]:
    """Write n_train + n_test samples and a JSONL manifest; returns the records.

    Train scene seeds are seed..seed+n_train-1 and test seeds continue from
    seed+n_train, so the two splits can never share a scene.
    """
    if n_train <= 0 or n_test <= 0:
        raise ConfigError(f"need positive split sizes, got train={n_train} test={n_test}")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise FileExistsError(f"{out} is not empty; pass overwrite to replace it")
    out.mkdir(parents=True, exist_ok=True)

    records = []
    specs = [("train", i, seed + i) for i in range(n_train)]
    specs += [("test", j, seed + n_train + j) for j in range(n_test)]
    for split, idx, scene_seed in specs:
        sid = f"{split}_{idx:04d}"
        scene = generate_scene(scene_seed, config)
        sample = render_pair(scene, config.rig, sample_id=sid)
        write_sample(sample, out / sid)
        records.append({
            "id": sid,
            "split": split,
            "scene_seed": scene_seed,
            "left": f"{sid}/left.ppm",
            "right": f"{sid}/right.ppm",
            "depth": f"{sid}/depth.pfm",
            "rig": config.rig.to_json(),
        })
    with open(out / "manifest.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


def read_manifest(path) -> list[dict]:
    p = Path(path)
    records = [json.loads(line) for line in p.read_text().splitlines() if line.strip()]
    if not records:
        raise ConfigError(f"manifest {p} is empty")
    return records


def load_split(manifest_path, split: str) -> list[StereoSample]:
    """Read every sample of one split, in manifest order."""
    p = Path(manifest_path)
    records = [r for r in read_manifest(p) if r["split"] == split]
    if not records:
        raise ConfigError(f"manifest {p} has no {split!r} samples")
    root = p.parent
    out = []
    for r in records:
        s = read_sample(root / r["id"])
        s.id = r["id"]
        out.append(s)
    return out
