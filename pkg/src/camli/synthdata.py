"""Deterministic synthetic camera-LiDAR scenes with exact ground truth.

A scene is a set of rigid point clusters with per-point colors, moved by a
per-body rotation + translation (plus an optional smooth non-rigid term).
Ground-truth scene flow is exactly p2 - p1; ground-truth optical flow is
the projection displacement, stored per point in double precision so the
projection-consistency property holds to machine accuracy.
"""

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, project_points
from .serialization import load_tensor, save_tensor

DATASET_VERSION = 1


class SpecError(ValueError):
    """Invalid scene spec; message names the offending field."""


class DatasetError(ValueError):
    pass


@dataclass
class SceneSpec:
    seed: int = 0
    num_bodies: int = 8
    points_per_body: int = 64
    depth_range: tuple = (4.0, 12.0)
    rot_range: float = 0.08           # radians
    trans_range: float = 0.3          # meters
    non_rigid_fraction: float = 0.25
    intrinsics: tuple = (64.0, 64.0, 31.5, 31.5)
    image_size: tuple = (64, 64)
    body_radius: tuple = (0.08, 0.18)  # fraction of the body's depth
    color_jitter: float = 1.0          # 1: independent point colors; <1: body hue +- jitter

    def __post_init__(self):
        self.depth_range = tuple(float(v) for v in self.depth_range)
        self.intrinsics = tuple(float(v) for v in self.intrinsics)
        self.image_size = tuple(int(v) for v in self.image_size)
        self.body_radius = tuple(float(v) for v in self.body_radius)
        lo, hi = self.depth_range
        if not (0.5 < lo < hi < 40.0):
            raise SpecError(f"depth_range: must satisfy 0.5 < lo < hi < 40, got {self.depth_range}")
        if self.num_bodies < 1:
            raise SpecError("num_bodies: must be >= 1")
        if self.points_per_body < 1:
            raise SpecError("points_per_body: must be >= 1")
        if not 0.0 <= self.non_rigid_fraction <= 1.0:
            raise SpecError("non_rigid_fraction: must be in [0, 1]")
        if self.rot_range < 0 or self.trans_range < 0:
            raise SpecError("rot_range/trans_range: must be non-negative")
        if not 0.0 < self.body_radius[0] <= self.body_radius[1]:
            raise SpecError("body_radius: must be an increasing positive range")
        if not 0.0 <= self.color_jitter <= 1.0:
            raise SpecError("color_jitter: must be in [0, 1]")

    @property
    def num_points(self):
        return self.num_bodies * self.points_per_body

    @property
    def cam(self):
        return CameraIntrinsics(*self.intrinsics)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FramePair:
    """Synchronized sample with exact ground truth."""
    image1: np.ndarray        # 3 x H x W float32
    image2: np.ndarray
    points1: np.ndarray       # N x 3 float32
    points2: np.ndarray
    colors: np.ndarray        # N x 3 float32
    flow2d: np.ndarray        # N x 2 float64, per-point projection displacement
    flow3d: np.ndarray        # N x 3 float64, exactly points2 - points1
    occ: np.ndarray           # N float32 in {0, 1}: frame-2 z-buffer losers
    cam: CameraIntrinsics

    @property
    def image_size(self):
        return self.image1.shape[1], self.image1.shape[2]


# ---------------------------------------------------------------------------
# rendering / rasterization

def _background(h, w):
    y = np.linspace(0.0, 1.0, h)[None, :, None]
    x = np.linspace(0.0, 1.0, w)[None, None, :]
    img = np.concatenate([
        0.10 + 0.15 * x + 0.0 * y,
        0.12 + 0.12 * y + 0.0 * x,
        0.15 + 0.08 * (x + y) / 2.0,
    ], axis=0)
    return img.astype(np.float32)


def render_frame(points, colors, cam, image_size, sigma=0.7):
    """Z-buffered splat with a 3x3 Gaussian footprint over a fixed smooth
    background gradient. Farther points are painted first."""
    h, w = image_size
    img = _background(h, w)
    points = np.asarray(points)
    if len(points) == 0:
        return img
    colors = np.asarray(colors, dtype=np.float32)
    pix = project_points(points.astype(np.float64), cam)
    order = np.argsort(-points[:, 2].astype(np.float64), kind="stable")
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    for i in order:
        cx, cy = pix[i]
        px, py = int(round(cx)), int(round(cy))
        y0, y1 = max(py - 1, 0), min(py + 2, h)
        x0, x1 = max(px - 1, 0), min(px + 2, w)
        ys = np.arange(y0, y1, dtype=np.float64)
        xs = np.arange(x0, x1, dtype=np.float64)
        wgt = np.exp(-((xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2) * inv2s2)
        wgt = wgt[None].astype(np.float32)
        img[:, y0:y1, x0:x1] = (1.0 - wgt) * img[:, y0:y1, x0:x1] + wgt * colors[i][:, None, None]
    return img


def z_buffer_winners(points, cam, image_size):
    """Winner (nearest point; ties to lowest index) per integer pixel.

    Returns (winner map H x W with -1 where empty, per-point loser flags).
    """
    h, w = image_size
    points = np.asarray(points)
    pix = project_points(points.astype(np.float64), cam)
    ix = np.clip(np.rint(pix[:, 0]).astype(np.int64), 0, w - 1)
    iy = np.clip(np.rint(pix[:, 1]).astype(np.int64), 0, h - 1)
    flat = iy * w + ix
    winner = np.full(h * w, -1, dtype=np.int64)
    order = np.lexsort((np.arange(len(points)), points[:, 2]))
    for i in order[::-1]:
        winner[flat[i]] = i
    losers = (winner[flat] != np.arange(len(points))).astype(np.float32)
    return winner.reshape(h, w), losers


def rasterize_flow2d(frame):
    """Dense (2, H, W) optical-flow target from the frame-1 z-buffer plus
    the covered-pixel mask. Background pixels are static (zero flow)."""
    h, w = frame.image_size
    winner, _ = z_buffer_winners(frame.points1, frame.cam, (h, w))
    dense = np.zeros((2, h, w), dtype=np.float32)
    cover = (winner >= 0)
    wi = winner[cover]
    dense[0][cover] = frame.flow2d[wi, 0].astype(np.float32)
    dense[1][cover] = frame.flow2d[wi, 1].astype(np.float32)
    return dense, cover.astype(np.float32)


# ---------------------------------------------------------------------------
# scene generation

def make_frame_pair(points1, points2, colors, cam, image_size):
    """Assemble a FramePair with exact ground truth from point states.

    Points are stored in float32; flows are computed from the stored values
    in float64, so consistency checks are exact.
    """
    p1 = np.asarray(points1, dtype=np.float32)
    p2 = np.asarray(points2, dtype=np.float32)
    colors = np.asarray(colors, dtype=np.float32)
    flow3d = p2.astype(np.float64) - p1.astype(np.float64)
    flow2d = project_points(p2.astype(np.float64), cam) - project_points(p1.astype(np.float64), cam)
    _, occ = z_buffer_winners(p2, cam, image_size)
    return FramePair(
        image1=render_frame(p1, colors, cam, image_size),
        image2=render_frame(p2, colors, cam, image_size),
        points1=p1, points2=p2, colors=colors,
        flow2d=flow2d, flow3d=flow3d, occ=occ, cam=cam)


def _in_frustum(points, cam, image_size, margin=1.0, zmin=0.6, zmax=39.5):
    h, w = image_size
    p = np.asarray(points)
    ok = (p[:, 2] > zmin) & (p[:, 2] < zmax)
    safe = p.copy()
    safe[:, 2] = np.maximum(safe[:, 2], 1e-3)
    pix = project_points(safe, cam)
    ok &= (pix[:, 0] >= margin) & (pix[:, 0] <= w - 1 - margin)
    ok &= (pix[:, 1] >= margin) & (pix[:, 1] <= h - 1 - margin)
    return ok


def _rotation_matrix(axis, angle):
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    cc = 1.0 - c
    return np.array([
        [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
        [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
        [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
    ])


def sample_scene_points(spec, index=0, max_retries=200):
    """Double-precision point states before storage quantization.

    Returns (points1, points2, colors, motions) where motions holds each
    body's (rotation, translation, center); for non-rigid bodies the points
    carry an extra smooth displacement on top of the rigid part.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(spec.seed), int(index)])))
    cam = spec.cam
    h, w = spec.image_size
    lo, hi = spec.depth_range

    all_p1, all_p2, all_colors, motions = [], [], [], []
    for _ in range(spec.num_bodies):
        for attempt in range(max_retries):
            zc = rng.uniform(lo, hi)
            # lateral bounds keeping the body center well inside the frustum
            half_w = 0.7 * zc * (w / 2 - 2) / cam.fx
            half_h = 0.7 * zc * (h / 2 - 2) / cam.fy
            center = np.array([rng.uniform(-half_w, half_w), rng.uniform(-half_h, half_h), zc])
            radius = rng.uniform(*spec.body_radius) * zc
            pts = center + rng.normal(0.0, radius / 2.0, size=(spec.points_per_body, 3))

            rot = _rotation_matrix(rng.normal(size=3), rng.uniform(-spec.rot_range, spec.rot_range))
            trans = rng.uniform(-spec.trans_range, spec.trans_range, size=3)
            moved = (pts - center) @ rot.T + center + trans
            if rng.uniform() < spec.non_rigid_fraction:
                amp = rng.uniform(0.05, min(0.15, 0.2))
                freq = rng.uniform(0.5, 2.0, size=3)
                phase = rng.uniform(0, 2 * np.pi, size=3)
                moved = moved + amp * np.sin(freq * (pts - center) + phase)

            keep = _in_frustum(pts, cam, spec.image_size) & _in_frustum(moved, cam, spec.image_size)
            if keep.all():
                break
        else:
            raise DatasetError(f"scene {index}: body left the frustum after {max_retries} retries")
        if spec.color_jitter >= 1.0:
            colors = rng.uniform(0.2, 1.0, size=(spec.points_per_body, 3))
        else:
            base = rng.uniform(0.25, 1.0, size=3)
            colors = np.clip(base + spec.color_jitter * rng.normal(size=(spec.points_per_body, 3)),
                             0.05, 1.0)
        all_p1.append(pts)
        all_p2.append(moved)
        all_colors.append(colors)
        motions.append((rot, trans, center))

    return (np.concatenate(all_p1), np.concatenate(all_p2),
            np.concatenate(all_colors), motions)


def generate_scene(spec, index=0, max_retries=200):
    """One deterministic FramePair; ``index`` selects the scene within the
    spec's seed stream."""
    p1, p2, colors, _ = sample_scene_points(spec, index, max_retries)
    return make_frame_pair(p1, p2, colors, spec.cam, spec.image_size)


def flip_frame(frame, flip_x=False, flip_y=False):
    """Mirror a frame pair about the image axes; exact when the principal
    point sits at the image center ((W-1)/2, (H-1)/2), where pixel
    mirroring corresponds to negating the metric x/y coordinates."""
    h, w = frame.image_size
    if abs(frame.cam.cx - (w - 1) / 2) > 1e-9 or abs(frame.cam.cy - (h - 1) / 2) > 1e-9:
        raise DatasetError("flip_frame requires a centered principal point")
    if not (flip_x or flip_y):
        return frame
    sx = -1.0 if flip_x else 1.0
    sy = -1.0 if flip_y else 1.0
    def img(a):
        out = a
        if flip_x:
            out = out[:, :, ::-1]
        if flip_y:
            out = out[:, ::-1, :]
        return np.ascontiguousarray(out)
    scale3 = np.array([sx, sy, 1.0])
    scale2 = np.array([sx, sy])
    return FramePair(
        image1=img(frame.image1), image2=img(frame.image2),
        points1=(frame.points1 * scale3).astype(frame.points1.dtype),
        points2=(frame.points2 * scale3).astype(frame.points2.dtype),
        colors=frame.colors,
        flow2d=frame.flow2d * scale2,
        flow3d=frame.flow3d * scale3,
        occ=frame.occ, cam=frame.cam)


# ---------------------------------------------------------------------------
# on-disk dataset

_SCENE_FILES = ("image1", "image2", "points1", "points2", "colors",
                "flow2d_gt", "flow3d_gt", "occ")


def _scene_dir(root, i):
    return os.path.join(root, f"scene_{i:04d}")


def write_dataset(root, spec, frames):
    os.makedirs(root, exist_ok=True)
    manifest = {
        "version": DATASET_VERSION,
        "num_scenes": len(frames),
        "spec": spec.to_dict(),
    }
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    for i, f in enumerate(frames):
        d = _scene_dir(root, i)
        os.makedirs(d, exist_ok=True)
        save_tensor(os.path.join(d, "image1.ten"), f.image1)
        save_tensor(os.path.join(d, "image2.ten"), f.image2)
        save_tensor(os.path.join(d, "points1.ten"), f.points1.astype(np.float32))
        save_tensor(os.path.join(d, "points2.ten"), f.points2.astype(np.float32))
        save_tensor(os.path.join(d, "colors.ten"), f.colors.astype(np.float32))
        save_tensor(os.path.join(d, "flow2d_gt.ten"), f.flow2d.astype(np.float64))
        save_tensor(os.path.join(d, "flow3d_gt.ten"), f.flow3d.astype(np.float64))
        save_tensor(os.path.join(d, "occ.ten"), f.occ.astype(np.float32).reshape(-1, 1))


def read_dataset(root):
    """Load (spec, frames); integrity problems raise explicit errors."""
    mpath = os.path.join(root, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"{root}: missing manifest.json")
    except json.JSONDecodeError as e:
        raise DatasetError(f"{mpath}: malformed manifest at line {e.lineno}: {e.msg}")
    version = manifest.get("version")
    if version != DATASET_VERSION:
        raise DatasetError(f"{mpath}: unsupported dataset version {version!r} (expected {DATASET_VERSION})")
    for key in ("num_scenes", "spec"):
        if key not in manifest:
            raise DatasetError(f"{mpath}: missing field {key!r}")
    spec = SceneSpec.from_dict(manifest["spec"])
    cam = spec.cam
    frames = []
    for i in range(int(manifest["num_scenes"])):
        d = _scene_dir(root, i)
        arrays = {}
        for name in _SCENE_FILES:
            path = os.path.join(d, name + ".ten")
            if not os.path.exists(path):
                raise DatasetError(f"{d}: missing {name}.ten")
            arrays[name] = load_tensor(path)
        n = arrays["points1"].shape[0]
        if arrays["flow3d_gt"].shape != (n, 3) or arrays["flow2d_gt"].shape != (n, 2):
            raise DatasetError(f"{d}: ground-truth shapes inconsistent with point count {n}")
        frames.append(FramePair(
            image1=arrays["image1"], image2=arrays["image2"],
            points1=arrays["points1"], points2=arrays["points2"],
            colors=arrays["colors"],
            flow2d=arrays["flow2d_gt"], flow3d=arrays["flow3d_gt"],
            occ=arrays["occ"].reshape(-1), cam=cam))
    return spec, frames
