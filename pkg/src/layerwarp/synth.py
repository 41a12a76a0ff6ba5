"""Synthetic layered scenes with closed-form affine oracles.

Every scene is defined by procedural atlas textures, an object mask in atlas
space, per-frame affine motions f_j (atlas -> frame forward maps), and an
affine keyframe edit g (source -> target point map in keyframe space, plus an
optional recolor of the object texture).  Because everything is affine, every
intermediate quantity of the propagation pipeline has an exact closed form;
the oracle computes those directly from 2x3 matrix algebra, never touching
the stored UV grids or the propagation code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .field import SamplingField, DeformationField, _bilinear, grid_coords
from .layers import AtlasLayer, EditBundle, LayeredVideo

MIN_MOTION_DET = 1e-3


# ---------------------------------------------------------------------------
# 2x3 affine helpers

def apply_affine(mat: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    out = flat @ np.asarray(mat, dtype=np.float64)[:, :2].T + np.asarray(mat)[:, 2]
    return out.reshape(pts.shape)

def compose_affine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a(b(p)) as a 2x3 matrix."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.hstack([a[:, :2] @ b[:, :2], (a[:, :2] @ b[:, 2] + a[:, 2])[:, None]])

def invert_affine(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    inv = np.linalg.inv(a[:, :2])
    return np.hstack([inv, (-inv @ a[:, 2])[:, None]])

def translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]])

def rotation_about(degrees: float, pivot) -> np.ndarray:
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    px, py = pivot
    rot = np.array([[c, -s], [s, c]])
    offset = np.array([px, py]) - rot @ np.array([px, py])
    return np.hstack([rot, offset[:, None]])

def scale_about(sx: float, sy: float, pivot) -> np.ndarray:
    px, py = pivot
    return np.array([[sx, 0.0, px * (1 - sx)], [0.0, sy, py * (1 - sy)]])

def rasterize_affine(mat: np.ndarray, width: int, height: int) -> np.ndarray:
    """(H, W, 2) values of mat(p) over pixel centers."""
    return apply_affine(mat, grid_coords(width, height))


# ---------------------------------------------------------------------------
# Procedural textures and masks

def make_texture(kind: str, seed: int, width: int, height: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if kind == "flat":
        return np.tile(rng.uniform(0.2, 0.8, 3), (height, width, 1))
    if kind == "gradient":
        # random low-order polynomial ramps, one per channel
        xs, ys = np.meshgrid(np.linspace(0, 1, width), np.linspace(0, 1, height))
        chans = []
        for _ in range(3):
            a, b, c = rng.uniform(-1, 1, 3)
            chans.append(a * xs + b * ys + c * xs * ys)
        img = np.stack(chans, axis=-1)
        img -= img.min()
        img /= max(img.max(), 1e-9)
        return 0.15 + 0.7 * img
    if kind == "noise":
        img = rng.uniform(size=(height, width, 3))
        img = gaussian_filter(img, sigma=(2.5, 2.5, 0))
        img -= img.min()
        img /= max(img.max(), 1e-9)
        return 0.1 + 0.8 * img
    if kind == "checker":
        cell = max(4, min(width, height) // 8)
        yy, xx = np.mgrid[0:height, 0:width]
        parity = ((yy // cell) + (xx // cell)) % 2
        c0 = rng.uniform(0.1, 0.45, 3)
        c1 = rng.uniform(0.55, 0.9, 3)
        return np.where(parity[..., None] == 0, c0, c1)
    raise ValueError(f"unknown texture kind {kind!r}")


def recolor_texture(image: np.ndarray, kind: str) -> np.ndarray:
    if kind in (None, "none"):
        return image
    if kind == "hue-rotate":
        return image[..., [1, 2, 0]]
    if kind == "invert":
        return 1.0 - image
    raise ValueError(f"unknown recolor kind {kind!r}")


@dataclass(frozen=True)
class MaskShape:
    shape: str                   # disk | rounded-rect | blob
    center: tuple[float, float]  # atlas coordinates
    radius: float
    half_size: tuple[float, float] = (0.0, 0.0)  # rounded-rect only
    seed: int = 0                # blob only

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        rel = pts - np.asarray(self.center)
        if self.shape == "disk":
            return (rel ** 2).sum(-1) <= self.radius ** 2
        if self.shape == "rounded-rect":
            hx, hy = self.half_size
            r = self.radius
            qx = np.abs(rel[..., 0]) - (hx - r)
            qy = np.abs(rel[..., 1]) - (hy - r)
            outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
            inside = np.minimum(np.maximum(qx, qy), 0)
            return outside + inside <= r
        if self.shape == "blob":
            rng = np.random.default_rng(self.seed)
            amp = rng.uniform(0.05, 0.18, 3)
            phase = rng.uniform(0, 2 * np.pi, 3)
            theta = np.arctan2(rel[..., 1], rel[..., 0])
            wobble = sum(a * np.cos((k + 2) * theta + p)
                         for k, (a, p) in enumerate(zip(amp, phase)))
            return np.hypot(rel[..., 0], rel[..., 1]) <= self.radius * (1.0 + wobble)
        raise ValueError(f"unknown mask shape {self.shape!r}")


_SUPERSAMPLE_OFFSETS = np.array([(-0.25, -0.25), (0.25, -0.25),
                                 (-0.25, 0.25), (0.25, 0.25)])


def _soft_mask_through(mask: MaskShape, to_atlas: np.ndarray,
                       width: int, height: int) -> np.ndarray:
    """Alpha on a width x height grid: the mask indicator looked up through the
    affine map ``to_atlas``, 2x2 supersampled for soft edges."""
    base = grid_coords(width, height).reshape(-1, 2)
    acc = np.zeros(base.shape[0])
    for off in _SUPERSAMPLE_OFFSETS:
        acc += mask.contains(apply_affine(to_atlas, base + off))
    return (acc / len(_SUPERSAMPLE_OFFSETS)).reshape(height, width)


# ---------------------------------------------------------------------------
# Scene specification

@dataclass(frozen=True)
class SceneSpec:
    frame_size: tuple[int, int]          # (W, H)
    frame_count: int
    motions: tuple[np.ndarray, ...]      # per-frame 2x3, atlas -> frame
    keyframe_index: int                  # 1-based
    edit: np.ndarray                     # 2x3, source -> target in keyframe space
    mask: MaskShape
    texture_kind: str = "gradient"
    texture_seed: int = 7
    recolor: str = "none"
    atlas_size: tuple[int, int] | None = None  # (W, H); default 2x larger frame dim

    def __post_init__(self):
        if self.frame_count < 2:
            raise ValueError("need at least 2 frames")
        if len(self.motions) != self.frame_count:
            raise ValueError("one motion matrix per frame required")
        for j, m in enumerate(self.motions, start=1):
            m = np.asarray(m, dtype=np.float64)
            if m.shape != (2, 3):
                raise ValueError(f"motion {j}: expected a 2x3 matrix")
            if abs(np.linalg.det(m[:, :2])) <= MIN_MOTION_DET:
                raise ValueError(f"motion {j} is not invertible")
        g = np.asarray(self.edit, dtype=np.float64)
        if g.shape != (2, 3) or abs(np.linalg.det(g[:, :2])) <= MIN_MOTION_DET:
            raise ValueError("edit must be an invertible 2x3 matrix")
        if not (1 <= self.keyframe_index <= self.frame_count):
            raise ValueError("keyframe index out of range")
        object.__setattr__(self, "motions",
                           tuple(np.asarray(m, dtype=np.float64) for m in self.motions))
        object.__setattr__(self, "edit", g)

    def resolved_atlas_size(self) -> tuple[int, int]:
        if self.atlas_size is not None:
            return self.atlas_size
        side = 2 * max(self.frame_size)
        return (side, side)


def scene_s1(**overrides) -> SceneSpec:
    """Canonical translating scene: 64x64 atlas, 48x48 frames, 8 frames of
    (2, 0) per-frame translation, keyframe 4, disk object, 1.25x x-scale edit
    about the keyframe object center with a hue rotation."""
    motions = tuple(translation(2.0 * j, 0.0) for j in range(8))
    # center chosen off the quarter-pixel lattice so the scaled samples never
    # land exactly on bilinear midpoints (keeps mask binarization stable)
    center_k = (20.2 + 2.0 * 3, 24.0)  # disk center as seen in frame 4
    spec = SceneSpec(
        frame_size=(48, 48), frame_count=8, motions=motions, keyframe_index=4,
        edit=scale_about(1.25, 1.0, center_k),
        mask=MaskShape("disk", center=(20.2, 24.0), radius=10.0),
        texture_kind="gradient", texture_seed=7, recolor="hue-rotate",
        atlas_size=(64, 64))
    return replace(spec, **overrides) if overrides else spec


def scene_s2(**overrides) -> SceneSpec:
    """As scene_s1 but each frame also rotates 4 degrees per frame about the
    object center, exercising non-identity warp Jacobians."""
    motions = tuple(compose_affine(translation(2.0 * j, 0.0),
                                   rotation_about(4.0 * j, (20.2, 24.0)))
                    for j in range(8))
    return replace(scene_s1(), motions=motions, **overrides)


# ---------------------------------------------------------------------------
# Generation and oracles

class AffineOracle:
    """Closed-form reference for every propagated quantity of a scene."""

    def __init__(self, spec: SceneSpec, fg_texture: np.ndarray,
                 bg_texture: np.ndarray, alphas: tuple[np.ndarray, ...]):
        self.spec = spec
        self.fg_texture = fg_texture
        self.fg_recolored = recolor_texture(fg_texture, spec.recolor)
        self.bg_texture = bg_texture
        self.alphas = alphas

    def motion(self, j: int) -> np.ndarray:
        return self.spec.motions[j - 1]

    def frame_map(self, j: int) -> np.ndarray:
        """h_j = f_j o f_k^-1 o g o f_k o f_j^-1: the edit conjugated into
        frame j (source-shape positions -> target-shape positions)."""
        f_j = self.motion(j)
        f_k = self.motion(self.spec.keyframe_index)
        return compose_affine(
            f_j, compose_affine(
                invert_affine(f_k), compose_affine(
                    self.spec.edit, compose_affine(f_k, invert_affine(f_j)))))

    def frame_deformation(self, j: int) -> DeformationField:
        """D(p) = h_j(p) - p rasterized on the frame grid."""
        w, h = self.spec.frame_size
        return DeformationField(rasterize_affine(self.frame_map(j), w, h)
                                - grid_coords(w, h))

    def source_frame(self, j: int) -> np.ndarray:
        """Direct rasterization of frame j from the textures and f_j."""
        w, h = self.spec.frame_size
        pos = rasterize_affine(invert_affine(self.motion(j)), w, h)
        fg = _bilinear(self.fg_texture, pos, "clamp")
        bg = _bilinear(self.bg_texture, pos, "clamp")
        a = self.alphas[j - 1][..., None]
        return fg * a + bg * (1.0 - a)

    def target_alpha(self, j: int) -> np.ndarray:
        """Alpha of the edited shape: the stored alpha read through the exact
        inverse of the conjugated edit."""
        w, h = self.spec.frame_size
        pos = rasterize_affine(invert_affine(self.frame_map(j)), w, h)
        return np.clip(_bilinear(self.alphas[j - 1], pos, "zero"), 0.0, 1.0)

    def target_frame(self, j: int) -> np.ndarray:
        """Ground-truth edited frame from direct affine composition."""
        w, h = self.spec.frame_size
        inv_f = invert_affine(self.motion(j))
        inv_h = invert_affine(self.frame_map(j))
        fg = _bilinear(self.fg_recolored,
                       rasterize_affine(compose_affine(inv_f, inv_h), w, h), "clamp")
        bg = _bilinear(self.bg_texture, rasterize_affine(inv_f, w, h), "clamp")
        a = self.target_alpha(j)[..., None]
        return fg * a + bg * (1.0 - a)

    def target_frames(self) -> list[np.ndarray]:
        return [self.target_frame(j) for j in range(1, self.spec.frame_count + 1)]


def _correspondence_grid(spec: SceneSpec, alpha_k: np.ndarray,
                         points_per_side: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Control grid over the keyframe object: src on a lattice covering the
    mask bounding box, dst = edit(src)."""
    fg = alpha_k > 0.5
    ys, xs = np.nonzero(fg)
    if xs.size == 0:
        raise ValueError("object mask is empty at the keyframe")
    pad = 2.0
    x0, x1 = xs.min() - pad, xs.max() + pad
    y0, y1 = ys.min() - pad, ys.max() + pad
    gx, gy = np.meshgrid(np.linspace(x0, x1, points_per_side),
                         np.linspace(y0, y1, points_per_side))
    src = np.stack([gx, gy], axis=-1).reshape(-1, 2)
    return src, apply_affine(spec.edit, src)


def generate_scene(spec: SceneSpec) -> tuple[LayeredVideo, EditBundle, AffineOracle]:
    """Build the layered video, its edit bundle, and the matching oracle.

    Bit-exact reproducible from (spec, seeds); all stored quantities are
    produced by direct affine evaluation, never by the propagation pipeline.
    """
    aw, ah = spec.resolved_atlas_size()
    fw, fh = spec.frame_size
    fg_tex = np.clip(make_texture(spec.texture_kind, spec.texture_seed, aw, ah), 0, 1)
    bg_tex = np.clip(make_texture(spec.texture_kind,
                                  spec.texture_seed ^ 0x5EED, aw, ah), 0, 1)

    uv_a2f, uv_f2a, alphas = [], [], []
    for mat in spec.motions:
        uv_a2f.append(SamplingField(rasterize_affine(invert_affine(mat), fw, fh)))
        uv_f2a.append(SamplingField(rasterize_affine(mat, aw, ah)))
        alphas.append(_soft_mask_through(spec.mask, invert_affine(mat), fw, fh))

    video = LayeredVideo(
        fg_atlas=AtlasLayer(fg_tex),
        bg_atlas=AtlasLayer(bg_tex),
        frame_size=spec.frame_size,
        uv_atlas_to_frame=tuple(uv_a2f),
        uv_frame_to_atlas=tuple(uv_f2a),
        alpha=tuple(alphas),
        keyframe_index=spec.keyframe_index)

    oracle = AffineOracle(spec, fg_tex, bg_tex, tuple(alphas))

    k = spec.keyframe_index
    alpha_k = alphas[k - 1]
    src_pts, dst_pts = _correspondence_grid(spec, alpha_k)
    source_mask = (alpha_k > 0.5).astype(np.float64)
    # target mask: the binary source mask carried through the edit map; the
    # pullback-then-binarize construction keeps the Eq-10-style round trip
    # (deform target mask back, compare to source) free of lattice rounding
    inv_h = invert_affine(oracle.frame_map(k))
    target_mask = (_bilinear(source_mask, rasterize_affine(inv_h, fw, fh), "zero")
                   > 0.5).astype(np.float64)
    bundle = EditBundle(
        keyframe_index=k,
        source_keyframe=np.clip(oracle.source_frame(k), 0, 1),
        edited_keyframe=np.clip(oracle.target_frame(k), 0, 1),
        source_mask=source_mask,
        target_mask=target_mask,
        correspondence=(src_pts, dst_pts))
    return video, bundle, oracle


def identity_bundle(video: LayeredVideo, oracle: AffineOracle) -> EditBundle:
    """No-edit bundle: edited keyframe equals the source, correspondence is
    the identity on the same control lattice."""
    k = video.keyframe_index
    alpha_k = video.alpha[k - 1]
    spec = replace(oracle.spec, edit=np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    src_pts, dst_pts = _correspondence_grid(spec, alpha_k)
    frame_k = np.clip(oracle.source_frame(k), 0, 1)
    mask = (alpha_k > 0.5).astype(np.float64)
    return EditBundle(k, frame_k, frame_k.copy(), mask, mask.copy(),
                      correspondence=(src_pts, dst_pts))


# ---------------------------------------------------------------------------
# JSON scene specs (consumed by the CLI)

def spec_from_json(data: dict) -> SceneSpec:
    frame_size = tuple(int(v) for v in data["frame_size"])
    n = int(data["frame_count"])
    motion = data["motion"]
    kind = motion.get("kind", "explicit")
    if kind == "translate":
        sx, sy = motion["step"]
        motions = tuple(translation(sx * j, sy * j) for j in range(n))
    elif kind == "rotate-translate":
        sx, sy = motion["step"]
        deg = float(motion["degrees"])
        pivot = tuple(motion["pivot"])
        motions = tuple(compose_affine(translation(sx * j, sy * j),
                                       rotation_about(deg * j, pivot))
                        for j in range(n))
    elif kind == "explicit":
        motions = tuple(np.asarray(m, dtype=float) for m in motion["matrices"])
    else:
        raise ValueError(f"unknown motion kind {kind!r}")

    edit = data["edit"]
    if "matrix" in edit:
        g = np.asarray(edit["matrix"], dtype=float)
    else:
        sx, sy = edit.get("scale", (1.0, 1.0))
        g = scale_about(float(sx), float(sy), tuple(edit["about"]))

    mask = data["mask"]
    mask_shape = MaskShape(
        shape=mask.get("shape", "disk"),
        center=tuple(mask["center"]),
        radius=float(mask["radius"]),
        half_size=tuple(mask.get("half_size", (0.0, 0.0))),
        seed=int(mask.get("seed", 0)))

    tex = data.get("texture", {})
    return SceneSpec(
        frame_size=frame_size,
        frame_count=n,
        motions=motions,
        keyframe_index=int(data["keyframe"]),
        edit=g,
        mask=mask_shape,
        texture_kind=tex.get("kind", "gradient"),
        texture_seed=int(tex.get("seed", 7)),
        recolor=data.get("edit", {}).get("recolor", "none"),
        atlas_size=tuple(data["atlas_size"]) if "atlas_size" in data else None)


def spec_to_json(spec: SceneSpec) -> dict:
    return {
        "frame_size": list(spec.frame_size),
        "frame_count": spec.frame_count,
        "atlas_size": list(spec.resolved_atlas_size()),
        "keyframe": spec.keyframe_index,
        "motion": {"kind": "explicit",
                   "matrices": [m.tolist() for m in spec.motions]},
        "edit": {"matrix": spec.edit.tolist(), "recolor": spec.recolor},
        "mask": {"shape": spec.mask.shape, "center": list(spec.mask.center),
                 "radius": spec.mask.radius,
                 "half_size": list(spec.mask.half_size), "seed": spec.mask.seed},
        "texture": {"kind": spec.texture_kind, "seed": spec.texture_seed},
    }


def load_spec(path) -> SceneSpec:
    with open(path) as fh:
        return spec_from_json(json.load(fh))
