"""Procedural occlusion videos: a handful of boxes and spheres placed close
together on a ground plane, filmed by a camera orbiting the scene. Masks
come from per-pixel ray casting, so they are exact: the visible mask is the
nearest-hit test against all objects, the full (amodal) mask is the same
object rendered alone.

World frame is z-up; objects rest on the z=0 plane. The camera stays level
(no roll) while orbiting, which keeps its x axis horizontal. Camera frame
is x-right, y-down, z-forward.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DataError
from .geometry import CameraIntrinsics
from .rng import Rng

WORLD_UP = np.array([0.0, 0.0, 1.0])
LIGHT_DIR = np.array([0.35, 0.25, 0.9]) / np.linalg.norm([0.35, 0.25, 0.9])
BACKGROUND = np.array([0.13, 0.15, 0.18])
AMBIENT = 0.35
EPS = 1e-9


@dataclass(frozen=True)
class Primitive:
    kind: str                 # "box" | "sphere"
    center: tuple             # world (x, y, z)
    extent: tuple             # box: half-extents (hx, hy, hz); sphere: (r, r, r)
    color: tuple              # albedo rgb in [0, 1]

    def bounding_radius(self) -> float:
        if self.kind == "sphere":
            return self.extent[0]
        return float(np.linalg.norm(self.extent))


@dataclass(frozen=True)
class OrbitSpec:
    radius: float
    height: float
    angle_start: float
    angle_step: float
    target: tuple = (0.0, 0.0, 0.5)

    def position(self, t: int) -> np.ndarray:
        a = self.angle_start + t * self.angle_step
        return np.array([self.radius * np.cos(a), self.radius * np.sin(a), self.height])


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    orbit: OrbitSpec
    num_frames: int
    image_size: int
    seed: int
    difficulty: str = "B"

    def intrinsics(self) -> CameraIntrinsics:
        H = self.image_size
        return CameraIntrinsics(fx=float(H), fy=float(H), cx=H / 2.0, cy=H / 2.0)


def camera_pose(orbit: OrbitSpec, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns (position, rotation) with rotation rows = camera x/y/z axes;
    p_cam = rotation @ (p_world - position)."""
    pos = orbit.position(t)
    fwd = np.asarray(orbit.target) - pos
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, WORLD_UP)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    return pos, np.stack([right, down, fwd])


# ---------------------------------------------------------------------------
# ray casting

def ray_sphere(origin: np.ndarray, dirs: np.ndarray, center, radius) -> np.ndarray:
    """Nearest positive hit parameter per ray, inf on miss. dirs are unit."""
    oc = origin - np.asarray(center)
    b = dirs @ oc
    disc = b * b - (oc @ oc - radius * radius)
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t1 = -b - sq
    t2 = -b + sq
    t = np.where(t1 > EPS, t1, t2)
    return np.where(hit & (t > EPS), t, np.inf)


def ray_box(origin: np.ndarray, dirs: np.ndarray, center, half) -> np.ndarray:
    """Slab-method nearest positive hit per ray, inf on miss."""
    lo = np.asarray(center) - np.asarray(half)
    hi = np.asarray(center) + np.asarray(half)
    d = np.where(np.abs(dirs) < 1e-300, 1e-300, dirs)
    t1 = (lo - origin) / d
    t2 = (hi - origin) / d
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    t = np.where(tmin > EPS, tmin, tmax)
    ok = (tmax >= tmin) & (t > EPS)
    return np.where(ok, t, np.inf)


def primitive_hits(prim: Primitive, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    if prim.kind == "sphere":
        return ray_sphere(origin, dirs, prim.center, prim.extent[0])
    if prim.kind == "box":
        return ray_box(origin, dirs, prim.center, prim.extent)
    raise DataError(f"unknown primitive kind {prim.kind!r}")


def _pixel_rays(spec: SceneSpec, t: int) -> tuple[np.ndarray, np.ndarray]:
    H = spec.image_size
    K = spec.intrinsics()
    pos, rot = camera_pose(spec.orbit, t)
    u, v = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(H, dtype=np.float64))
    d_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    d_world = d_cam.reshape(-1, 3) @ rot  # rows of rot are camera axes
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    return pos, d_world


def frame_hit_field(spec: SceneSpec, t: int) -> np.ndarray:
    """Hit parameter per object per pixel: [K, H*W], inf on miss."""
    pos, dirs = _pixel_rays(spec, t)
    if not spec.primitives:
        return np.full((0, dirs.shape[0]), np.inf)
    return np.stack([primitive_hits(p, pos, dirs) for p in spec.primitives])


def _box_normal(p: np.ndarray, prim: Primitive) -> np.ndarray:
    rel = (p - np.asarray(prim.center)) / np.asarray(prim.extent)
    ax = np.argmax(np.abs(rel), axis=-1)
    n = np.zeros_like(p)
    n[np.arange(len(p)), ax] = np.sign(rel[np.arange(len(p)), ax])
    return n


def render_frame(spec: SceneSpec, t: int):
    """Shaded image plus exact per-object visible masks for orbit pose t.

    Returns (image [3,H,W] in [0,1], visible [K,H,W] bool, depth_order),
    where depth_order lists object indices by distance of their centers
    from the camera, nearest first.
    """
    H = spec.image_size
    pos, dirs = _pixel_rays(spec, t)
    hits = frame_hit_field(spec, t)
    K = len(spec.primitives)
    img = np.tile(BACKGROUND[:, None], (1, H * H))
    if K:
        winner = np.argmin(hits, axis=0)
        t_near = hits[winner, np.arange(hits.shape[1])]
        visible = np.zeros((K, H * H), dtype=bool)
        for k, prim in enumerate(spec.primitives):
            sel = (winner == k) & np.isfinite(t_near)
            if not sel.any():
                continue
            visible[k, sel] = True
            p = pos + dirs[sel] * t_near[sel, None]
            if prim.kind == "sphere":
                n = (p - np.asarray(prim.center)) / prim.extent[0]
            else:
                n = _box_normal(p, prim)
            lam = np.clip(n @ LIGHT_DIR, 0.0, None)
            shade = AMBIENT + (1.0 - AMBIENT) * lam
            img[:, sel] = np.asarray(prim.color)[:, None] * shade
    else:
        visible = np.zeros((0, H * H), dtype=bool)
    order = sorted(range(K), key=lambda k: float(np.linalg.norm(np.asarray(
        spec.primitives[k].center) - pos)))
    return (np.clip(img, 0.0, 1.0).reshape(3, H, H),
            visible.reshape(K, H, H), order)


def render_solo(spec: SceneSpec, t: int, k: int) -> np.ndarray:
    """Amodal mask of object k: its silhouette with every other object removed."""
    pos, dirs = _pixel_rays(spec, t)
    hits = primitive_hits(spec.primitives[k], pos, dirs)
    H = spec.image_size
    return np.isfinite(hits).reshape(H, H)


# ---------------------------------------------------------------------------
# scene generation

_COUNTS = {"B": (3, 4), "D": (5, 8)}
_SPREAD = {"B": 1.7, "D": 1.5}
_PALETTE = [(0.85, 0.25, 0.2), (0.2, 0.55, 0.85), (0.25, 0.75, 0.3),
            (0.9, 0.75, 0.2), (0.7, 0.35, 0.8), (0.95, 0.5, 0.15),
            (0.3, 0.8, 0.75), (0.85, 0.4, 0.55)]


def _prims_intersect(a: Primitive, b: Primitive) -> bool:
    ca, cb = np.asarray(a.center), np.asarray(b.center)
    if a.kind == "sphere" and b.kind == "sphere":
        return np.linalg.norm(ca - cb) < a.extent[0] + b.extent[0]
    if a.kind == "box" and b.kind == "box":
        return bool(np.all(np.abs(ca - cb) < np.asarray(a.extent) + np.asarray(b.extent)))
    sph, box = (a, b) if a.kind == "sphere" else (b, a)
    closest = np.clip(np.asarray(sph.center),
                      np.asarray(box.center) - np.asarray(box.extent),
                      np.asarray(box.center) + np.asarray(box.extent))
    return np.linalg.norm(closest - np.asarray(sph.center)) < sph.extent[0]


def _sample_primitives(rng: Rng, difficulty: str) -> tuple:
    lo, hi = _COUNTS[difficulty]
    count = lo + rng.randint(hi - lo + 1)
    spread = _SPREAD[difficulty]
    prims: list[Primitive] = []
    colors = list(_PALETTE)
    rng.shuffle(colors)
    for i in range(count):
        for _ in range(200):
            kind = "sphere" if rng.uniform() < 0.5 else "box"
            if kind == "sphere":
                r = 0.5 + 0.4 * rng.uniform()
                ext = (r, r, r)
                z = r
            else:
                ext = (0.4 + 0.5 * rng.uniform(), 0.4 + 0.5 * rng.uniform(),
                       0.4 + 0.5 * rng.uniform())
                z = ext[2]
            ang = 2.0 * np.pi * rng.uniform()
            rad = spread * np.sqrt(rng.uniform())
            cand = Primitive(kind, (rad * np.cos(ang), rad * np.sin(ang), z),
                             ext, colors[i % len(colors)])
            if not any(_prims_intersect(cand, p) for p in prims):
                prims.append(cand)
                break
        else:
            return tuple()  # placement failed; caller resamples the scene
    return tuple(prims)


def _occlusion_frames(spec: SceneSpec) -> int:
    """Number of frames in which at least one object pair overlaps in
    projection (one of the pair is then partially or fully occluded)."""
    count = 0
    for t in range(spec.num_frames):
        hits = np.isfinite(frame_hit_field(spec, t))
        K = hits.shape[0]
        if any((hits[i] & hits[j]).any()
               for i in range(K) for j in range(i + 1, K)):
            count += 1
    return count


def generate_scene(seed: int, difficulty: str = "B", num_frames: int = 8,
                   image_size: int = 48, max_attempts: int = 50) -> SceneSpec:
    """Seeded scene with enforced projected overlap: resample until some
    object pair occludes in at least half the frames."""
    if difficulty not in _COUNTS:
        raise DataError(f"difficulty must be one of {sorted(_COUNTS)}, got {difficulty!r}")
    need = (num_frames + 1) // 2
    best, best_frames = None, -1
    for attempt in range(max_attempts):
        rng = Rng(seed, "scene", attempt)
        prims = _sample_primitives(rng, difficulty)
        if not prims:
            continue
        orbit = OrbitSpec(
            radius=5.5 + 1.5 * rng.uniform(),
            height=(1.5 + 1.5 * rng.uniform()) if difficulty == "B" else (1.0 + 1.0 * rng.uniform()),
            angle_start=2.0 * np.pi * rng.uniform(),
            angle_step=2.0 * np.pi / num_frames,
        )
        spec = SceneSpec(prims, orbit, num_frames, image_size, seed, difficulty)
        got = _occlusion_frames(spec)
        if got >= need:
            return spec
        if got > best_frames:
            best, best_frames = spec, got
    return best  # most-occluded candidate when the quota is never met


# ---------------------------------------------------------------------------
# rendered sequences

@dataclass
class RenderedSequence:
    frames: np.ndarray          # [T, 3, H, W] float64 in [0, 1]
    full_masks: np.ndarray      # [T, K, H, W] bool
    visible_masks: np.ndarray   # [T, K, H, W] bool
    boxes: list                 # [T][K] inclusive (r0, c0, r1, c1) or None
    intrinsics: CameraIntrinsics
    seed: int
    difficulty: str = "B"
    name: str = ""

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_objects(self) -> int:
        return self.full_masks.shape[1]

    @property
    def image_size(self) -> int:
        return self.frames.shape[-1]


def mask_box(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return (int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def render_sequence(spec: SceneSpec, name: str = "") -> RenderedSequence:
    T, H, K = spec.num_frames, spec.image_size, len(spec.primitives)
    frames = np.zeros((T, 3, H, H))
    full = np.zeros((T, K, H, H), dtype=bool)
    vis = np.zeros((T, K, H, H), dtype=bool)
    boxes = []
    for t in range(T):
        img, visible, _ = render_frame(spec, t)
        frames[t] = img
        vis[t] = visible
        hits = frame_hit_field(spec, t)
        full[t] = np.isfinite(hits).reshape(K, H, H)
        boxes.append([mask_box(vis[t, k]) for k in range(K)])
    return RenderedSequence(frames, full, vis, boxes, spec.intrinsics(),
                            spec.seed, spec.difficulty, name)


# ---------------------------------------------------------------------------
# image file io (binary PPM / PGM)

def write_ppm(path, img: np.ndarray) -> None:
    """img [3, H, W] floats in [0,1] quantized to 8-bit binary PPM."""
    _, H, W = img.shape
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode())
        fh.write(q.transpose(1, 2, 0).tobytes())


def _read_header(fh, magic: bytes):
    if fh.readline().strip() != magic:
        raise DataError(f"bad image magic, expected {magic!r}")
    dims = fh.readline().split()
    maxval = fh.readline().strip()
    if len(dims) != 2 or maxval != b"255":
        raise DataError("unsupported PPM/PGM header")
    return int(dims[0]), int(dims[1])


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        W, H = _read_header(fh, b"P6")
        raw = np.frombuffer(fh.read(W * H * 3), dtype=np.uint8)
    return raw.reshape(H, W, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, mask: np.ndarray) -> None:
    H, W = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode())
        fh.write((mask.astype(np.uint8) * 255).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        W, H = _read_header(fh, b"P5")
        raw = np.frombuffer(fh.read(W * H), dtype=np.uint8)
    vals = set(np.unique(raw).tolist())
    if not vals <= {0, 255}:
        raise DataError(f"{path}: mask values must be 0 or 255, got {sorted(vals)}")
    return (raw.reshape(H, W) == 255)


# ---------------------------------------------------------------------------
# dataset directory io

SCHEMA_VERSION = 1


def write_dataset(sequences: list[RenderedSequence], out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, seq in enumerate(sequences):
        name = seq.name or f"seq_{i:04d}"
        names.append(name)
        sdir = os.path.join(out_dir, name)
        os.makedirs(sdir, exist_ok=True)
        T, K, H = seq.num_frames, seq.num_objects, seq.image_size
        meta = {
            "seed": seq.seed,
            "difficulty": seq.difficulty,
            "T": T,
            "K": K,
            "image_size": H,
            "intrinsics": seq.intrinsics.to_dict(H, H),
            "track_boxes": [[list(b) if b is not None else None for b in row]
                            for row in seq.boxes],
        }
        with open(os.path.join(sdir, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
        for t in range(T):
            write_ppm(os.path.join(sdir, f"frame_{t:02d}.ppm"), seq.frames[t])
            for k in range(K):
                write_pgm(os.path.join(sdir, f"full_{t:02d}_{k}.pgm"), seq.full_masks[t, k])
                write_pgm(os.path.join(sdir, f"vis_{t:02d}_{k}.pgm"), seq.visible_masks[t, k])
    manifest = {"schema_version": SCHEMA_VERSION, "sequences": names}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_dataset(root) -> list[RenderedSequence]:
    mpath = os.path.join(root, "manifest.json")
    if not os.path.exists(mpath):
        raise DataError(f"{root}: no manifest.json")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{root}: unsupported schema_version {manifest.get('schema_version')}")
    out = []
    for name in manifest["sequences"]:
        sdir = os.path.join(root, name)
        with open(os.path.join(sdir, "meta.json")) as fh:
            meta = json.load(fh)
        for key in ("intrinsics", "T", "K", "image_size", "track_boxes", "seed"):
            if key not in meta:
                raise DataError(f"{name}/meta.json: missing required key '{key}'")
        T, K, H = meta["T"], meta["K"], meta["image_size"]
        frames = np.stack([read_ppm(os.path.join(sdir, f"frame_{t:02d}.ppm"))
                           for t in range(T)])
        full = np.stack([[read_pgm(os.path.join(sdir, f"full_{t:02d}_{k}.pgm"))
                          for k in range(K)] for t in range(T)])
        vis = np.stack([[read_pgm(os.path.join(sdir, f"vis_{t:02d}_{k}.pgm"))
                         for k in range(K)] for t in range(T)])
        boxes = [[tuple(b) if b is not None else None for b in row]
                 for row in meta["track_boxes"]]
        out.append(RenderedSequence(frames, full, vis, boxes,
                                    CameraIntrinsics.from_dict(meta["intrinsics"]),
                                    meta["seed"], meta.get("difficulty", "B"), name))
    return out


def generate_dataset(seed: int, difficulty: str, count: int, num_frames: int = 8,
                     image_size: int = 48) -> list[RenderedSequence]:
    seqs = []
    root = Rng(seed, "dataset", difficulty)
    for i in range(count):
        scene_seed = root.stream(i).u64()
        spec = generate_scene(scene_seed, difficulty, num_frames, image_size)
        seqs.append(render_sequence(spec, name=f"seq_{i:04d}"))
    return seqs
