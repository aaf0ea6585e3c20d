"""Seeded synthetic BEV scenes with a sparse, occluded LiDAR and a panoramic camera.

The sensor sits at the world origin, at the midpoint of the near edge of a
square world ``[-E/2, E/2] x [0, E]`` and looks along +y. Boxes carry exact
labels. LiDAR returns thin out as ``k_pts / max(1, d^2)`` and are shadowed by
nearer boxes; the camera sees every object's class but only a noisy range.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import WorldSpec

FORMAT_MAGIC = b"BEVKDSET"
FORMAT_VERSION = 1
_END = b"END!"

BOX_DTYPE = np.dtype(
    [("class_id", "<i4"), ("x", "<f4"), ("y", "<f4"), ("w", "<f4"), ("l", "<f4"), ("yaw", "<f4")]
)


class SceneSamplingError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2 * np.pi)
    return float(out) if np.ndim(out) == 0 else out


def _f32(v: float) -> float:
    return float(np.float32(v))


def _canonical_yaw(yaw: float) -> float:
    y = _f32(wrap_angle(yaw))
    if y > math.pi:
        y = _f32(y - 2 * math.pi)
    if y <= -math.pi:
        y = float(np.nextafter(np.float32(-math.pi), np.float32(0)))
    return y


@dataclass(frozen=True)
class BoxLabel:
    """Oriented BEV box. ``l`` runs along the heading ``yaw``, ``w`` across it."""

    class_id: int
    x: float
    y: float
    w: float
    l: float
    yaw: float

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def distance(self) -> float:
        return math.hypot(self.x, self.y)

    @property
    def half_diagonal(self) -> float:
        return 0.5 * math.hypot(self.w, self.l)

    def corners(self) -> np.ndarray:
        """(4, 2) corners, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2, self.w / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center

    def contains(self, pts: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Whether each (x, y) row lies inside the box (boundary included up to ``tol``)."""
        p = np.atleast_2d(pts) - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        u = p[:, 0] * c + p[:, 1] * s
        v = -p[:, 0] * s + p[:, 1] * c
        return (np.abs(u) <= self.l / 2 + tol) & (np.abs(v) <= self.w / 2 + tol)

    def ray_hit(self, dirs: np.ndarray) -> np.ndarray:
        """Entry distance along unit rays from the origin; ``inf`` where missed."""
        dirs = np.atleast_2d(dirs)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        ox, oy = -self.x * c - self.y * s, self.x * s - self.y * c
        dx = dirs[:, 0] * c + dirs[:, 1] * s
        dy = -dirs[:, 0] * s + dirs[:, 1] * c
        with np.errstate(divide="ignore", invalid="ignore"):
            tx1 = (-self.l / 2 - ox) / dx
            tx2 = (self.l / 2 - ox) / dx
            ty1 = (-self.w / 2 - oy) / dy
            ty2 = (self.w / 2 - oy) / dy
        tx1 = np.where(dx == 0, np.where(abs(ox) <= self.l / 2, -np.inf, np.inf), tx1)
        tx2 = np.where(dx == 0, np.where(abs(ox) <= self.l / 2, np.inf, np.inf), tx2)
        ty1 = np.where(dy == 0, np.where(abs(oy) <= self.w / 2, -np.inf, np.inf), ty1)
        ty2 = np.where(dy == 0, np.where(abs(oy) <= self.w / 2, np.inf, np.inf), ty2)
        t_near = np.maximum(np.minimum(tx1, tx2), np.minimum(ty1, ty2))
        t_far = np.minimum(np.maximum(tx1, tx2), np.maximum(ty1, ty2))
        hit = (t_near <= t_far) & (t_far >= 0)
        return np.where(hit, np.maximum(t_near, 0.0), np.inf)

    def angular_span(self) -> tuple[float, float]:
        """(min, max) azimuth of the box corners as seen from the origin."""
        ref = math.atan2(self.y, self.x)
        cs = self.corners()
        rel = wrap_angle(np.arctan2(cs[:, 1], cs[:, 0]) - ref)
        return ref + float(rel.min()), ref + float(rel.max())

    def facing_edges(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Edges whose outward normal points toward the sensor."""
        cs = self.corners()
        out = []
        for k in range(4):
            a, b = cs[k], cs[(k + 1) % 4]
            mid = (a + b) / 2
            normal = mid - self.center
            if np.dot(normal, -mid) > 0:
                out.append((a, b))
        return out

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.l, self.yaw])


@dataclass
class Scene:
    scene_id: int
    boxes: list[BoxLabel]
    lidar_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.float32))
    panorama: np.ndarray | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        if self.scene_id != other.scene_id or self.boxes != other.boxes:
            return False
        if not np.array_equal(self.lidar_points, other.lidar_points):
            return False
        if (self.panorama is None) != (other.panorama is None):
            return False
        return self.panorama is None or np.array_equal(self.panorama, other.panorama)

    def box_array(self) -> np.ndarray:
        arr = np.zeros(len(self.boxes), BOX_DTYPE)
        for i, b in enumerate(self.boxes):
            arr[i] = (b.class_id, b.x, b.y, b.w, b.l, b.yaw)
        return arr


def scene_rng(spec: WorldSpec, scene_id: int, stream: int) -> np.random.Generator:
    """Independent generator per (world seed, scene, stream); streams: 0 boxes, 1 lidar, 2 camera."""
    return np.random.default_rng([spec.seed, scene_id, stream])


def sample_scene(rng: np.random.Generator, spec: WorldSpec, scene_id: int = 0) -> Scene:
    """Draw 1..n_max non-overlapping boxes; sensors are left unrendered."""
    n = int(rng.integers(1, spec.n_max + 1))
    half = spec.extent / 2
    boxes: list[BoxLabel] = []
    attempts = 0
    while len(boxes) < n:
        attempts += 1
        if attempts > 1000:
            raise SceneSamplingError(
                f"scene {scene_id}: could not place {n} non-overlapping boxes in 1000 attempts"
            )
        cls = int(rng.integers(0, spec.num_classes))
        w_lo, w_hi, l_lo, l_hi = spec.class_sizes[cls]
        w = _f32(rng.uniform(w_lo, w_hi))
        l = _f32(rng.uniform(l_lo, l_hi))
        x = _f32(rng.uniform(-half + spec.margin, half - spec.margin))
        y = _f32(rng.uniform(spec.margin, spec.extent - spec.margin))
        yaw = _canonical_yaw(rng.uniform(-math.pi, math.pi))
        cand = BoxLabel(cls, x, y, w, l, yaw)
        if cand.distance < max(spec.min_range, cand.half_diagonal + 0.5):
            continue
        if any(
            math.hypot(cand.x - b.x, cand.y - b.y) <= 0.8 * (cand.half_diagonal + b.half_diagonal)
            for b in boxes
        ):
            continue
        boxes.append(cand)
    return Scene(scene_id=scene_id, boxes=boxes)


def expected_point_count(distance: float, k_pts: float) -> float:
    return k_pts / max(1.0, distance * distance)


def render_lidar(scene: Scene, spec: WorldSpec, rng: np.random.Generator | None = None,
                 return_owner: bool = False):
    """Perimeter returns on sensor-facing edges, thinned with distance, shadowed by nearer boxes.

    Every random draw happens before occlusion filtering, so toggling
    ``spec.occlusion`` on a fixed seed only ever removes points.
    """
    if rng is None:
        rng = scene_rng(spec, scene.scene_id, 1)
    pts, owners = [], []
    for i, box in enumerate(scene.boxes):
        edges = box.facing_edges()
        lengths = np.array([np.linalg.norm(b - a) for a, b in edges])
        count = int(rng.poisson(expected_point_count(box.distance, spec.k_pts)))
        u = rng.uniform(0.0, lengths.sum(), size=count)
        noise = rng.normal(0.0, 1.0, size=(count, 2)) * spec.point_sigma
        if count == 0:
            continue
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        e = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, len(edges) - 1)
        t = (u - cum[e]) / lengths[e]
        a = np.array([edges[k][0] for k in e])
        b = np.array([edges[k][1] for k in e])
        p = a + (b - a) * t[:, None]
        keep = np.ones(count, bool)
        if spec.occlusion and len(scene.boxes) > 1:
            r = np.linalg.norm(p, axis=1)
            dirs = p / r[:, None]
            for j, other in enumerate(scene.boxes):
                if j != i:
                    keep &= ~(other.ray_hit(dirs) < r - 1e-9)
        pts.append(p[keep] + noise[keep])
        owners.append(np.full(int(keep.sum()), i))
    points = np.concatenate(pts).astype(np.float32) if pts else np.zeros((0, 2), np.float32)
    owner = np.concatenate(owners) if owners else np.zeros(0, int)
    return (points, owner) if return_owner else points


def azimuth_centers(spec: WorldSpec) -> np.ndarray:
    A = spec.azimuth_bins
    return (np.arange(A) + 0.5) * math.pi / A


def camera_hits(scene: Scene, spec: WorldSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per azimuth column: index of the nearest box hit (-1 if none) and its hit range."""
    th = azimuth_centers(spec)
    dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
    if not scene.boxes:
        return np.full(len(th), -1), np.full(len(th), np.inf)
    t = np.stack([b.ray_hit(dirs) for b in scene.boxes])
    idx = np.argmin(t, axis=0)
    rng_ = t[idx, np.arange(len(th))]
    idx = np.where(np.isfinite(rng_), idx, -1)
    return idx, rng_


def background_code(spec: WorldSpec) -> np.ndarray:
    code = np.zeros(spec.camera_channels, np.float32)
    code[spec.num_classes] = 1.0
    return code


def render_camera(scene: Scene, spec: WorldSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """(A, m + 3) panorama: one-hot class, background flag, angular width in bins, range cue / extent.

    The range cue is the object's center distance scaled by ``1 + range_sigma * eps``
    with one ``eps`` per object per render, so its error grows linearly with distance.
    """
    if rng is None:
        rng = scene_rng(spec, scene.scene_id, 2)
    m = spec.num_classes
    eps = rng.normal(0.0, 1.0, size=len(scene.boxes))
    idx, _ = camera_hits(scene, spec)
    pano = np.tile(background_code(spec), (spec.azimuth_bins, 1))
    bins_per_rad = spec.azimuth_bins / math.pi
    for i, box in enumerate(scene.boxes):
        cols = idx == i
        if not cols.any():
            continue
        lo, hi = box.angular_span()
        d = box.distance
        code = np.zeros(spec.camera_channels, np.float32)
        code[box.class_id] = 1.0
        code[m + 1] = (hi - lo) * bins_per_rad
        code[m + 2] = d * (1.0 + spec.range_sigma * eps[i]) / spec.extent
        pano[cols] = code
    return pano.astype(np.float32)


def render_scene(scene: Scene, spec: WorldSpec) -> Scene:
    scene.lidar_points = render_lidar(scene, spec)
    scene.panorama = render_camera(scene, spec)
    return scene


def generate_scenes(spec: WorldSpec, n: int, start_id: int = 0) -> list[Scene]:
    """Sample and render ``n`` scenes with ids ``start_id .. start_id + n - 1``."""
    spec.validate()
    out = []
    for sid in range(start_id, start_id + n):
        sc = sample_scene(scene_rng(spec, sid, 0), spec, scene_id=sid)
        out.append(render_scene(sc, spec))
    return out


# ---------------------------------------------------------------------------
# Dataset file
#
# header : magic b"BEVKDSET" | version u32 | spec_len u32 | spec JSON (utf-8) | n_records u64
# record : scene_id i64 | n_boxes u32 | n_points u32 | A u32 | channels u32
#          | boxes  n_boxes x (class_id i32, x, y, w, l, yaw f32)
#          | points n_points x (x, y f32)
#          | panorama A x channels f32, row-major
# trailer: b"END!"
# All integers and floats little-endian.
# ---------------------------------------------------------------------------

def _dumps(scenes: list[Scene], spec: WorldSpec) -> bytes:
    buf = io.BytesIO()
    blob = json.dumps(spec.to_dict(), sort_keys=True).encode()
    buf.write(FORMAT_MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<Q", len(scenes)))
    for sc in scenes:
        pano = sc.panorama if sc.panorama is not None else np.zeros((0, 0), np.float32)
        pts = np.ascontiguousarray(sc.lidar_points, dtype="<f4").reshape(-1, 2)
        buf.write(struct.pack("<qIIII", sc.scene_id, len(sc.boxes), len(pts), *pano.shape))
        buf.write(sc.box_array().tobytes())
        buf.write(pts.tobytes())
        buf.write(np.ascontiguousarray(pano, dtype="<f4").tobytes())
    buf.write(_END)
    return buf.getvalue()


def serialize_dataset(scenes: list[Scene], path: str | Path, spec: WorldSpec) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_dumps(scenes, spec))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError(f"truncated dataset file at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def load_dataset(path: str | Path) -> tuple[list[Scene], WorldSpec]:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(FORMAT_MAGIC)) != FORMAT_MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic)")
    version, spec_len = struct.unpack("<II", r.take(8))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"dataset format version {version}, expected {FORMAT_VERSION}")
    spec = WorldSpec.from_dict(json.loads(r.take(spec_len).decode()))
    (n,) = struct.unpack("<Q", r.take(8))
    scenes = []
    for _ in range(n):
        sid, nb, npts, A, C = struct.unpack("<qIIII", r.take(24))
        arr = np.frombuffer(r.take(nb * BOX_DTYPE.itemsize), BOX_DTYPE)
        boxes = [BoxLabel(int(b["class_id"]), float(b["x"]), float(b["y"]), float(b["w"]),
                          float(b["l"]), float(b["yaw"])) for b in arr]
        pts = np.frombuffer(r.take(npts * 8), "<f4").reshape(npts, 2).astype(np.float32)
        pano = np.frombuffer(r.take(A * C * 4), "<f4").reshape(A, C).astype(np.float32)
        scenes.append(Scene(int(sid), boxes, pts, pano if A * C else None))
    if r.take(len(_END)) != _END:
        raise DatasetFormatError("missing end-of-file marker")
    return scenes, spec
