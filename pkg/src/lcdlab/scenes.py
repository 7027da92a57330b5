"""Scene ingestion: real LiDAR frames, synthetic worlds, simulated scans,
trajectories, and viewpoint perturbation.

All operations are pure given an explicit RNG, so distinct frames can be
processed concurrently.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedFileError

KITTI_RECORD_BYTES = 16  # four little-endian float32: x, y, z, reflectance


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    r = math.remainder(a, 2.0 * math.pi)
    return math.pi if r <= -math.pi else r


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float


@dataclass
class PointCloud:
    """LiDAR returns, sensor frame. points is an (N, 3) float64 array."""
    points: np.ndarray
    frame_id: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return self.points.shape[0]


@dataclass
class Pose:
    """SE(3) sensor pose; angles stored normalized to (-pi, pi]."""
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        self.roll = wrap_angle(self.roll)
        self.pitch = wrap_angle(self.pitch)
        self.yaw = wrap_angle(self.yaw)

    def rotation(self) -> np.ndarray:
        """Body-to-world rotation Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
        cr, sr = math.cos(self.roll), math.sin(self.roll)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
        ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
        rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
        return rz @ ry @ rx

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def planar(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Box:
    """Axis-aligned 2.5-D obstacle: footprint [x0,x1]x[y0,y1], z in [0, height]."""
    x0: float
    y0: float
    x1: float
    y1: float
    height: float


@dataclass
class World:
    """Rectangular ground plane with boxy obstacles."""
    bounds: tuple[float, float, float, float]  # x0, y0, x1, y1
    obstacles: list[Box] = field(default_factory=list)
    seed: int = 0

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.bounds
        return x0 <= x <= x1 and y0 <= y <= y1


@dataclass
class LidarSpec:
    azimuth_count: int = 360
    elevation_angles: tuple = tuple(np.linspace(-0.3, 0.1, 8))
    max_range: float = 50.0
    range_jitter: float = 0.0  # Gaussian sigma on returned ranges, 0 = noiseless

    def __post_init__(self):
        if self.azimuth_count < 1:
            raise ValueError("azimuth_count must be >= 1")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")


@dataclass
class PerturbSpec:
    """Viewpoint noise: translation within a disk of radius t_max, heading
    uniform in (-r_max/2, r_max/2). Tag T{a}_R{b} maps to t_max=a, r_max=b."""
    t_max: float = 0.0
    r_max: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.t_max < 0 or self.r_max < 0:
            raise ValueError("perturbation amplitudes must be nonnegative")


_TAG_RE = re.compile(r"^T([0-9.]+)_R([0-9.]+)$")


def parse_perturb_tag(tag: str, seed: int = 0) -> PerturbSpec:
    """Parse a T{a}_R{b} tag into a PerturbSpec."""
    m = _TAG_RE.match(tag)
    if not m:
        raise ValueError(f"bad perturbation tag {tag!r}, expected T<a>_R<b>")
    return PerturbSpec(t_max=float(m.group(1)), r_max=float(m.group(2)), seed=seed)


def perturb_tag(spec: PerturbSpec) -> str:
    return f"T{spec.t_max:g}_R{spec.r_max:g}"


# --- KITTI-style binary scans -------------------------------------------

def load_kitti_scan(path, frame_id: int | None = None) -> PointCloud:
    """Decode packed (x, y, z, reflectance) float32 records; reflectance dropped."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % KITTI_RECORD_BYTES != 0:
        raise MalformedFileError(
            f"{path}: {len(raw)} bytes is not a multiple of {KITTI_RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    if frame_id is None:
        digits = re.findall(r"\d+", path.stem)
        frame_id = int(digits[-1]) if digits else 0
    return PointCloud(points=rec[:, :3].astype(np.float64), frame_id=frame_id)


def write_kitti_scan(path, cloud: PointCloud, reflectance: float = 0.0) -> None:
    rec = np.empty((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.points
    rec[:, 3] = reflectance
    Path(path).write_bytes(rec.tobytes())


# --- pose files: "frame_id x y z roll pitch yaw", '#' comments -----------

def write_poses(path, poses: list[Pose], frame_ids=None) -> None:
    ids = range(len(poses)) if frame_ids is None else frame_ids
    lines = ["# frame_id x y z roll pitch yaw"]
    for i, p in zip(ids, poses):
        lines.append(f"{i} {p.x!r} {p.y!r} {p.z!r} {p.roll!r} {p.pitch!r} {p.yaw!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> list[tuple[int, Pose]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise MalformedFileError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        fid = int(parts[0])
        vals = [float(v) for v in parts[1:]]
        out.append((fid, Pose(*vals)))
    return out


# --- synthetic worlds -----------------------------------------------------

def generate_world(seed: int, n_obstacles: int,
                   bounds: tuple[float, float, float, float]) -> World:
    """Scatter axis-aligned boxes inside the bounds, deterministically."""
    x0, y0, x1, y1 = (float(v) for v in bounds)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"empty world bounds {bounds}")
    if n_obstacles < 0:
        raise ValueError("n_obstacles must be >= 0")
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(n_obstacles):
        hx = rng.uniform(0.4, 2.0)
        hy = rng.uniform(0.4, 2.0)
        cx = rng.uniform(x0 + hx, x1 - hx)
        cy = rng.uniform(y0 + hy, y1 - hy)
        h = rng.uniform(1.0, 4.0)
        boxes.append(Box(cx - hx, cy - hy, cx + hx, cy + hy, h))
    return World(bounds=(x0, y0, x1, y1), obstacles=boxes, seed=seed)


def perimeter_walls(bounds, thickness: float = 0.5, height: float = 3.0) -> list[Box]:
    """Four thin wall boxes hugging the inside of the bounds."""
    x0, y0, x1, y1 = bounds
    t = thickness
    return [
        Box(x0, y0, x1, y0 + t, height),
        Box(x0, y1 - t, x1, y1, height),
        Box(x0, y0, x0 + t, y1, height),
        Box(x1 - t, y0, x1, y1, height),
    ]


def _ray_directions(spec: LidarSpec) -> np.ndarray:
    az = 2.0 * math.pi * np.arange(spec.azimuth_count) / spec.azimuth_count
    el = np.asarray(spec.elevation_angles, dtype=np.float64)
    ca, sa = np.cos(az), np.sin(az)
    ce, se = np.cos(el), np.sin(el)
    # one ray per (azimuth, elevation) pair, azimuth-major order
    dirs = np.empty((spec.azimuth_count, el.size, 3))
    dirs[:, :, 0] = ca[:, None] * ce[None, :]
    dirs[:, :, 1] = sa[:, None] * ce[None, :]
    dirs[:, :, 2] = se[None, :]
    return dirs.reshape(-1, 3)


def simulate_scan(world: World, pose: Pose, spec: LidarSpec,
                  rng: np.random.Generator | None = None) -> PointCloud:
    """Cast one ray per (azimuth, elevation) pair against the world's boxes.

    Returns the nearest box intersection within max_range per ray, expressed
    in the sensor frame; rays with no intersection contribute no point.
    """
    if not world.contains(pose.x, pose.y):
        raise ValueError(f"pose ({pose.x}, {pose.y}) outside world bounds")
    dirs = _ray_directions(spec) @ pose.rotation().T
    origin = pose.position()
    if not world.obstacles:
        return PointCloud(points=np.empty((0, 3)), frame_id=0)

    lo = np.array([[b.x0, b.y0, 0.0] for b in world.obstacles])
    hi = np.array([[b.x1, b.y1, b.height] for b in world.obstacles])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs  # inf where a direction component is 0
        t0 = (lo[None, :, :] - origin) * inv[:, None, :]
        t1 = (hi[None, :, :] - origin) * inv[:, None, :]
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # 0 * inf from on-boundary origins would give NaN; treat as no constraint
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_enter = tmin.max(axis=2)
    t_exit = tmax.min(axis=2)
    hit = (t_enter <= t_exit) & (t_enter > 1e-9) & (t_enter <= spec.max_range)
    t_enter = np.where(hit, t_enter, np.inf)
    t_ray = t_enter.min(axis=1)
    mask = np.isfinite(t_ray)
    if spec.range_jitter > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        t_ray = t_ray + rng.normal(0.0, spec.range_jitter, size=t_ray.shape)
    pts_world = origin + t_ray[mask, None] * dirs[mask]
    pts_sensor = (pts_world - origin) @ pose.rotation()
    return PointCloud(points=pts_sensor, frame_id=0)


def perturb_pose(pose: Pose, spec: PerturbSpec, rng: np.random.Generator) -> Pose:
    """Jitter the viewpoint: planar offset uniform over the t_max disk,
    heading offset uniform in (-r_max/2, r_max/2); z, roll, pitch unchanged.

    Draw order is fixed (radius u, angle u, heading u) so results are
    deterministic for a given generator state.
    """
    r = spec.t_max * math.sqrt(rng.uniform())
    phi = 2.0 * math.pi * rng.uniform()
    dyaw = rng.uniform(-spec.r_max / 2.0, spec.r_max / 2.0)
    return Pose(x=pose.x + r * math.cos(phi), y=pose.y + r * math.sin(phi),
                z=pose.z, roll=pose.roll, pitch=pose.pitch,
                yaw=wrap_angle(pose.yaw + dyaw))


def make_trajectory(world: World, waypoints, step_m: float,
                    sensor_z: float = 1.5) -> list[Pose]:
    """Sample poses every step_m along the waypoint polyline, yaw tangent to
    motion. Samples fall at arc lengths 0, step, 2*step, ...; a sample landing
    exactly on a vertex takes the outgoing segment's heading."""
    wps = [np.asarray(w, dtype=np.float64) for w in waypoints]
    if len(wps) < 2:
        raise ValueError("need at least 2 waypoints")
    if step_m <= 0:
        raise ValueError("step_m must be positive")
    for w in wps:
        if not world.contains(w[0], w[1]):
            raise ValueError(f"waypoint {tuple(w)} outside world bounds")
    segs = [(a, b, float(np.hypot(*(b - a)))) for a, b in zip(wps, wps[1:])
            if float(np.hypot(*(b - a))) > 0.0]
    if not segs:
        raise ValueError("waypoints are all coincident")
    total = sum(s[2] for s in segs)
    n = int(math.floor(total / step_m + 1e-9))
    poses = []
    for k in range(n + 1):
        d = k * step_m
        acc = 0.0
        for i, (a, b, length) in enumerate(segs):
            last = i == len(segs) - 1
            if d < acc + length - 1e-12 or last:
                u = min(max((d - acc) / length, 0.0), 1.0)
                p = a + u * (b - a)
                yaw = math.atan2(b[1] - a[1], b[0] - a[0])
                # a sample on an interior vertex belongs to the next segment
                if not last and u >= 1.0 - 1e-12:
                    nb, ne, _ = segs[i + 1]
                    yaw = math.atan2(ne[1] - nb[1], ne[0] - nb[0])
                poses.append(Pose(x=float(p[0]), y=float(p[1]), z=sensor_z, yaw=yaw))
                break
            acc += length
    return poses


def square_loop_waypoints(half_side: float, laps: int = 1,
                          center=(0.0, 0.0)) -> list[tuple[float, float]]:
    """Closed square loop traversed counterclockwise, repeated `laps` times."""
    cx, cy = center
    h = half_side
    corner = [(cx - h, cy - h), (cx + h, cy - h), (cx + h, cy + h), (cx - h, cy + h)]
    wps = []
    for _ in range(laps):
        wps.extend(corner)
    wps.append(corner[0])
    return wps
