"""Log-odds occupancy octree over sequential scans, local cropping, and
egocentric 2-D top-view projection.

integrate_scan mutates the map (single writer); crop_local and
project_topview are pure reads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedFileError
from .scenes import Pose, PointCloud

# Standard occupancy-mapping update constants, fixed so tests are exact.
P_HIT = 0.7
P_MISS = 0.4
L_HIT = math.log(P_HIT / (1.0 - P_HIT))
L_MISS = math.log(P_MISS / (1.0 - P_MISS))
CLAMP_MIN = math.log(0.12 / 0.88)
CLAMP_MAX = math.log(0.97 / 0.03)

_KEY_BITS = 21          # signed voxel indices per axis packed into one int64
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1


def pack_keys(idx: np.ndarray) -> np.ndarray:
    """(N, 3) integer voxel indices -> int64 keys."""
    idx = np.asarray(idx, dtype=np.int64)
    return (((idx[:, 0] + _KEY_OFFSET) << (2 * _KEY_BITS))
            | ((idx[:, 1] + _KEY_OFFSET) << _KEY_BITS)
            | (idx[:, 2] + _KEY_OFFSET))


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    ix = (keys >> (2 * _KEY_BITS)) - _KEY_OFFSET
    iy = ((keys >> _KEY_BITS) & _KEY_MASK) - _KEY_OFFSET
    iz = (keys & _KEY_MASK) - _KEY_OFFSET
    return np.stack([ix, iy, iz], axis=1)


@dataclass
class OccupancyOctree:
    """Sparse voxel map; leaves hold clamped log-odds keyed by packed index."""
    resolution: float = 0.25
    max_depth: int = 16
    clamp_min: float = CLAMP_MIN
    clamp_max: float = CLAMP_MAX
    p_hit: float = P_HIT
    p_miss: float = P_MISS
    leaves: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if not 1 <= self.max_depth <= _KEY_BITS:
            raise ValueError(f"max_depth must be in [1, {_KEY_BITS}]")

    @property
    def l_hit(self) -> float:
        return math.log(self.p_hit / (1.0 - self.p_hit))

    @property
    def l_miss(self) -> float:
        return math.log(self.p_miss / (1.0 - self.p_miss))

    def index_limit(self) -> int:
        return 1 << (self.max_depth - 1)

    def keys_array(self) -> np.ndarray:
        return np.fromiter(self.leaves.keys(), dtype=np.int64, count=len(self.leaves))

    def values_array(self) -> np.ndarray:
        return np.fromiter(self.leaves.values(), dtype=np.float64, count=len(self.leaves))

    def occupancy(self, key: int) -> float:
        """p = 1 / (1 + exp(-log_odds)); unknown voxels default to 0.5."""
        lo = self.leaves.get(key, 0.0)
        return 1.0 / (1.0 + math.exp(-lo))


def voxel_indices(octree: OccupancyOctree, points: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=np.float64) / octree.resolution).astype(np.int64)


def _traverse_rays(origin: np.ndarray, endpoints: np.ndarray, res: float) -> np.ndarray:
    """3-D digital differential traversal (Amanatides-Woo) from origin to each
    endpoint, run in lockstep across rays. Returns packed keys of every voxel
    a ray passes through, excluding the endpoint's own voxel; the origin voxel
    is included. Duplicate keys across rays are kept."""
    if endpoints.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    v = np.floor(origin / res).astype(np.int64)[None, :].repeat(endpoints.shape[0], axis=0)
    v_end = np.floor(endpoints / res).astype(np.int64)
    d = endpoints - origin
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(d != 0.0, res / np.abs(d), np.inf)
        next_bound = (v + (step > 0)) * res
        t_max = np.where(d != 0.0, (next_bound - origin) / d, np.inf)
    t_max = np.where(np.isnan(t_max), np.inf, t_max)

    active = np.any(v != v_end, axis=1)
    chunks = [pack_keys(v[active])]
    v, v_end = v[active], v_end[active]
    step, t_max, t_delta = step[active], t_max[active], t_delta[active]
    while v.shape[0]:
        axis = np.argmin(t_max, axis=1)
        rows = np.arange(v.shape[0])
        t_now = t_max[rows, axis]
        v[rows, axis] += step[rows, axis]
        t_max[rows, axis] += t_delta[rows, axis]
        # drop rays that reached the endpoint voxel or overshot the segment
        alive = np.any(v != v_end, axis=1) & (t_now <= 1.0 + 1e-12)
        if not np.all(alive):
            v, v_end = v[alive], v_end[alive]
            step, t_max, t_delta = step[alive], t_max[alive], t_delta[alive]
        else:
            alive = None
        if v.shape[0]:
            chunks.append(pack_keys(v))
    return np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)


def integrate_scan(octree: OccupancyOctree, cloud: PointCloud, origin: Pose) -> OccupancyOctree:
    """Fold one scan into the map: endpoint voxels take a hit update, every
    voxel the ray traverses takes a miss update. Updates are aggregated per
    voxel within the scan, then clamped once."""
    if len(cloud) == 0:
        return octree
    pts_world = cloud.points @ origin.rotation().T + origin.position()
    limit = octree.index_limit()
    end_idx = voxel_indices(octree, pts_world)
    if np.any(np.abs(end_idx) >= limit) or np.any(
            np.abs(np.floor(origin.position() / octree.resolution)) >= limit):
        raise ValueError("scan extends beyond the octree's max_depth extent")

    hit_keys = pack_keys(end_idx)
    miss_keys = _traverse_rays(origin.position(), pts_world, octree.resolution)

    keys = np.concatenate([hit_keys, miss_keys])
    deltas = np.concatenate([np.full(hit_keys.size, octree.l_hit),
                             np.full(miss_keys.size, octree.l_miss)])
    uniq, inv = np.unique(keys, return_inverse=True)
    sums = np.zeros(uniq.size)
    np.add.at(sums, inv, deltas)

    leaves = octree.leaves
    cmin, cmax = octree.clamp_min, octree.clamp_max
    for k, dl in zip(uniq.tolist(), sums.tolist()):
        lo = leaves.get(k, 0.0) + dl
        leaves[k] = min(max(lo, cmin), cmax)
    return octree


def crop_local(octree: OccupancyOctree, center: Pose, radius: float) -> OccupancyOctree:
    """Keep exactly the leaves whose centers fall in the axis-aligned square
    of half-width radius around the center (planar test); values copied."""
    if radius <= 0:
        raise ValueError("crop radius must be positive")
    out = OccupancyOctree(resolution=octree.resolution, max_depth=octree.max_depth,
                          clamp_min=octree.clamp_min, clamp_max=octree.clamp_max,
                          p_hit=octree.p_hit, p_miss=octree.p_miss)
    if not octree.leaves:
        return out
    keys = octree.keys_array()
    vals = octree.values_array()
    idx = unpack_keys(keys)
    cx = (idx[:, 0] + 0.5) * octree.resolution
    cy = (idx[:, 1] + 0.5) * octree.resolution
    mask = (np.abs(cx - center.x) <= radius) & (np.abs(cy - center.y) <= radius)
    out.leaves = dict(zip(keys[mask].tolist(), vals[mask].tolist()))
    return out


@dataclass
class GridSpec:
    radius: float = 30.0
    cell: float = 0.25
    occupied_threshold: float = 0.5

    def __post_init__(self):
        if self.radius <= 0 or self.cell <= 0:
            raise ValueError("radius and cell must be positive")
        if not 0.0 < self.occupied_threshold < 1.0:
            raise ValueError("occupied_threshold must be in (0, 1)")

    @property
    def width(self) -> int:
        return int(math.ceil(2.0 * self.radius / self.cell))


@dataclass
class TopViewImage:
    """8-bit egocentric ground-plane projection; values are 0 or 255."""
    pixels: np.ndarray
    origin_pose: Pose
    cell: float

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def project_topview(octree: OccupancyOctree, grid: GridSpec, center: Pose) -> TopViewImage:
    """Project occupied voxels onto the ground plane, axes aligned with the
    robot heading. Pixel (row, col) covers robot-frame x (forward) in
    [row*cell - radius, ...) and y (left) in [col*cell - radius, ...); a pixel
    is 255 iff any voxel in its column has occupancy above the threshold."""
    w = grid.width
    img = np.zeros((w, w), dtype=np.uint8)
    if octree.leaves:
        keys = octree.keys_array()
        vals = octree.values_array()
        prob = 1.0 / (1.0 + np.exp(-vals))
        occ = prob > grid.occupied_threshold
        if np.any(occ):
            idx = unpack_keys(keys[occ])
            dx = (idx[:, 0] + 0.5) * octree.resolution - center.x
            dy = (idx[:, 1] + 0.5) * octree.resolution - center.y
            c, s = math.cos(center.yaw), math.sin(center.yaw)
            xr = c * dx + s * dy
            yr = -s * dx + c * dy
            row = np.floor((xr + grid.radius) / grid.cell).astype(np.int64)
            col = np.floor((yr + grid.radius) / grid.cell).astype(np.int64)
            ok = (row >= 0) & (row < w) & (col >= 0) & (col < w)
            img[row[ok], col[ok]] = 255
    return TopViewImage(pixels=img, origin_pose=center, cell=grid.cell)


# --- serialization --------------------------------------------------------

def write_pgm(path, image: TopViewImage | np.ndarray) -> None:
    """Binary PGM (P5, maxval 255)."""
    px = image.pixels if isinstance(image, TopViewImage) else np.asarray(image, np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise MalformedFileError(f"{path}: not a binary PGM")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise MalformedFileError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    if data.size != w * h:
        raise MalformedFileError(f"{path}: truncated pixel data")
    return data.reshape(h, w).copy()


def write_octree_snapshot(path, octree: OccupancyOctree) -> None:
    """Debugging aid: one "key_x key_y key_z log_odds" line per leaf."""
    keys = octree.keys_array()
    vals = octree.values_array()
    order = np.argsort(keys)
    idx = unpack_keys(keys[order])
    with open(path, "w") as fh:
        for (ix, iy, iz), lo in zip(idx.tolist(), vals[order].tolist()):
            fh.write(f"{ix} {iy} {iz} {lo!r}\n")


def read_octree_snapshot(path, resolution: float = 0.25, **kwargs) -> OccupancyOctree:
    octree = OccupancyOctree(resolution=resolution, **kwargs)
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        ix, iy, iz, lo = line.split()
        key = int(pack_keys(np.array([[int(ix), int(iy), int(iz)]]))[0])
        octree.leaves[key] = float(lo)
    return octree
