"""Batch pipeline stages: dataset generation/ingestion, map building,
training, encoding, matching, and evaluation.

Each stage reads and writes plain files so stages can be rerun and checked
independently; every stage is deterministic for a given seed.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adversarial as adv
from . import evaluation as ev
from . import mapping
from . import matching
from . import scenes
from .errors import DataIntegrityError

SCAN_DIR = "scans"
POSE_FILE = "poses.txt"
DATASET_META = "dataset.cfg"
FRAME_PATTERN = "frame_%06d.pgm"


@dataclass
class WorldConfig:
    """The bundled desk-scale world: a walled yard of boxes with a square
    two-lap loop plus a tail excursion into unvisited ground."""
    seed: int = 7
    n_obstacles: int = 24
    bounds: tuple = (-30.0, -30.0, 30.0, 30.0)
    walls: bool = True
    half_side: float = 12.0
    laps: int = 2
    step: float = 1.0
    tail: bool = True
    jitter: float = 0.0

    def build_world(self) -> scenes.World:
        world = scenes.generate_world(self.seed, self.n_obstacles, self.bounds)
        if self.walls:
            world.obstacles.extend(scenes.perimeter_walls(self.bounds))
        return world

    def waypoints(self) -> list[tuple[float, float]]:
        wps = scenes.square_loop_waypoints(self.half_side, laps=self.laps)
        if self.tail:
            # far enough south of the loop that tail frames have no true loop
            wps.extend([(-self.half_side, -2.0 * self.half_side),
                        (self.half_side, -2.0 * self.half_side)])
        return wps

    def lap_frames(self) -> int:
        return int(round(8.0 * self.half_side / self.step))


def gen_dataset(out_dir, cfg: WorldConfig | None = None,
                lidar: scenes.LidarSpec | None = None) -> Path:
    """Synthesize world + trajectory + scans + pose file under out_dir."""
    cfg = cfg if cfg is not None else WorldConfig()
    out_dir = Path(out_dir)
    (out_dir / SCAN_DIR).mkdir(parents=True, exist_ok=True)
    lidar = lidar or scenes.LidarSpec(range_jitter=cfg.jitter)
    world = cfg.build_world()
    poses = scenes.make_trajectory(world, cfg.waypoints(), cfg.step)
    rng = np.random.default_rng(cfg.seed + 99)
    for i, pose in enumerate(poses):
        cloud = scenes.simulate_scan(world, pose, lidar, rng=rng)
        scenes.write_kitti_scan(out_dir / SCAN_DIR / (f"{i:06d}.bin"), cloud)
    scenes.write_poses(out_dir / POSE_FILE, poses)

    meta = configparser.ConfigParser()
    meta["world"] = {
        "seed": str(cfg.seed), "n_obstacles": str(cfg.n_obstacles),
        "bounds": " ".join(str(v) for v in cfg.bounds), "walls": str(cfg.walls),
    }
    meta["trajectory"] = {
        "half_side": str(cfg.half_side), "laps": str(cfg.laps),
        "step": str(cfg.step), "tail": str(cfg.tail),
    }
    meta["lidar"] = {
        "azimuth_count": str(lidar.azimuth_count),
        "elevation_angles": " ".join(repr(e) for e in lidar.elevation_angles),
        "max_range": str(lidar.max_range), "range_jitter": str(lidar.range_jitter),
    }
    meta["dataset"] = {"frames": str(len(poses)), "lap_frames": str(cfg.lap_frames())}
    with open(out_dir / DATASET_META, "w") as fh:
        meta.write(fh)
    return out_dir


def ingest_dataset(out_dir, scan_paths, pose_file) -> Path:
    """Copy externally supplied KITTI-format scans + poses into the layout."""
    out_dir = Path(out_dir)
    (out_dir / SCAN_DIR).mkdir(parents=True, exist_ok=True)
    poses = [p for _, p in scenes.read_poses(pose_file)]
    scan_paths = sorted(Path(p) for p in scan_paths)
    if len(poses) != len(scan_paths):
        raise DataIntegrityError(
            f"{len(scan_paths)} scans but {len(poses)} poses")
    for i, src in enumerate(scan_paths):
        cloud = scenes.load_kitti_scan(src, frame_id=i)
        scenes.write_kitti_scan(out_dir / SCAN_DIR / f"{i:06d}.bin", cloud)
    scenes.write_poses(out_dir / POSE_FILE, poses)
    meta = configparser.ConfigParser()
    meta["dataset"] = {"frames": str(len(poses)), "lap_frames": "0"}
    with open(out_dir / DATASET_META, "w") as fh:
        meta.write(fh)
    return out_dir


def read_dataset_meta(dataset_dir) -> dict:
    meta = configparser.ConfigParser()
    meta.read(Path(dataset_dir) / DATASET_META)
    out = {}
    for section in meta.sections():
        for key, val in meta[section].items():
            out[f"{section}.{key}"] = val
    return out


def dataset_poses(dataset_dir) -> list[scenes.Pose]:
    return [p for _, p in scenes.read_poses(Path(dataset_dir) / POSE_FILE)]


def build_maps(dataset_dir, out_dir, grid: mapping.GridSpec,
               resolution: float | None = None,
               perturb: scenes.PerturbSpec | None = None) -> list[Path]:
    """Integrate scans sequentially into one growing octree; after each scan,
    crop around the (optionally perturbed) sensor pose and write the
    egocentric top view as frame_%06d.pgm. Mapping always uses true poses;
    perturbation shifts only the projection viewpoint."""
    dataset_dir, out_dir = Path(dataset_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scan_files = sorted((dataset_dir / SCAN_DIR).glob("*.bin"))
    pose_map = dict(scenes.read_poses(dataset_dir / POSE_FILE)) \
        if (dataset_dir / POSE_FILE).exists() else {}
    octree = mapping.OccupancyOctree(resolution=resolution or grid.cell)
    crop_radius = grid.radius * math.sqrt(2.0) + octree.resolution
    rng = np.random.default_rng(perturb.seed) if perturb is not None else None
    written = []
    for i, scan_path in enumerate(scan_files):
        if i not in pose_map:
            raise DataIntegrityError(f"no pose for frame {i} ({scan_path.name})")
        pose = pose_map[i]
        cloud = scenes.load_kitti_scan(scan_path, frame_id=i)
        mapping.integrate_scan(octree, cloud, pose)
        center = pose if perturb is None else scenes.perturb_pose(pose, perturb, rng)
        local = mapping.crop_local(octree, center, crop_radius)
        img = mapping.project_topview(local, grid, center)
        path = out_dir / (FRAME_PATTERN % i)
        mapping.write_pgm(path, img)
        written.append(path)
    return written


def load_map_images(maps_dir) -> np.ndarray:
    """Stack frame_*.pgm files into an (N, H, W) uint8 array, frame order."""
    files = sorted(Path(maps_dir).glob("frame_*.pgm"))
    if not files:
        return np.empty((0, 0, 0), dtype=np.uint8)
    return np.stack([mapping.read_pgm(f) for f in files])


def train_model(images: np.ndarray, config: adv.TrainConfig,
                objective: str = "stable-afl", code_dim: int = 64,
                channels=(16, 32, 64), disc_hidden=(256, 128),
                on_epoch=None) -> tuple[adv.BiGANModel, adv.LossReport]:
    model = adv.build_bigan(image_hw=images.shape[-1], code_dim=code_dim,
                            channels=channels, disc_hidden=disc_hidden,
                            seed=config.seed)
    x = adv.normalize_pixels(images)
    return adv.train(model, x, config, objective=objective, on_epoch=on_epoch)


def encode_maps(images: np.ndarray, mode: str,
                model: adv.BiGANModel | None = None,
                sad_down: int = 2) -> list[adv.LatentCode]:
    """Feature extraction per frame: learned codes for the adversarial modes,
    downsampled patch-normalized vectors for "sad"."""
    if mode == "sad":
        return [adv.LatentCode(values=matching.sad_feature(img, down=sad_down),
                               frame_id=i) for i, img in enumerate(images)]
    if mode in adv.OBJECTIVES:
        if model is None:
            raise ValueError(f"mode {mode!r} needs a trained model")
        return adv.encode_batch(model, images)
    raise ValueError(f"unknown encode mode {mode!r}")


def run_match(ref_codes, test_codes, params: matching.SeqParams,
              metric: str = "code"):
    """difference matrix -> local enhancement -> loop detection."""
    ref = [c.values for c in ref_codes]
    test = [c.values for c in test_codes]
    raw = matching.difference_matrix(ref, test, metric=metric)
    enhanced = matching.enhance_local(raw, params.enhance_window)
    matches = matching.detect_loops(enhanced, params)
    return raw, enhanced, matches


def match_labels_scores(matches, gt: ev.GroundTruth):
    """Per-match detector score and correctness label (matched reference pose
    within d_thresh of the test pose) for ROC/AUC."""
    scores = np.array([m.score for m in matches])
    labels = np.array([gt.match_correct(m.s_star, m.test_index) for m in matches])
    return scores, labels


def run_eval(matches, ref_poses, test_poses, d_thresh: float = 10.0,
             tag: str = "T0_R0", out_dir=None) -> dict:
    """PR curve, recall at full precision, and match-correctness ROC/AUC;
    optionally writes curves, summary JSON-lines, and match CSV."""
    gt = ev.GroundTruth(ref_poses=ref_poses, test_poses=test_poses,
                        d_thresh=d_thresh)
    curve = ev.pr_curve(matches, gt)
    r_at_p1 = ev.recall_at_full_precision(curve)
    scores, labels = match_labels_scores(matches, gt)
    try:
        auc = ev.roc_auc(scores, labels)
        roc = ev.roc_points(scores, labels)
    except ev.UndefinedAUCError:
        auc, roc = None, []
    summary = {"tag": tag, "n_matches": len(matches),
               "recall_at_full_precision": r_at_p1, "auc": auc,
               "d_thresh": d_thresh}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        curves = {f"pr_{tag}": curve}
        if roc:
            curves[f"roc_{tag}"] = roc
        ev.emit_curves(curves, out_dir)
        ev.write_summary(out_dir / f"summary_{tag}.jsonl", [summary])
    return summary


def auc_of_codes(ref_codes, test_codes, ref_poses, test_poses,
                 params: matching.SeqParams, metric: str = "code",
                 d_thresh: float = 10.0) -> float | None:
    """Convenience: match the two code lists and return the AUC (or None when
    every proposed match lands on the same label)."""
    _, _, matches = run_match(ref_codes, test_codes, params, metric=metric)
    gt = ev.GroundTruth(ref_poses=ref_poses, test_poses=test_poses,
                        d_thresh=d_thresh)
    scores, labels = match_labels_scores(matches, gt)
    try:
        return ev.roc_auc(scores, labels)
    except ev.UndefinedAUCError:
        return None
