"""Perturbation-based sample generation, augmentation, and dataset files.

A sample is rendered by projecting a LiDAR scan through the de-calibrated
extrinsic ``from_euler(label, LABEL_AXES) @ t_init`` where ``t_init`` is the
true LiDAR-to-camera transform; the label is the perturbation to be regressed.
Removing the perturbation (``inv(from_euler(label, LABEL_AXES)) @ decalibrated``)
gives back ``t_init``.

Label translations live in the camera's optical frame (x right, y down, z
forward). Label angles are measured about vehicle-style axes through the camera
(roll about the viewing direction, pitch about the horizontal image axis, yaw
about the vertical one), so pitch moves the image vertically and yaw moves it
horizontally. ``LABEL_AXES`` carries that change of axes.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import sensor
from .errors import ConfigError, DataError, DegeneracyError
from .fileio import atomic_write_bytes, atomic_write_text
from .geometry import (
    EulerPerturbation,
    PerturbRange,
    RigidTransform,
    compose,
    from_euler,
    invert,
    sample_perturbation,
    to_euler,
)
from .scene import (
    LIDAR_TO_OPTICAL,
    CameraRig,
    LidarSpec,
    World,
    camera_pose,
    default_intrinsics,
    default_rig,
    generate_world,
    lidar_scan,
    render_intensity,
    sample_vehicle_pose,
)
from .sensor import DepthMap, Intrinsics, PointCloud

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MIN_VALID_PIXELS = 50
MAX_RESAMPLES = 10
SPLITS = ("train", "val", "test")
LABEL_AXES = LIDAR_TO_OPTICAL.T


@dataclass(frozen=True, eq=False)
class CalibSample:
    depth: DepthMap
    label: EulerPerturbation
    camera_id: str
    t_init: RigidTransform
    seed: int
    intensity: np.ndarray | None = None
    world_seed: int | None = None

    @property
    def decalibrated(self) -> RigidTransform:
        return compose(from_euler(self.label, LABEL_AXES), self.t_init)


@dataclass(frozen=True, eq=False)
class RenderedView:
    """Samples of several cameras sharing one scan and one perturbation."""

    samples: dict
    cloud: PointCloud
    lidar_pose: RigidTransform


def derive_seed(*keys) -> int:
    """Stable 63-bit seed from a tuple of ints/strings."""
    words = []
    for k in keys:
        if isinstance(k, str):
            words.extend(k.encode("utf-8"))
        else:
            words.append(int(k) & 0xFFFFFFFF)
            words.append((int(k) >> 32) & 0xFFFFFFFF)
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def render_views(w: World, rig: CameraRig, camera_ids, spec: LidarSpec, prange: PerturbRange,
                 seed: int, with_intensity=False) -> RenderedView:
    """Draw a vehicle pose and one perturbation, render every requested camera.

    ``with_intensity`` is a bool or the subset of camera ids that also get an
    intensity raster. Rejects draws where any camera has fewer than
    ``MIN_VALID_PIXELS`` depth returns and retries up to ``MAX_RESAMPLES`` times.
    """
    cams = [rig[c] for c in camera_ids]
    if isinstance(with_intensity, bool):
        shaded = set(camera_ids) if with_intensity else set()
    else:
        shaded = set(with_intensity)
    rng = np.random.default_rng(seed)
    for attempt in range(MAX_RESAMPLES + 1):
        pose = sample_vehicle_pose(rng)
        delta = sample_perturbation(prange, rng)
        cloud = lidar_scan(w, pose, spec)
        dt = from_euler(delta, LABEL_AXES)
        samples = {}
        for cam in cams:
            depth = sensor.project(cloud, compose(dt, cam.t_lidar_to_cam), cam.intrinsics)
            if depth.n_valid < MIN_VALID_PIXELS:
                break
            img = None
            if cam.id in shaded:
                img = render_intensity(w, camera_pose(pose, cam.t_lidar_to_cam), cam.intrinsics)
            samples[cam.id] = CalibSample(depth, delta, cam.id, cam.t_lidar_to_cam, int(seed), img, w.seed)
        else:
            return RenderedView(samples, cloud, pose)
        log.debug("seed %d attempt %d: degenerate sample, resampling", seed, attempt)
    raise DegeneracyError(
        f"seed {seed}: fewer than {MIN_VALID_PIXELS} valid depth pixels after {MAX_RESAMPLES} resamples"
    )


def make_sample(w: World, rig: CameraRig, camera_id: str, spec: LidarSpec, prange: PerturbRange,
                seed: int, with_intensity: bool = False) -> CalibSample:
    return render_views(w, rig, [camera_id], spec, prange, seed, with_intensity).samples[camera_id]


def regenerate_labels(samples, t_rel: RigidTransform):
    """Relabel samples for a model that was trained through another camera.

    ``t_rel`` maps the training camera's frame into the sample camera's frame.
    The new label is ``from_euler(label) @ t_rel`` (angles about ``LABEL_AXES``),
    i.e. the perturbation a training-camera model sees, and ``t_init`` moves to ``inv(t_rel) @ t_init``
    so removing the new label still reproduces ``t_init``.
    """
    out = []
    inv_rel = invert(t_rel)
    for s in samples:
        new = to_euler(compose(from_euler(s.label, LABEL_AXES), t_rel), axes=LABEL_AXES)
        out.append(replace(s, label=new, t_init=compose(inv_rel, s.t_init)))
    return out


def regenerate_label_vectors(labels: np.ndarray, t_rel: RigidTransform) -> np.ndarray:
    """``regenerate_labels`` on an ``(n, 6)`` array of label vectors."""
    rows = [
        to_euler(compose(from_euler(EulerPerturbation.from_vector(v), LABEL_AXES), t_rel), axes=LABEL_AXES).as_vector()
        for v in np.asarray(labels, dtype=np.float64).reshape(-1, 6)
    ]
    return np.array(rows).reshape(-1, 6)


def augment_crop(sample: CalibSample, mode: str, max_frac: float, rng: np.random.Generator) -> CalibSample:
    """Random crop along rows/cols, then nearest-neighbour resize back to the input size.

    Intrinsics follow both edits; the label is untouched.
    """
    if mode not in ("vertical", "horizontal", "both"):
        raise ConfigError(f"unknown crop mode {mode!r}")
    if not 0 <= max_frac < 0.5:
        raise ConfigError(f"max_frac must be in (0, 0.5), got {max_frac}")
    h, w = sample.depth.shape
    fy, fx = rng.uniform(0.0, max_frac, size=2)
    ch = h - int(round(fy * h)) if mode in ("vertical", "both") else h
    cw = w - int(round(fx * w)) if mode in ("horizontal", "both") else w
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    depth = sensor.resize(sensor.crop(sample.depth, x0, y0, cw, ch), h, w)
    img = None
    if sample.intensity is not None:
        img = sensor.resize_nearest(sensor.crop_raster(sample.intensity, x0, y0, cw, ch), h, w)
    return replace(sample, depth=depth, intensity=img)


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetConfig:
    seed: int = 0
    counts: dict = field(default_factory=lambda: {"train": 2000, "val": 0, "test": 500})
    worlds: dict = field(default_factory=lambda: {"train": 30, "val": 0, "test": 10})
    n_boxes: int = 80
    extent: float = 15.0
    forward_extent: float = 60.0
    lane_half_width: float = 4.0
    max_translation: float = 0.5
    max_rotation: float = 5.0
    baseline: float = 0.54
    height: int = 160
    width: int = 512
    camera_mix: dict = field(default_factory=lambda: {"left": 1.0})
    with_intensity: bool = False
    lidar: dict = field(default_factory=lambda: asdict(LidarSpec()))

    def __post_init__(self):
        for split in list(self.counts) + list(self.worlds):
            if split not in SPLITS:
                raise ConfigError(f"unknown split {split!r}")
        for split in SPLITS:
            self.counts.setdefault(split, 0)
            self.worlds.setdefault(split, 0)
            if self.counts[split] < 0:
                raise ConfigError(f"negative sample count for {split}")
            if self.counts[split] > 0 and self.worlds[split] < 1:
                raise ConfigError(f"split {split} has samples but no worlds")
        if not self.camera_mix or min(self.camera_mix.values()) < 0 or sum(self.camera_mix.values()) <= 0:
            raise ConfigError(f"invalid camera_mix {self.camera_mix}")
        self.lidar = dict(self.lidar)
        self.lidar["vertical_fov"] = tuple(self.lidar["vertical_fov"])

    @property
    def perturb_range(self) -> PerturbRange:
        return PerturbRange(self.max_translation, self.max_rotation)

    @property
    def lidar_spec(self) -> LidarSpec:
        return LidarSpec(**self.lidar)

    def rig(self) -> CameraRig:
        return default_rig(self.baseline, default_intrinsics(self.height, self.width))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lidar"]["vertical_fov"] = list(d["lidar"]["vertical_fov"])
        return d


def world_seeds(cfg: DatasetConfig) -> dict:
    """Per-split world seeds; consecutive integers so splits never share a world."""
    base = derive_seed(cfg.seed, "worlds") % (1 << 40)
    out, nxt = {}, base
    for split in SPLITS:
        out[split] = list(range(nxt, nxt + cfg.worlds[split]))
        nxt += cfg.worlds[split]
    return out


def sample_plan(cfg: DatasetConfig, split: str):
    """``(world_seed, camera_id, sample_seed)`` for every sample of a split."""
    n = cfg.counts[split]
    if n == 0:
        return []
    seeds = world_seeds(cfg)[split]
    ids = sorted(cfg.camera_mix)
    p = np.array([cfg.camera_mix[i] for i in ids], dtype=np.float64)
    rng = np.random.default_rng(derive_seed(cfg.seed, "cameras", split))
    cams = rng.choice(len(ids), size=n, p=p / p.sum())
    return [
        (seeds[i % len(seeds)], ids[int(cams[i])], derive_seed(cfg.seed, split, i))
        for i in range(n)
    ]


def make_world(cfg: DatasetConfig, world_seed: int) -> World:
    return generate_world(cfg.n_boxes, cfg.extent, world_seed, lane_half_width=cfg.lane_half_width,
                          forward_extent=cfg.forward_extent)


def generate_split(cfg: DatasetConfig, split: str, threads: int = 1):
    rig, spec, prange = cfg.rig(), cfg.lidar_spec, cfg.perturb_range
    plan = sample_plan(cfg, split)
    worlds = {ws: make_world(cfg, ws) for ws in sorted({p[0] for p in plan})}

    def one(item):
        ws, cam, seed = item
        return make_sample(worlds[ws], rig, cam, spec, prange, seed, cfg.with_intensity)

    return run_parallel(one, plan, threads)


def run_parallel(fn, items, threads: int = 1):
    """Ordered map; result order and values do not depend on ``threads``."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


@dataclass
class DatasetManifest:
    header: dict
    records: list
    root: Path

    @property
    def version(self) -> int:
        return self.header["version"]

    def split(self, name: str) -> list:
        return [r for r in self.records if r["split"] == name]


def _sample_record(s: CalibSample, split: str, index: int, path: str, ipath: str | None) -> dict:
    return {
        "record": "sample",
        "split": split,
        "index": index,
        "path": path,
        "intensity_path": ipath,
        "camera_id": s.camera_id,
        "label": s.label.to_dict(),
        "intrinsics": s.depth.intrinsics.to_dict(),
        "t_init": s.t_init.matrix[:3].ravel().tolist(),
        "seed": s.seed,
        "world_seed": s.world_seed,
    }


def build_dataset(cfg: DatasetConfig, out_dir, threads: int = 1) -> DatasetManifest:
    """Render all splits, write DPR1 rasters and ``manifest.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    header = {
        "record": "header",
        "version": MANIFEST_VERSION,
        "config": cfg.to_dict(),
        "rig": cfg.rig().to_dict(),
        "perturb_range": asdict(cfg.perturb_range),
        "camera_mix": cfg.camera_mix,
        "pixel_rounding": sensor.PIXEL_ROUNDING,
        "label_axes": LABEL_AXES.ravel().tolist(),
        "world_seeds": world_seeds(cfg),
        "counts": {s: cfg.counts[s] for s in SPLITS},
    }
    records = []
    for split in SPLITS:
        samples = generate_split(cfg, split, threads)
        for i, s in enumerate(samples):
            rel = f"rasters/{split}_{i:06d}_depth.dpr"
            atomic_write_bytes(out_dir / rel, sensor.raster_bytes(s.depth.data))
            irel = None
            if s.intensity is not None:
                irel = f"rasters/{split}_{i:06d}_intensity.dpr"
                atomic_write_bytes(out_dir / irel, sensor.raster_bytes(s.intensity))
            records.append(_sample_record(s, split, i, rel, irel))
        log.info("split %s: %d samples", split, len(samples))
    lines = [json.dumps(header, sort_keys=True)] + [json.dumps(r, sort_keys=True) for r in records]
    atomic_write_text(out_dir / "manifest.jsonl", "\n".join(lines) + "\n")
    return DatasetManifest(header, records, out_dir)


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    try:
        rows = [json.loads(line) for line in lines if line.strip()]
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not rows or rows[0].get("record") != "header":
        raise DataError(f"{path}: missing header record")
    header, records = rows[0], rows[1:]
    if header.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {header.get('version')}")
    ws = header.get("world_seeds", {})
    seen = {}
    for split, seeds in ws.items():
        for s in seeds:
            if s in seen and seen[s] != split:
                raise DataError(f"{path}: world seed {s} shared by splits {seen[s]} and {split}")
            seen[s] = split
    man = DatasetManifest(header, records, path.parent)
    if check_files:
        for r in records:
            for key in ("path", "intensity_path"):
                if r.get(key):
                    sensor.read_raster(man.root / r[key])
    return man


def load_sample(man: DatasetManifest, record: dict) -> CalibSample:
    k = Intrinsics.from_dict(record["intrinsics"])
    depth = DepthMap(sensor.read_raster(man.root / record["path"]), k)
    img = None
    if record.get("intensity_path"):
        img = sensor.read_raster(man.root / record["intensity_path"])
    t_init = RigidTransform.from_matrix(np.asarray(record["t_init"]).reshape(3, 4))
    return CalibSample(depth, EulerPerturbation(**record["label"]), record["camera_id"], t_init,
                       int(record["seed"]), img, record.get("world_seed"))


def load_samples(man: DatasetManifest, split: str) -> list:
    return [load_sample(man, r) for r in man.split(split)]
