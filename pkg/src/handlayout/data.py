"""Procedural paired scenes: an object with a graspable handle plus the
ground-truth hand layout, with dataset persistence and instance-held-out
splitting.

Each instance (a reusable object identity) fixes a body shape, fill level,
handle width and handle length; individual scenes vary placement, handle
direction and background noise. The ground-truth layout is constructed so it
is in contact by definition: the palm sits one palm radius outward of the
handle tip, the palm scale is proportional to the handle width, and the
approach direction runs from the nearest frame edge toward the handle.

Grids are quantized to 8 bits at generation time so the PGM round trip is
bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import Layout

__all__ = [
    "GeneratorConfig",
    "SceneSample",
    "DatasetManifest",
    "DatasetError",
    "generate_scene",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "read_sample",
    "load_manifest",
    "save_manifest",
    "split_by_instance",
    "heatmap_for_scene",
    "write_pgm",
    "read_pgm",
]

MANIFEST_MAGIC = "handlayout-dataset v1"
CATEGORIES = ("disk", "roundrect")


class DatasetError(RuntimeError):
    """Missing or corrupt dataset files; the message itemizes offenders."""


@dataclass(frozen=True)
class GeneratorConfig:
    size: int = 32
    n_instances: int = 20
    seed: int = 0
    body_lo: float = 0.26
    body_hi: float = 0.42
    handle_width_lo: float = 0.10
    handle_width_hi: float = 0.22
    handle_len_lo: float = 0.16
    handle_len_hi: float = 0.30
    size_factor: float = 1.15  # palm scale a^2 = size_factor * handle_width
    center_jitter: float = 0.12
    bg_noise: float = 0.10

    def __post_init__(self):
        if self.size < 8:
            raise ValueError("scene grid must be at least 8 pixels")
        if self.n_instances < 1:
            raise ValueError("need at least one instance")


@dataclass(frozen=True)
class SceneSample:
    object_grid: np.ndarray
    object_mask: np.ndarray
    gt_layout: Layout
    instance_id: int
    category: str
    handle_point: np.ndarray
    handle_width: float


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    records: tuple  # (sample_id, instance_id, category, dirname)
    split: str = "all"

    @property
    def count(self) -> int:
        return len(self.records)

    def instance_ids(self) -> list[int]:
        return sorted({r[1] for r in self.records})


def _instance_params(cfg: GeneratorConfig, instance_id: int) -> dict:
    """Shape parameters shared by every scene of one instance."""
    irng = np.random.default_rng([cfg.seed, 0x1157A, instance_id])
    return {
        "category": CATEGORIES[int(irng.integers(len(CATEGORIES)))],
        "body": float(irng.uniform(cfg.body_lo, cfg.body_hi)),
        "aspect": float(irng.uniform(0.6, 1.0)),
        "handle_width": float(irng.uniform(cfg.handle_width_lo, cfg.handle_width_hi)),
        "handle_len": float(irng.uniform(cfg.handle_len_lo, cfg.handle_len_hi)),
        "fill": float(irng.uniform(0.55, 0.95)),
    }


def _roundrect_sdf(px, py, half_x: float, half_y: float, radius: float):
    """Signed distance to a rounded rectangle centered at the origin."""
    qx = np.abs(px) - (half_x - radius)
    qy = np.abs(py) - (half_y - radius)
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return outside + inside - radius


def _body_boundary(category: str, body: float, aspect: float, direction: np.ndarray) -> float:
    """Distance from the body center to its boundary along `direction`."""
    if category == "disk":
        return body
    half_x, half_y = body, body * aspect
    radius = 0.3 * min(half_x, half_y)
    lo, hi = 0.0, 2.0 * max(half_x, half_y)
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        if _roundrect_sdf(mid * direction[0], mid * direction[1], half_x, half_y, radius) <= 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _nearest_edge_direction(point: np.ndarray) -> np.ndarray:
    """Unit vector from the nearest frame edge toward `point`."""
    px, py = float(point[0]), float(point[1])
    dists = (1.0 + px, 1.0 - px, 1.0 + py, 1.0 - py)  # left, right, top, bottom
    edge = int(np.argmin(dists))
    vec = {
        0: np.array([px + 1.0, 0.0]),
        1: np.array([px - 1.0, 0.0]),
        2: np.array([0.0, py + 1.0]),
        3: np.array([0.0, py - 1.0]),
    }[edge]
    n = np.linalg.norm(vec)
    if n < 1e-9:  # handle tip exactly on an edge: approach straight inward
        vec = np.array([(-1.0, 1.0, 0.0, 0.0)[edge], (0.0, 0.0, -1.0, 1.0)[edge]])
        n = 1.0
    return vec / n


def generate_scene(rng, cfg: GeneratorConfig, instance_id: int | None = None) -> SceneSample:
    """One paired sample; pure function of (rng state, cfg, instance_id)."""
    if instance_id is None:
        instance_id = int(rng.integers(cfg.n_instances))
    inst = _instance_params(cfg, instance_id)

    center = rng.uniform(-cfg.center_jitter, cfg.center_jitter, 2)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    outward = np.array([math.cos(theta), math.sin(theta)])

    t_boundary = _body_boundary(inst["category"], inst["body"], inst["aspect"], outward)
    base = center + t_boundary * outward
    tip = base + inst["handle_len"] * outward

    size = cfg.size
    coords = (2.0 * np.arange(size) + 1.0) / size - 1.0
    gx, gy = np.meshgrid(coords, coords)  # gx: x per column, gy: y per row

    if inst["category"] == "disk":
        body_mask = (gx - center[0]) ** 2 + (gy - center[1]) ** 2 <= inst["body"] ** 2
    else:
        half_x, half_y = inst["body"], inst["body"] * inst["aspect"]
        radius = 0.3 * min(half_x, half_y)
        body_mask = _roundrect_sdf(gx - center[0], gy - center[1], half_x, half_y, radius) <= 0.0

    # capsule from the body boundary to the handle tip
    seg = tip - base
    seg_len2 = float(seg @ seg)
    tproj = np.clip(((gx - base[0]) * seg[0] + (gy - base[1]) * seg[1]) / seg_len2, 0.0, 1.0)
    qx = base[0] + tproj * seg[0]
    qy = base[1] + tproj * seg[1]
    handle_mask = (gx - qx) ** 2 + (gy - qy) ** 2 <= (inst["handle_width"] / 2.0) ** 2
    mask = body_mask | handle_mask

    grid = rng.uniform(0.0, cfg.bg_noise, (size, size))
    speckle = rng.normal(0.0, 0.03, (size, size))
    grid = np.where(mask, inst["fill"] + speckle, grid)
    grid = np.clip(grid, 0.0, 1.0)
    grid = np.round(grid * 255.0) / 255.0  # 8-bit levels: PGM round trip is exact

    approach = _nearest_edge_direction(tip)
    scale = cfg.size_factor * inst["handle_width"]
    palm = tip - scale * approach
    palm = np.clip(palm, -1.5, 1.5)
    gt = Layout(math.sqrt(scale), float(palm[0]), float(palm[1]), float(approach[0]), float(approach[1]))

    return SceneSample(
        object_grid=grid,
        object_mask=mask,
        gt_layout=gt,
        instance_id=instance_id,
        category=inst["category"],
        handle_point=tip.astype(np.float64),
        handle_width=inst["handle_width"],
    )


def generate_dataset(cfg: GeneratorConfig, n_scenes: int, seed: int) -> list[SceneSample]:
    """n_scenes samples cycling through instances, each from a derived stream."""
    out = []
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, 0x5CE4E, i])
        out.append(generate_scene(rng, cfg, instance_id=i % cfg.n_instances))
    return out


# ---------------------------------------------------------------------------
# persistence


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM (P5)."""
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        raise ValueError("write_pgm expects uint8 values")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise DatasetError(f"{path}: not an 8-bit P5 PGM")
    try:
        w, h = (int(v) for v in parts[1].split())
    except ValueError as exc:
        raise DatasetError(f"{path}: bad PGM dimensions") from exc
    body = parts[3]
    if len(body) < w * h:
        raise DatasetError(f"{path}: truncated pixel data ({len(body)} of {w * h} bytes)")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).copy()


def _sample_dir(root: Path, sample_id: int) -> Path:
    return root / f"s{sample_id:05d}"


def write_dataset(samples, root) -> DatasetManifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for sid, s in enumerate(samples):
        d = _sample_dir(root, sid)
        d.mkdir(exist_ok=True)
        write_pgm(d / "object.pgm", np.round(s.object_grid * 255.0).astype(np.uint8))
        write_pgm(d / "objmask.pgm", np.where(s.object_mask, 255, 0).astype(np.uint8))
        lines = [
            s.gt_layout.to_line(),
            f"instance_id {s.instance_id}",
            f"category {s.category}",
            f"handle_point {s.handle_point[0]:.12g} {s.handle_point[1]:.12g}",
            f"handle_width {s.handle_width:.12g}",
        ]
        (d / "layout.txt").write_text("\n".join(lines) + "\n")
        records.append((sid, s.instance_id, s.category, d.name))
    manifest = DatasetManifest(root=root, records=tuple(records), split="all")
    save_manifest(manifest, root / "manifest.txt")
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    lines = [MANIFEST_MAGIC, f"count {manifest.count}", f"split {manifest.split}"]
    for sid, iid, cat, name in manifest.records:
        lines.append(f"record {sid} {iid} {cat} {name}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(root, name: str = "manifest.txt") -> DatasetManifest:
    root = Path(root)
    path = root / name
    if not path.exists():
        raise DatasetError(f"missing manifest {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise DatasetError(f"{path}: unrecognized manifest header")
    count = int(lines[1].split()[1])
    split = lines[2].split()[1]
    records = []
    for line in lines[3:]:
        if not line.strip():
            continue
        _, sid, iid, cat, dirname = line.split()
        records.append((int(sid), int(iid), cat, dirname))
    if len(records) != count:
        raise DatasetError(f"{path}: declares {count} records but lists {len(records)}")
    ids = [r[0] for r in records]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{path}: duplicate sample ids")
    return DatasetManifest(root=root, records=tuple(records), split=split)


def read_sample(sample_dir) -> SceneSample:
    d = Path(sample_dir)
    grid = read_pgm(d / "object.pgm").astype(np.float64) / 255.0
    mask = read_pgm(d / "objmask.pgm") > 0
    lines = (d / "layout.txt").read_text().splitlines()
    gt = Layout.from_line(lines[0])
    meta = {}
    for line in lines[1:]:
        key, *vals = line.split()
        meta[key] = vals
    return SceneSample(
        object_grid=grid,
        object_mask=mask,
        gt_layout=gt,
        instance_id=int(meta["instance_id"][0]),
        category=meta["category"][0],
        handle_point=np.array([float(v) for v in meta["handle_point"]]),
        handle_width=float(meta["handle_width"][0]),
    )


def read_dataset(root, manifest_name: str = "manifest.txt") -> list[SceneSample]:
    manifest = load_manifest(root, manifest_name)
    samples, problems = [], []
    for sid, iid, cat, dirname in manifest.records:
        d = manifest.root / dirname
        try:
            s = read_sample(d)
            if s.instance_id != iid or s.category != cat:
                problems.append(f"sample {sid}: metadata disagrees with manifest")
            samples.append(s)
        except (OSError, DatasetError, ValueError, KeyError, IndexError) as exc:
            problems.append(f"sample {sid}: {exc}")
    if problems:
        raise DatasetError("dataset read failed:\n  " + "\n  ".join(problems))
    return samples


def split_by_instance(manifest: DatasetManifest, held_out: int, rng):
    """Disjoint (train, test) manifests; test holds exactly `held_out` instances."""
    ids = manifest.instance_ids()
    if held_out >= len(ids):
        raise ValueError(f"cannot hold out {held_out} of {len(ids)} instances")
    test_ids = set(rng.choice(ids, size=held_out, replace=False).tolist()) if held_out else set()
    train = tuple(r for r in manifest.records if r[1] not in test_ids)
    test = tuple(r for r in manifest.records if r[1] in test_ids)
    return (
        replace(manifest, records=train, split="train"),
        replace(manifest, records=test, split="test"),
    )


def heatmap_for_scene(sample: SceneSample, sigma: float) -> np.ndarray:
    """Normalized Gaussian contact bump centered at the handle point."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    size = sample.object_grid.shape[0]
    coords = (2.0 * np.arange(size) + 1.0) / size - 1.0
    gx, gy = np.meshgrid(coords, coords)
    hx, hy = sample.handle_point
    g = np.exp(-((gx - hx) ** 2 + (gy - hy) ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()
