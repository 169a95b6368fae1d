"""Synthetic multi-instance dataset: random geometric shapes (disc, rectangle,
triangle, ring) over textured backgrounds, with occlusion, plus the on-disk
PNG + JSON-manifest format shared by the trainer, harness and service."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

FORMAT_VERSION = 1
SHAPE_KINDS = ("disc", "rectangle", "triangle", "ring")


class GenerationError(RuntimeError):
    pass


class DatasetError(IOError):
    pass


@dataclass
class GenParams:
    size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    shapes: tuple = SHAPE_KINDS
    occlusion: bool = True
    min_area_fraction: float = 0.005
    max_retries: int = 100

    def to_json(self):
        d = dict(self.__dict__)
        d["shapes"] = list(self.shapes)
        return d

    @classmethod
    def from_json(cls, data):
        data = dict(data)
        data["shapes"] = tuple(data.get("shapes", SHAPE_KINDS))
        return cls(**data)


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    labels: np.ndarray  # (H, W) int32, 0 = background, objects 1..n
    objects: list = field(default_factory=list)  # {"id", "shape", "area_fraction"}

    @property
    def n_objects(self) -> int:
        return len(self.objects)


class Dataset:
    def __init__(self, samples, params=None, seed=None):
        self.samples = list(samples)
        self.params = params
        self.seed = seed

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)


# ---------------------------------------------------------------------------
# shape rasterization


def _coords(size):
    return np.mgrid[0:size, 0:size]


def _disc(rng, size, area):
    r = np.sqrt(area / np.pi)
    cy, cx = rng.uniform(r * 0.7, size - r * 0.7, size=2)
    yy, xx = _coords(size)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _ring(rng, size, area):
    # annulus with inner radius a fraction of the outer
    frac = rng.uniform(0.35, 0.6)
    r_out = np.sqrt(area / (np.pi * (1 - frac**2)))
    r_in = frac * r_out
    cy, cx = rng.uniform(r_out * 0.7, size - r_out * 0.7, size=2)
    yy, xx = _coords(size)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return (d2 <= r_out * r_out) & (d2 > r_in * r_in)


def _rectangle(rng, size, area):
    aspect = rng.uniform(0.4, 2.5)
    hh = np.sqrt(area / aspect) / 2
    hw = hh * aspect
    cy, cx = rng.uniform(max(hh, hw), size - max(hh, hw), size=2)
    theta = rng.uniform(0, np.pi)
    yy, xx = _coords(size)
    u = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
    v = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
    return (np.abs(u) <= hh) & (np.abs(v) <= hw)


def _triangle(rng, size, area):
    # three vertices spread around a center; area control is approximate
    r = np.sqrt(area / 1.3)
    cy, cx = rng.uniform(r, size - r, size=2)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=3))
    radii = rng.uniform(0.7 * r, 1.3 * r, size=3)
    pts = np.stack([cy + radii * np.sin(angles), cx + radii * np.cos(angles)], axis=1)
    yy, xx = _coords(size)
    inside = np.ones((size, size), dtype=bool)
    for i in range(3):
        y0, x0 = pts[i]
        y1, x1 = pts[(i + 1) % 3]
        yk, xk = pts[(i + 2) % 3]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        side = (x1 - x0) * (yk - y0) - (y1 - y0) * (xk - x0)
        inside &= cross * side >= 0
    return inside


_RASTERIZERS = {
    "disc": _disc,
    "rectangle": _rectangle,
    "triangle": _triangle,
    "ring": _ring,
}


def _background(rng, size):
    """Low-frequency color noise: a coarse random grid upsampled bilinearly."""
    base = rng.uniform(40, 180, size=3)
    coarse = rng.uniform(-35, 35, size=(3, 6, 6))
    img = np.stack([_upsample_channel(coarse[c], size) for c in range(3)])
    img = base[:, None, None] + img + rng.normal(0, 4, size=(3, size, size))
    return np.clip(img, 0, 255).transpose(1, 2, 0)


def _upsample_channel(grid, size):
    src = np.linspace(0, grid.shape[0] - 1, size)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, grid.shape[0] - 1)
    t = src - lo
    rows = grid[lo][:, lo] * (1 - t) + grid[lo][:, hi] * t
    return rows * (1 - t[:, None]) + (grid[hi][:, lo] * (1 - t) + grid[hi][:, hi] * t) * t[:, None]


def _object_color(rng, bg_mean):
    for _ in range(20):
        color = rng.uniform(20, 235, size=3)
        if np.abs(color - bg_mean).sum() > 120:
            return color
    return color


def generate_sample(seed_key, params: GenParams) -> Sample:
    rng = np.random.default_rng(seed_key)
    size = params.size
    min_area = params.min_area_fraction * size * size
    for _ in range(params.max_retries):
        n = int(rng.integers(params.min_objects, params.max_objects + 1))
        labels = np.zeros((size, size), dtype=np.int32)
        kinds = []
        ok = True
        for oid in range(1, n + 1):
            kind = str(rng.choice(list(params.shapes)))
            area = size * size * np.exp(rng.uniform(np.log(0.02), np.log(0.15)))
            mask = _RASTERIZERS[kind](rng, size, area)
            if not params.occlusion and (labels[mask] > 0).any():
                ok = False
                break
            # later shapes occlude earlier ones
            labels[mask] = oid
            kinds.append(kind)
        if not ok:
            continue
        areas = [int((labels == oid).sum()) for oid in range(1, n + 1)]
        if any(a < min_area for a in areas):
            continue

        bg = _background(rng, size)
        img = bg.copy()
        for oid in range(1, n + 1):
            color = _object_color(rng, bg.mean(axis=(0, 1)))
            jitter = rng.normal(0, 6, size=(size, size, 3))
            m = labels == oid
            img[m] = np.clip(color[None, :] + jitter[m], 0, 255)
        objects = [
            {"id": oid, "shape": kinds[oid - 1], "area_fraction": areas[oid - 1] / (size * size)}
            for oid in range(1, n + 1)
        ]
        return Sample(img.astype(np.uint8), labels, objects)
    raise GenerationError(
        f"could not satisfy constraints after {params.max_retries} retries "
        f"(min_area_fraction={params.min_area_fraction}, occlusion={params.occlusion})"
    )


def generate(seed: int, count: int, params: GenParams | None = None) -> Dataset:
    """Deterministic in (seed, params); each sample derives its own stream
    from (seed, index), so generation can be sharded."""
    params = params or GenParams()
    samples = [generate_sample([seed, i], params) for i in range(count)]
    return Dataset(samples, params=params, seed=seed)


# ---------------------------------------------------------------------------
# on-disk format


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save(dataset: Dataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for i, sample in enumerate(dataset):
        stem = f"{i:05d}"
        img_name, gt_name = f"{stem}_img.png", f"{stem}_gt.png"
        Image.fromarray(sample.image, mode="RGB").save(root / img_name)
        if sample.labels.max() > np.iinfo(np.uint16).max:
            raise DatasetError(f"sample {i}: label ids overflow 16-bit storage")
        Image.fromarray(sample.labels.astype(np.uint16)).save(root / gt_name)
        records.append(
            {
                "image": img_name,
                "labels": gt_name,
                "objects": sample.objects,
                "sha256": {img_name: _sha256(root / img_name), gt_name: _sha256(root / gt_name)},
            }
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "params": dataset.params.to_json() if isinstance(dataset.params, GenParams) else dataset.params,
        "seed": dataset.seed,
        "samples": records,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load(path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt manifest {manifest_path}: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported format_version {manifest.get('format_version')}")
    samples = []
    for rec in manifest["samples"]:
        for name, want in rec.get("sha256", {}).items():
            fp = root / name
            if not fp.exists():
                raise DatasetError(f"missing file {fp}")
            if _sha256(fp) != want:
                raise DatasetError(f"checksum mismatch for {fp}")
        image = np.asarray(Image.open(root / rec["image"]).convert("RGB"))
        labels = np.asarray(Image.open(root / rec["labels"])).astype(np.int32)
        n = len(rec["objects"])
        present = set(np.unique(labels)) - {0}
        if present != set(range(1, n + 1)):
            raise DatasetError(
                f"{rec['labels']}: labels {sorted(present)} are not contiguous 1..{n}"
            )
        samples.append(Sample(image, labels, rec["objects"]))
    params = manifest.get("params")
    try:
        params = GenParams.from_json(params) if params else None
    except TypeError:
        pass  # externally imported datasets may carry foreign params
    return Dataset(samples, params=params, seed=manifest.get("seed"))


def import_pairs(pairs, out_path) -> Dataset:
    """Bring externally produced (image.png, labels.png) pairs into the
    native format. Labels must be single-channel with ids 0..n."""
    samples = []
    for img_path, gt_path in pairs:
        image = np.asarray(Image.open(img_path).convert("RGB"))
        labels = np.asarray(Image.open(gt_path)).astype(np.int32)
        if labels.ndim != 2:
            raise DatasetError(f"{gt_path}: expected single-channel label map")
        if labels.shape != image.shape[:2]:
            raise DatasetError(f"{gt_path}: label shape {labels.shape} != image {image.shape[:2]}")
        ids = sorted(set(np.unique(labels)) - {0})
        if ids != list(range(1, len(ids) + 1)):
            raise DatasetError(f"{gt_path}: label ids {ids} not contiguous from 1")
        size = labels.size
        objects = [
            {"id": int(i), "shape": "imported", "area_fraction": float((labels == i).sum() / size)}
            for i in ids
        ]
        samples.append(Sample(image, labels, objects))
    ds = Dataset(samples, params={"imported": True})
    save(ds, out_path)
    return ds
