"""Synthetic head phantoms with exact brain/skull masks and injectable pathologies.

A phantom is a bright elliptical skull ring around a textured brain ellipse
on a noisy dark background.  Pathological renderings keep the geometry and
the ground-truth masks and only overwrite intensities: tumours and lesions
inside the head still count as brain.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pnm

FORMAT_VERSION = 1
PATHOLOGY_KINDS = ("tumor", "lesion", "skull_damage", "membrane")


@dataclass(frozen=True)
class PhantomSpec:
    """Concrete phantom geometry; lengths are fractions of ``size`` unless noted."""

    size: int = 64
    center: tuple[float, float] = (0.5, 0.5)
    semi_axes: tuple[float, float] = (0.34, 0.28)
    angle: float = 0.0
    skull_thickness: float = 4.0  # pixels
    brain_intensity: float = 0.5
    texture_amplitude: float = 0.08
    noise_sigma: float = 0.03
    skull_intensity: float = 0.85

    def pixel_geometry(self, scale: float = 1.0) -> tuple[float, float, float, float]:
        """(cy, cx, ay, ax) in pixels; ``scale`` shrinks the brain axes (volume slices)."""
        return (self.center[0] * self.size, self.center[1] * self.size,
                self.semi_axes[0] * self.size * scale, self.semi_axes[1] * self.size * scale)

    def validate(self):
        cy, cx, ay, ax = self.pixel_geometry()
        if ay <= 0 or ax <= 0 or self.skull_thickness <= 0:
            raise ValueError(f"degenerate ellipse: {self}")
        reach = max(ay, ax) + self.skull_thickness
        if min(cy, cx) - reach < 0 or max(cy, cx) + reach > self.size - 1:
            raise ValueError(f"head does not fit in a {self.size}px image: {self}")
        if not 0 <= self.brain_intensity <= 1 or not 0 <= self.skull_intensity <= 1:
            raise ValueError("intensities must lie in [0, 1]")


@dataclass(frozen=True)
class PhantomRanges:
    """Uniform sampling ranges used to draw a :class:`PhantomSpec` per sample."""

    size: int = 64
    center_jitter: float = 0.04
    semi_axis_y: tuple[float, float] = (0.28, 0.36)
    semi_axis_x: tuple[float, float] = (0.22, 0.30)
    angle: tuple[float, float] = (-0.5, 0.5)
    skull_thickness: tuple[float, float] = (2.5, 5.0)
    brain_intensity: tuple[float, float] = (0.42, 0.58)
    texture_amplitude: tuple[float, float] = (0.04, 0.10)
    noise_sigma: float = 0.03
    skull_intensity: tuple[float, float] = (0.75, 0.95)

    def sample(self, rng: np.random.Generator) -> PhantomSpec:
        u = lambda r: float(rng.uniform(*r))  # noqa: E731
        j = self.center_jitter
        return PhantomSpec(
            size=self.size,
            center=(0.5 + float(rng.uniform(-j, j)), 0.5 + float(rng.uniform(-j, j))),
            semi_axes=(u(self.semi_axis_y), u(self.semi_axis_x)),
            angle=u(self.angle),
            skull_thickness=u(self.skull_thickness),
            brain_intensity=u(self.brain_intensity),
            texture_amplitude=u(self.texture_amplitude),
            noise_sigma=self.noise_sigma,
            skull_intensity=u(self.skull_intensity),
        )


@dataclass
class LabeledSample:
    image: np.ndarray        # float32 [H,W] (or [D,H,W]) in [0,1], 8-bit quantized
    brain_mask: np.ndarray   # uint8 {0,1}
    skull_mask: np.ndarray | None = None
    spec: PhantomSpec | None = None
    pathologies: list[Pathology] = field(default_factory=list)


@dataclass(frozen=True)
class Pathology:
    kind: str
    center: tuple[float, float]   # pixels (row, col); for skull_damage/membrane the arc's angular center is used
    radius: float                 # pixels; arc half-width in radians for skull_damage/membrane
    mean: float
    sigma: float
    placement: str = "interior"   # interior | boundary

    def to_dict(self) -> dict:
        return asdict(self)


def quantize(image: np.ndarray) -> np.ndarray:
    return (pnm.to_uint8(image).astype(np.float32) / np.float32(255.0))


def ellipse_mask(size: int, cy: float, cx: float, ay: float, ax: float, angle: float) -> np.ndarray:
    """Pixels (row, col) whose integer coordinates fall inside the rotated ellipse."""
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = r - cy, c - cx
    u = dx * math.cos(angle) + dy * math.sin(angle)
    v = -dx * math.sin(angle) + dy * math.cos(angle)
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _texture(spec: PhantomSpec, rng: np.random.Generator, z: float = 0.0) -> np.ndarray:
    size = spec.size
    r, c = np.mgrid[0:size, 0:size].astype(np.float64) / size
    out = np.zeros((size, size))
    for _ in range(3):
        k = rng.uniform(1.0, 3.0, size=3) * 2 * math.pi * rng.choice([-1.0, 1.0], size=3)
        out += np.sin(k[0] * r + k[1] * c + k[2] * z + rng.uniform(0, 2 * math.pi))
    return out / 3.0


def _render(spec: PhantomSpec, texture: np.ndarray, noise_rng: np.random.Generator, scale: float = 1.0):
    cy, cx, ay, ax = spec.pixel_geometry(scale)
    t = spec.skull_thickness
    brain = ellipse_mask(spec.size, cy, cx, ay, ax, spec.angle) if scale > 0 else np.zeros((spec.size,) * 2, bool)
    outer_y, outer_x = spec.pixel_geometry()[2:]
    skull = ellipse_mask(spec.size, cy, cx, max(ay, 0) + t, max(ax, 0) + t, spec.angle) & ~brain
    if ay < outer_y:
        # Volume caps: the skull shell stays at full size while the brain shrinks.
        shell = ellipse_mask(spec.size, cy, cx, outer_y * max(scale, 0) + t, outer_x * max(scale, 0) + t, spec.angle)
        skull = shell & ~brain
    image = np.zeros((spec.size, spec.size))
    image[skull] = spec.skull_intensity
    image[brain] = spec.brain_intensity + spec.texture_amplitude * texture[brain]
    if spec.noise_sigma > 0:
        image = image + noise_rng.normal(0.0, spec.noise_sigma, image.shape)
    return quantize(image), brain.astype(np.uint8), skull.astype(np.uint8)


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator) -> LabeledSample:
    """Render one 2D phantom with its exact brain and skull masks."""
    spec.validate()
    texture = _texture(spec, rng)
    image, brain, skull = _render(spec, texture, rng)
    return LabeledSample(image, brain, skull, spec)


def generate_phantom_volume(spec: PhantomSpec, depth: int, rng: np.random.Generator) -> LabeledSample:
    """Ellipsoidal head: brain axes shrink toward the first and last slices."""
    spec.validate()
    if depth < 1:
        raise ValueError("depth must be >= 1")
    zs = np.linspace(-1.0, 1.0, depth) if depth > 1 else np.zeros(1)
    tex_seed = int(rng.integers(2**63))
    images, brains, skulls = [], [], []
    for z in zs:
        scale = math.sqrt(max(0.0, 1.0 - (z / 1.15) ** 2))
        im, b, s = _render(spec, _texture(spec, np.random.default_rng(tex_seed), float(z)), rng, scale)
        images.append(im)
        brains.append(b)
        skulls.append(s)
    return LabeledSample(np.stack(images), np.stack(brains), np.stack(skulls), spec)


# ----------------------------------------------------------------- pathology

def _disk(size: int, center: tuple[float, float], radius: float) -> tuple[np.ndarray, np.ndarray]:
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    d = np.hypot(r - center[0], c - center[1])
    return d <= radius, d


def _arc(sample: LabeledSample, pathology: Pathology) -> np.ndarray:
    cy, cx = sample.spec.pixel_geometry()[:2]
    size = sample.image.shape[-1]
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.arctan2(r - cy, c - cx)
    target = math.atan2(pathology.center[0] - cy, pathology.center[1] - cx)
    delta = np.angle(np.exp(1j * (theta - target)))
    return np.abs(delta) <= pathology.radius


def pathology_footprint(sample: LabeledSample, pathology: Pathology) -> np.ndarray:
    """Boolean mask of the pixels ``pathology`` overwrites; raises if the placement is invalid."""
    size = sample.image.shape[-1]
    brain = sample.brain_mask.astype(bool)
    if pathology.kind in ("tumor", "lesion"):
        ci, cj = (int(round(v)) for v in pathology.center)
        if not (0 <= ci < size and 0 <= cj < size and brain[ci, cj]):
            raise ValueError(f"{pathology.kind} center {pathology.center} is not inside the brain")
        disk, _ = _disk(size, pathology.center, pathology.radius)
        if pathology.placement == "interior" and (disk & ~brain).any():
            raise ValueError("interior pathology leaves the brain")
        if pathology.placement == "boundary" and not (disk & ~brain).any():
            raise ValueError("boundary pathology does not reach the brain edge")
        return disk
    if sample.spec is None or sample.skull_mask is None:
        raise ValueError(f"{pathology.kind} needs the phantom geometry and skull mask")
    skull = sample.skull_mask.astype(bool)
    arc = _arc(sample, pathology)
    if pathology.kind == "skull_damage":
        foot = arc & skull
    elif pathology.kind == "membrane":
        spec = sample.spec
        cy, cx, ay, ax = spec.pixel_geometry()
        t = spec.skull_thickness
        inner = ellipse_mask(size, cy, cx, ay + t + 1.5, ax + t + 1.5, spec.angle)
        outer = ellipse_mask(size, cy, cx, ay + t + 3.0, ax + t + 3.0, spec.angle)
        foot = arc & outer & ~inner & ~skull & ~brain
    else:
        raise ValueError(f"unknown pathology kind {pathology.kind!r}")
    if not foot.any():
        raise ValueError(f"{pathology.kind} footprint is empty")
    return foot


def inject_pathology(sample: LabeledSample, pathology: Pathology, rng: np.random.Generator) -> LabeledSample:
    """Overwrite intensities in the pathology footprint; masks are left untouched."""
    foot = pathology_footprint(sample, pathology)
    image = sample.image.astype(np.float64).copy()
    values = rng.normal(pathology.mean, pathology.sigma, image.shape)
    if pathology.kind in ("tumor", "lesion"):
        _, d = _disk(image.shape[-1], pathology.center, pathology.radius)
        # Solid core with a one-third-radius soft rim.
        weight = np.clip((pathology.radius - d) / max(pathology.radius / 3.0, 1e-6), 0.0, 1.0)
        weight = np.where(foot, weight, 0.0)
        image = (1 - weight) * image + weight * values
    else:
        image[foot] = values[foot]
    return replace(sample, image=quantize(image), pathologies=[*sample.pathologies, pathology])


@dataclass(frozen=True)
class PathologyPolicy:
    """How many and which pathologies each pathological rendering receives."""

    count: tuple[int, int] = (1, 2)
    kinds: tuple[str, ...] = PATHOLOGY_KINDS
    weights: tuple[float, ...] = (0.35, 0.35, 0.15, 0.15)
    boundary_fraction: float = 0.4
    radius: tuple[float, float] = (3.0, 7.0)
    tumor_mean: tuple[float, float] = (0.85, 0.95)
    lesion_mean: tuple[float, float] = (0.03, 0.12)
    skull_damage_mean: tuple[float, float] = (0.05, 0.25)
    membrane_mean: tuple[float, float] = (0.7, 0.9)
    sigma: float = 0.04
    arc_half_width: tuple[float, float] = (0.3, 0.8)


def _brain_edge(brain: np.ndarray) -> np.ndarray:
    padded = np.pad(brain, 1)
    inner = padded[1:-1, :-2] & padded[1:-1, 2:] & padded[:-2, 1:-1] & padded[2:, 1:-1]
    return brain & ~inner


def random_pathology(sample: LabeledSample, policy: PathologyPolicy, rng: np.random.Generator) -> Pathology:
    """Draw one valid pathology for ``sample``'s geometry."""
    kind = str(rng.choice(policy.kinds, p=np.array(policy.weights) / np.sum(policy.weights)))
    brain = sample.brain_mask.astype(bool)
    size = brain.shape[-1]
    if kind in ("tumor", "lesion"):
        mean = float(rng.uniform(*(policy.tumor_mean if kind == "tumor" else policy.lesion_mean)))
        boundary = bool(rng.random() < policy.boundary_fraction)
        for _ in range(200):
            radius = float(rng.uniform(*policy.radius))
            if boundary:
                cands = np.argwhere(_brain_edge(brain))
            else:
                cands = np.argwhere(brain)
            ci, cj = cands[rng.integers(len(cands))]
            p = Pathology(kind, (float(ci), float(cj)), radius, mean, policy.sigma,
                          "boundary" if boundary else "interior")
            try:
                pathology_footprint(sample, p)
                return p
            except ValueError:
                continue
        raise RuntimeError("could not place a pathology inside this phantom")
    cy, cx = sample.spec.pixel_geometry()[:2]
    for _ in range(200):
        theta = float(rng.uniform(-math.pi, math.pi))
        center = (cy + 10 * math.sin(theta), cx + 10 * math.cos(theta))
        mean_range = policy.skull_damage_mean if kind == "skull_damage" else policy.membrane_mean
        p = Pathology(kind, center, float(rng.uniform(*policy.arc_half_width)), float(rng.uniform(*mean_range)),
                      policy.sigma, "boundary")
        try:
            pathology_footprint(sample, p)
            return p
        except ValueError:
            continue
    raise RuntimeError(f"could not place a {kind} on this phantom")


def denoise_background(image: np.ndarray, threshold: float) -> np.ndarray:
    """Zero every intensity below ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    image = np.asarray(image)
    return np.where(image < threshold, np.zeros_like(image), image)


def slice_volume(volume: np.ndarray) -> list[np.ndarray]:
    volume = np.asarray(volume)
    if volume.ndim != 3 or volume.shape[0] < 1:
        raise ValueError(f"expected a [D,H,W] volume, got shape {volume.shape}")
    return [volume[d] for d in range(volume.shape[0])]


def stack_masks(slices: Sequence[np.ndarray]) -> np.ndarray:
    if not slices:
        raise ValueError("no slices to stack")
    shapes = {np.shape(s) for s in slices}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise ValueError(f"inconsistent slice shapes {sorted(shapes)}")
    return np.stack(slices)


# ------------------------------------------------------------------- dataset

@dataclass
class Record:
    id: int
    fold: int
    rendering: str  # clean | pathological
    sample: LabeledSample


def _sample_rng(seed: int, sample_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, sample_id, stream]))


@dataclass
class Dataset:
    records: list[Record]
    seed: int
    n_per_fold: int
    ranges: PhantomRanges
    policy: PathologyPolicy

    def select(self, fold: int, rendering: str = "clean") -> list[Record]:
        return [r for r in self.records if r.fold == fold and r.rendering == rendering]

    def samples(self, fold: int, rendering: str = "clean") -> list[LabeledSample]:
        return [r.sample for r in self.select(fold, rendering)]

    def manifest(self) -> dict:
        entries = []
        for r in self.records:
            root = "" if r.rendering == "clean" else "pathological/"
            name = f"{r.id:04d}.pgm"
            entries.append({
                "id": r.id,
                "fold": r.fold,
                "rendering": r.rendering,
                "image": f"{root}images/{name}",
                "brain_mask": f"{root}masks_brain/{name}",
                "skull_mask": f"{root}masks_skull/{name}",
                "pathologies": [p.to_dict() for p in r.sample.pathologies],
            })
        return {
            "format_version": FORMAT_VERSION,
            "generator_seed": self.seed,
            "n_per_fold": self.n_per_fold,
            "phantom_ranges": asdict(self.ranges),
            "pathology_policy": asdict(self.policy),
            "samples": entries,
        }


def build_dataset(n_per_fold: int, ranges: PhantomRanges = PhantomRanges(),
                  policy: PathologyPolicy = PathologyPolicy(), seed: int = 0) -> Dataset:
    """Fold 0: clean phantoms.  Fold 1: clean phantoms plus a pathological rendering of each."""
    if n_per_fold < 1:
        raise ValueError("n_per_fold must be >= 1")
    records = []
    for sid in range(2 * n_per_fold):
        rng = _sample_rng(seed, sid)
        sample = generate_phantom(ranges.sample(rng), rng)
        fold = 0 if sid < n_per_fold else 1
        records.append(Record(sid, fold, "clean", sample))
        if fold == 1:
            prng = _sample_rng(seed, sid, 1)
            sick = sample
            for _ in range(int(prng.integers(policy.count[0], policy.count[1] + 1))):
                sick = inject_pathology(sick, random_pathology(sick, policy, prng), prng)
            records.append(Record(sid, fold, "pathological", sick))
    return Dataset(records, seed, n_per_fold, ranges, policy)


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")


def save_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    manifest = dataset.manifest()
    for entry, record in zip(manifest["samples"], dataset.records):
        s = record.sample
        for key, arr in (("image", s.image), ("brain_mask", s.brain_mask * 255), ("skull_mask", s.skull_mask * 255)):
            path = out / entry[key]
            path.parent.mkdir(parents=True, exist_ok=True)
            pnm.write_pgm(path, arr.astype(np.uint8) if key != "image" else arr)
    (out / "manifest.json").write_bytes(manifest_bytes(manifest))
    return out


def _from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def load_dataset(root) -> Dataset:
    """Read a dataset directory written by :func:`save_dataset`."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {manifest.get('format_version')!r}")
    records = []
    for e in manifest["samples"]:
        image = pnm.read_pgm(root / e["image"]).astype(np.float32) / np.float32(255.0)
        brain = (pnm.read_pgm(root / e["brain_mask"]) > 127).astype(np.uint8)
        skull = (pnm.read_pgm(root / e["skull_mask"]) > 127).astype(np.uint8)
        paths = [Pathology(**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()})
                 for p in e["pathologies"]]
        records.append(Record(int(e["id"]), int(e["fold"]), e["rendering"],
                              LabeledSample(image, brain, skull, None, paths)))
    return Dataset(records, manifest["generator_seed"], manifest["n_per_fold"],
                   _from_dict(PhantomRanges, manifest["phantom_ranges"]),
                   _from_dict(PathologyPolicy, manifest["pathology_policy"]))
