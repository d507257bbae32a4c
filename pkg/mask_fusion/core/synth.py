"""
Synthetic studies: isotropic phantoms degraded into three unaligned LR views.

The axial view keeps the reference pose; coronal and sagittal views are warped by
random rigid transforms before slice subsampling, so the generator knows the exact
registration answer for every pair of views.
"""

import hashlib
import json
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from .config import (
    MAX_ROTATION_DEG,
    MAX_TRANSLATION_VOX,
    REFERENCE_GRID,
    SLICE_DISTANCES,
    derive_seed,
)
from .error_trace import logger
from .errors import DataError
from .geometry import AffineParams, voxels_to_normalized, warp
from .volume import (
    ViewAxis,
    Volume,
    normalize_intensity,
    read_volume,
    upsample_to_isotropic,
    write_volume,
)

Vector3 = Tuple[float, float, float]

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "mask-fusion-corpus/1"
MAX_ATTEMPTS = 10
GAMMA_RANGE = (0.7, 1.4)


@dataclass(frozen=True)
class Ellipsoid:
    """Solid ellipsoid in voxel units; center and semi-axes are (x, y, z)."""

    center: Vector3
    semi_axes: Vector3
    angles: Vector3 = (0.0, 0.0, 0.0)
    intensity: float = 0.8


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    n_lobes: Optional[int] = None
    noise_sigma: float = 0.02
    seed: int = 0
    lobes: Optional[Tuple[Ellipsoid, ...]] = None
    min_fraction: float = 0.05
    max_fraction: float = 0.40


@dataclass(frozen=True)
class ViewRecord:
    axis: ViewAxis
    lr_image: Volume
    lr_mask: Volume
    true_misalignment: AffineParams
    contrast_gamma: float = 1.0


@dataclass
class Study:
    study_id: str
    hr_image: Volume
    hr_mask: Volume
    views: Dict[ViewAxis, ViewRecord]
    slice_distance_vox: int
    split: str = "train"

    @property
    def size(self) -> int:
        return self.hr_image.data.shape[0]


@dataclass
class PreparedStudy:
    """Views after unit matching: cubic, intensity-normalized images and up-sampled masks."""

    study_id: str
    images: Dict[ViewAxis, Volume]
    masks: Dict[ViewAxis, Volume]
    misalignments: Dict[ViewAxis, AffineParams]
    hr_image: Volume
    hr_mask: Volume
    slice_distance_vox: int
    split: str = "train"

    @property
    def size(self) -> int:
        return self.hr_mask.data.shape[0]


def _ellipsoid_mask(size: int, lobe: Ellipsoid) -> np.ndarray:
    z, y, x = np.meshgrid(
        np.arange(size), np.arange(size), np.arange(size), indexing="ij"
    )
    offsets = np.stack(
        [x - lobe.center[0], y - lobe.center[1], z - lobe.center[2]], axis=-1
    ).astype(np.float64)
    rot = AffineParams(lobe.angles).to_matrix()[:3, :3]
    local = offsets @ rot
    scaled = local / np.asarray(lobe.semi_axes, dtype=np.float64)
    return (scaled**2).sum(axis=-1) <= 1.0


def _draw_lobes(rng: np.random.Generator, spec: PhantomSpec) -> Tuple[Ellipsoid, ...]:
    n = spec.size
    mid = (n - 1) / 2.0
    count = spec.n_lobes or int(rng.integers(1, 5))
    # the first lobe alone exceeds min_fraction; every lobe stays inside the 0.42n fit radius
    first_axes = tuple(rng.uniform(0.25 * n, 0.32 * n, size=3))
    first_center = tuple(mid + rng.uniform(-0.04 * n, 0.04 * n, size=3))
    lobes = [
        Ellipsoid(
            first_center,
            first_axes,
            tuple(rng.uniform(-math.pi, math.pi, size=3)),
            float(rng.uniform(0.65, 0.9)),
        )
    ]
    for _ in range(count - 1):
        # centers inside the first lobe keep the union a single component
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction) + 1e-12
        offset = direction * rng.uniform(0.0, 0.5 * min(first_axes))
        lobes.append(
            Ellipsoid(
                tuple(np.asarray(first_center) + offset),
                tuple(rng.uniform(0.10 * n, 0.15 * n, size=3)),
                tuple(rng.uniform(-math.pi, math.pi, size=3)),
                float(rng.uniform(0.55, 0.95)),
            )
        )
    return tuple(lobes)


def _fits(spec: PhantomSpec, lobes: Tuple[Ellipsoid, ...]) -> bool:
    mid = (spec.size - 1) / 2.0
    limit = 0.42 * spec.size
    return all(
        np.linalg.norm(np.asarray(lobe.center) - mid) + max(lobe.semi_axes) <= limit
        for lobe in lobes
    )


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.normal(size=(size,) * 3), sigma=sigma)
    return field_ / (np.abs(field_).max() + 1e-12)


def generate_phantom(spec: PhantomSpec) -> Tuple[Volume, Volume]:
    """
    Deterministic textured phantom and its binary mask.

    Random draws that leave the mask empty, out of the occupancy range or touching
    the body boundary are redrawn from a perturbed seed, up to MAX_ATTEMPTS times.
    """
    if spec.size < 32:
        raise DataError("phantom grid must be at least 32 voxels", {"size": spec.size})
    n = spec.size
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, attempt]))
        lobes = spec.lobes if spec.lobes is not None else _draw_lobes(rng, spec)
        mask = np.zeros((n, n, n), dtype=bool)
        intensity = np.zeros((n, n, n), dtype=np.float64)
        for lobe in lobes:
            inside = _ellipsoid_mask(n, lobe)
            mask |= inside
            intensity = np.where(inside, np.maximum(intensity, lobe.intensity), intensity)
        fraction = float(mask.mean())
        if spec.lobes is not None:
            if not mask.any():
                raise DataError("explicit phantom lobes produce an empty mask")
            break
        if mask.any() and spec.min_fraction <= fraction <= spec.max_fraction and _fits(spec, lobes):
            break
        logger.debug(
            "Phantom draw rejected",
            {"seed": spec.seed, "attempt": attempt, "fraction": fraction},
        )
    else:
        raise DataError(
            "phantom generation failed after retries",
            {"seed": spec.seed, "attempts": MAX_ATTEMPTS},
        )

    z, y, x = np.meshgrid(*(np.arange(n),) * 3, indexing="ij")
    mid = (n - 1) / 2.0
    radius = np.sqrt((x - mid) ** 2 + (y - mid) ** 2 + (z - mid) ** 2)
    body = 1.0 / (1.0 + np.exp((radius - 0.46 * n) / 1.5))

    image = 0.25 * body * (1.0 + 0.35 * _smooth_noise(rng, n, sigma=4.0))
    texture = 1.0 + 0.15 * _smooth_noise(rng, n, sigma=2.0)
    image = np.where(mask, intensity * texture, image)
    image = ndimage.gaussian_filter(image, sigma=0.7)
    if spec.noise_sigma > 0:
        image = image + rng.normal(scale=spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return (
        Volume(image.astype(np.float32), (1.0, 1.0, 1.0), "image"),
        Volume(mask.astype(np.float32), (1.0, 1.0, 1.0), "mask"),
    )


def max_translation_norm(size: int, max_translation_vox: float = MAX_TRANSLATION_VOX) -> float:
    """Translation bound in normalized units, with the reference voxel range scaled to size."""
    return voxels_to_normalized(max_translation_vox * size / REFERENCE_GRID, size)


def sample_misalignment(
    rng: np.random.Generator,
    size: int,
    max_rotation_deg: float = MAX_ROTATION_DEG,
    max_translation_vox: float = MAX_TRANSLATION_VOX,
) -> AffineParams:
    rotation = rng.uniform(-max_rotation_deg, max_rotation_deg, size=3)
    bound = max_translation_norm(size, max_translation_vox)
    translation = rng.uniform(-bound, bound, size=3)
    return AffineParams(
        tuple(float(math.radians(a)) for a in rotation),  # type: ignore[arg-type]
        tuple(float(t) for t in translation),  # type: ignore[arg-type]
    )


def _check_misalignment(misalign: AffineParams, size: int) -> None:
    limit_rad = math.radians(MAX_ROTATION_DEG) + 1e-9
    bound = max_translation_norm(size) + 1e-9
    if any(abs(a) > limit_rad for a in misalign.rotation):
        raise DataError(
            "misalignment rotation exceeds 45 degrees",
            {"rotation_deg": list(misalign.rotation_deg())},
        )
    if any(abs(t) > bound for t in misalign.translation):
        raise DataError(
            "misalignment translation exceeds the scaled 30-voxel range",
            {"translation_vox": list(misalign.translation_vox(size))},
        )


def extract_slices(data: np.ndarray, axis: ViewAxis, d_vox: int) -> np.ndarray:
    return np.take(data, np.arange(0, data.shape[axis.array_axis], d_vox), axis=axis.array_axis)


def apply_contrast(image: np.ndarray, gamma: float) -> np.ndarray:
    return np.power(np.clip(image, 0.0, 1.0), gamma).astype(np.float32)


def degrade(
    hr_image: Volume,
    hr_mask: Volume,
    axis: ViewAxis,
    d_vox: int,
    misalign: AffineParams,
    seed: Optional[int] = None,
    contrast_jitter: bool = True,
) -> ViewRecord:
    """Warp the HR pair into the view's pose, jitter contrast, keep every d_vox-th slice."""
    size = hr_image.data.shape[0]
    if d_vox not in SLICE_DISTANCES or size % d_vox:
        raise DataError(
            "slice distance must be a supported divisor of the grid",
            {"d_vox": d_vox, "size": size, "allowed": list(SLICE_DISTANCES)},
        )
    _check_misalignment(misalign, size)
    warped_image = warp(hr_image, misalign, mode="bilinear")
    warped_mask = warp(hr_mask, misalign, mode="nearest")

    gamma = 1.0
    image = warped_image.data
    if contrast_jitter:
        gamma = float(np.random.default_rng(seed).uniform(*GAMMA_RANGE))
        image = apply_contrast(image, gamma)

    spacing = list(hr_image.spacing)
    spacing[axis.spacing_index] *= d_vox
    return ViewRecord(
        axis=axis,
        lr_image=Volume(extract_slices(image, axis, d_vox), tuple(spacing), "image"),
        lr_mask=Volume(extract_slices(warped_mask.data, axis, d_vox), tuple(spacing), "mask"),
        true_misalignment=misalign,
        contrast_gamma=gamma,
    )


def generate_study(
    index: int,
    seed: int,
    size: int,
    d_vox: int,
    noise_sigma: float = 0.02,
    max_rotation_deg: float = MAX_ROTATION_DEG,
    max_translation_vox: float = MAX_TRANSLATION_VOX,
    contrast_jitter: bool = True,
    split: str = "train",
) -> Study:
    phantom_seed = derive_seed(seed, "phantom", index)
    hr_image, hr_mask = generate_phantom(
        PhantomSpec(size=size, noise_sigma=noise_sigma, seed=phantom_seed)
    )
    rng = np.random.default_rng(derive_seed(seed, "misalign", index))
    views = {}
    for axis in ViewAxis.ordered():
        if axis is ViewAxis.AXIAL:
            misalign = AffineParams.identity()
        else:
            misalign = sample_misalignment(rng, size, max_rotation_deg, max_translation_vox)
        views[axis] = degrade(
            hr_image,
            hr_mask,
            axis,
            d_vox,
            misalign,
            seed=derive_seed(seed, "contrast", index, axis.value),
            contrast_jitter=contrast_jitter,
        )
    return Study(f"study_{index}", hr_image, hr_mask, views, d_vox, split)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_study(root: Path, study: Study, index: int) -> dict:
    study_dir = root / study.study_id
    files = {
        "hr_img": write_volume(study.hr_image, study_dir / "hr_img.smv"),
        "hr_msk": write_volume(study.hr_mask, study_dir / "hr_msk.smv"),
    }
    views = {}
    for axis, view in study.views.items():
        img = write_volume(view.lr_image, study_dir / f"view_{axis.value}_img.smv")
        msk = write_volume(view.lr_mask, study_dir / f"view_{axis.value}_msk.smv")
        views[axis.value] = {
            "img": str(img.relative_to(root)),
            "msk": str(msk.relative_to(root)),
            "sha256": {"img": _sha256(img), "msk": _sha256(msk)},
            "misalignment": view.true_misalignment.to_dict(),
            "contrast_gamma": view.contrast_gamma,
            "dims": list(view.lr_image.dims),
        }
    return {
        "id": study.study_id,
        "index": index,
        "split": study.split,
        "files": {k: str(v.relative_to(root)) for k, v in files.items()},
        "sha256": {k: _sha256(v) for k, v in files.items()},
        "views": views,
    }


def _split_for(index: int, n_train: int, n_eval: int) -> str:
    if index >= n_train:
        return "test"
    return "eval" if index >= n_train - n_eval else "train"


def build_corpus(
    out_dir: Union[str, Path],
    n_train: int,
    n_test: int,
    d_vox: int,
    seed: int,
    size: int = 64,
    n_eval: int = 0,
    noise_sigma: float = 0.02,
    max_rotation_deg: float = MAX_ROTATION_DEG,
    max_translation_vox: float = MAX_TRANSLATION_VOX,
    contrast_jitter: bool = True,
    force: bool = False,
    workers: int = 1,
) -> dict:
    """
    Generate and persist a corpus; returns the manifest that was written.

    Studies 0..n_train-1 form the training pool (the last n_eval of them flagged
    "eval" for hyperparameter selection), followed by n_test test studies.
    """
    if n_train < 1 or n_test < 1:
        raise DataError("corpus needs at least one train and one test study")
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise DataError(
                "target directory is not empty (use --force)", {"path": str(root)}
            )
        logger.warning("Replacing existing corpus", {"path": str(root)})
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)

    generator = {
        "size": size,
        "d_vox": d_vox,
        "seed": seed,
        "n_train": n_train,
        "n_test": n_test,
        "n_eval": n_eval,
        "noise_sigma": noise_sigma,
        "max_rotation_deg": max_rotation_deg,
        "max_translation_vox": max_translation_vox,
        "contrast_jitter": contrast_jitter,
    }
    logger.info("Building corpus", {"path": str(root), **generator})

    def produce(index: int) -> dict:
        study = generate_study(
            index,
            seed,
            size,
            d_vox,
            noise_sigma,
            max_rotation_deg,
            max_translation_vox,
            contrast_jitter,
            _split_for(index, n_train, n_eval),
        )
        return _write_study(root, study, index)

    total = n_train + n_test
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        entries: List[dict] = list(pool.map(produce, range(total)))

    manifest = {"format": MANIFEST_FORMAT, "generator": generator, "studies": entries}
    (root / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    logger.info(
        "Corpus written",
        {"path": str(root), "studies": total, "manifest_hash": manifest_hash(manifest)},
    )
    return manifest


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(
        json.dumps(manifest, sort_keys=True).encode("utf-8")
    ).hexdigest()


def preprocess_study(study: Study) -> PreparedStudy:
    """Unit matching: nearest up-sampling of every view to the HR grid plus 2-98% rescaling."""
    size = study.size
    images, masks, misalignments = {}, {}, {}
    for axis, view in study.views.items():
        images[axis] = normalize_intensity(upsample_to_isotropic(view.lr_image, axis, size))
        masks[axis] = upsample_to_isotropic(view.lr_mask, axis, size)
        misalignments[axis] = view.true_misalignment
    return PreparedStudy(
        study.study_id,
        images,
        masks,
        misalignments,
        study.hr_image,
        study.hr_mask,
        study.slice_distance_vox,
        study.split,
    )


@dataclass
class Corpus:
    """Read-only view of a persisted corpus directory."""

    root: Path
    manifest: dict = field(repr=False)
    _cache: Dict[str, PreparedStudy] = field(default_factory=dict, repr=False)

    @classmethod
    def open(cls, root: Union[str, Path]) -> "Corpus":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.exists():
            raise DataError("corpus manifest not found", {"path": str(path)})
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError("corpus manifest is not valid JSON", {"path": str(path)}) from e
        if manifest.get("format") != MANIFEST_FORMAT:
            raise DataError("unknown corpus format", {"format": manifest.get("format")})
        return cls(root, manifest)

    @property
    def dataset_hash(self) -> str:
        return manifest_hash(self.manifest)

    @property
    def size(self) -> int:
        return int(self.manifest["generator"]["size"])

    @property
    def d_vox(self) -> int:
        return int(self.manifest["generator"]["d_vox"])

    def entries(self, split: Optional[str] = None) -> List[dict]:
        return [
            s for s in self.manifest["studies"] if split is None or s["split"] == split
        ]

    def load(self, entry: dict) -> Study:
        views = {}
        for name, meta in entry["views"].items():
            axis = ViewAxis(name)
            views[axis] = ViewRecord(
                axis,
                read_volume(self.root / meta["img"]),
                read_volume(self.root / meta["msk"]),
                AffineParams.from_dict(meta["misalignment"]),
                float(meta["contrast_gamma"]),
            )
        return Study(
            entry["id"],
            read_volume(self.root / entry["files"]["hr_img"]),
            read_volume(self.root / entry["files"]["hr_msk"]),
            views,
            self.d_vox,
            entry["split"],
        )

    def prepared(self, split: Optional[str] = None) -> List[PreparedStudy]:
        out = []
        for entry in self.entries(split):
            if entry["id"] not in self._cache:
                self._cache[entry["id"]] = preprocess_study(self.load(entry))
            out.append(self._cache[entry["id"]])
        return out
