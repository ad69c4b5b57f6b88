"""Volumes, slicing, dataset splits and synthetic brain phantoms.

Volumes are stored ``(X, Y, Z)`` with ``Z`` as the axial axis, which is also
how NIfTI files are laid out on disk.  Slices fed to the networks are
channels-last ``(n, H, W, 1)`` float32 arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from skimage.transform import resize

from .errors import (
    AlreadyNormalized,
    EmptyBrain,
    EmptyTrain,
    InvalidConfig,
    ShapeMismatch,
    UnreadableFile,
    ZeroPercentile,
)

SLICE_SIZE = 128
NORMALIZED_TAG = b"uadbench:normalized"


@dataclass
class Volume:
    intensities: np.ndarray
    brain_mask: np.ndarray
    gt_mask: Optional[np.ndarray] = None
    subject_id: str = ""
    dataset_id: str = ""
    normalized: bool = False

    def __post_init__(self):
        self.brain_mask = np.asarray(self.brain_mask, dtype=bool)
        if self.intensities.shape != self.brain_mask.shape:
            raise ShapeMismatch(
                f"intensities {self.intensities.shape} vs mask {self.brain_mask.shape}"
            )
        if self.gt_mask is not None:
            self.gt_mask = np.asarray(self.gt_mask, dtype=bool)
            if self.gt_mask.shape != self.brain_mask.shape:
                raise ShapeMismatch(
                    f"gt {self.gt_mask.shape} vs mask {self.brain_mask.shape}"
                )

    @property
    def shape(self):
        return self.intensities.shape

    @property
    def has_lesions(self) -> bool:
        return self.gt_mask is not None and bool(self.gt_mask.any())


@dataclass
class SliceBatch:
    pixels: np.ndarray
    masks: np.ndarray
    gt: Optional[np.ndarray]
    provenance: list = field(default_factory=list)

    def __len__(self):
        return self.pixels.shape[0]

    def __getitem__(self, idx):
        idx = np.arange(len(self))[idx]
        idx = np.atleast_1d(idx)
        return SliceBatch(
            pixels=self.pixels[idx],
            masks=self.masks[idx],
            gt=None if self.gt is None else self.gt[idx],
            provenance=[self.provenance[i] for i in idx],
        )

    @classmethod
    def concat(cls, batches: Sequence["SliceBatch"]) -> "SliceBatch":
        if not batches:
            raise EmptyBrain("no slices to concatenate")
        has_gt = all(b.gt is not None for b in batches)
        return cls(
            pixels=np.concatenate([b.pixels for b in batches]),
            masks=np.concatenate([b.masks for b in batches]),
            gt=np.concatenate([b.gt for b in batches]) if has_gt else None,
            provenance=[p for b in batches for p in b.provenance],
        )


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    fraction: float = 1.0

    def __post_init__(self):
        a, b, c = set(self.train), set(self.validation), set(self.test)
        if a & b or a & c or b & c:
            raise InvalidConfig("split lists must be pairwise disjoint")
        if not 0.0 < self.fraction <= 1.0:
            raise InvalidConfig(f"fraction must lie in (0, 1], got {self.fraction}")


@dataclass(frozen=True)
class PhantomConfig:
    n_subjects: int = 20
    anomaly_rate: float = 0.0
    lesion_intensity_mode: str = "hyper"
    seed: int = 0
    volume_shape: tuple = (64, 64, 32)
    dataset_id: str = "phantom"

    def validate(self):
        if int(self.n_subjects) < 1:
            raise InvalidConfig("n_subjects must be positive")
        if not 0.0 <= self.anomaly_rate <= 1.0:
            raise InvalidConfig("anomaly_rate must lie in [0, 1]")
        if self.lesion_intensity_mode not in ("hyper", "mixed"):
            raise InvalidConfig(
                f"lesion_intensity_mode must be 'hyper' or 'mixed', "
                f"got {self.lesion_intensity_mode!r}"
            )
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 8:
            raise InvalidConfig("volume_shape must be 3 integers >= 8")


# ---------------------------------------------------------------------------
# preprocessing


def normalize_volume(v: Volume, in_mask: bool = True) -> Volume:
    """Scale a scan into [0, 1] by its 98th percentile.

    The percentile is taken over brain-mask voxels by default
    (``in_mask=False`` uses the whole volume); values above it clip to 1.
    """
    if v.normalized:
        raise AlreadyNormalized(f"volume {v.subject_id!r} is already normalized")
    if not v.brain_mask.any():
        raise ZeroPercentile(f"volume {v.subject_id!r} has an empty brain mask")
    values = v.intensities[v.brain_mask] if in_mask else v.intensities
    p98 = float(np.percentile(values.astype(np.float64), 98))
    if not p98 > 0:
        raise ZeroPercentile(f"98th percentile of {v.subject_id!r} is {p98}")
    out = np.minimum(v.intensities.astype(np.float64) / p98, 1.0)
    out = np.maximum(out, 0.0).astype(np.float32)
    return replace(v, intensities=out, normalized=True)


def _resize_slices(arr, size, order):
    # arr: (X, Y, n) stack of axial slices
    if arr.shape[:2] == (size, size):
        return arr
    out = resize(
        arr,
        (size, size, arr.shape[2]),
        order=order,
        mode="edge",
        anti_aliasing=False,
        preserve_range=True,
    )
    return out


def extract_slices(v: Volume, size: int = SLICE_SIZE) -> SliceBatch:
    """All axial slices containing brain, resized to ``size`` x ``size``."""
    if not v.normalized:
        raise InvalidConfig("extract_slices expects a normalized volume")
    keep = np.flatnonzero(v.brain_mask.any(axis=(0, 1)))
    if keep.size == 0:
        raise EmptyBrain(f"volume {v.subject_id!r} has no brain slices")
    pixels = _resize_slices(v.intensities[:, :, keep], size, order=1)
    masks = _resize_slices(v.brain_mask[:, :, keep], size, order=0).astype(bool)
    gt = None
    if v.gt_mask is not None:
        gt = _resize_slices(v.gt_mask[:, :, keep], size, order=0).astype(bool)
        gt &= masks
    # resampling can empty a tiny slice mask
    nonempty = masks.any(axis=(0, 1))
    if not nonempty.any():
        raise EmptyBrain(f"volume {v.subject_id!r} has no brain slices after resize")

    def to_batch(a):
        return np.ascontiguousarray(np.moveaxis(a[:, :, nonempty], 2, 0)[..., None])

    return SliceBatch(
        pixels=to_batch(pixels).astype(np.float32),
        masks=to_batch(masks),
        gt=None if gt is None else to_batch(gt),
        provenance=[(v.subject_id, int(k)) for k in keep[nonempty]],
    )


def slices_to_volume(values: np.ndarray, provenance, shape, fill=0.0) -> np.ndarray:
    """Scatter per-slice maps ``(n, H, W[, 1])`` back into an ``(X, Y, Z)`` grid.

    Slices are resized back to the in-plane shape when needed (bilinear).
    """
    values = np.asarray(values)
    if values.ndim == 4:
        values = values[..., 0]
    out = np.full(shape, fill, dtype=np.float32 if values.dtype != bool else bool)
    if values.shape[0] == 0:
        return out
    stack = np.moveaxis(values, 0, 2)
    if stack.shape[:2] != tuple(shape[:2]):
        order = 0 if values.dtype == bool else 1
        stack = resize(
            stack.astype(np.float64) if order else stack,
            (shape[0], shape[1], stack.shape[2]),
            order=order,
            mode="edge",
            anti_aliasing=False,
            preserve_range=True,
        ).astype(out.dtype)
    for i, (_, z) in enumerate(provenance):
        out[:, :, z] = stack[:, :, i]
    return out


# ---------------------------------------------------------------------------
# splits


def make_split(subjects, train_frac: float, val_frac: float, seed: int) -> DatasetSplit:
    """Patient-wise shuffle split; whatever is left after train/val is test."""
    subjects = list(subjects)
    if len(set(subjects)) != len(subjects):
        raise InvalidConfig("subject ids must be unique")
    if train_frac <= 0 or val_frac < 0 or train_frac + val_frac > 1 + 1e-12:
        raise InvalidConfig("need train_frac > 0, val_frac >= 0, sum <= 1")
    order = np.random.default_rng(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    n_train = int(round(train_frac * len(subjects)))
    n_val = int(round(val_frac * len(subjects)))
    n_val = min(n_val, len(subjects) - n_train)
    return DatasetSplit(
        train=shuffled[:n_train],
        validation=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
    )


def subsample_training(split: DatasetSplit, fraction: float) -> DatasetSplit:
    """Keep the first ``ceil(fraction * |train|)`` training subjects.

    The train list is already in seeded-shuffle order, so smaller fractions
    are always prefixes (nested subsets) of larger ones.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidConfig(f"fraction must lie in (0, 1], got {fraction}")
    # guard against 0.1 * 110 = 11.000000000000002
    n = math.ceil(round(fraction * len(split.train), 9))
    if n == 0:
        raise EmptyTrain("subsampling leaves no training subjects")
    return DatasetSplit(
        train=list(split.train[:n]),
        validation=list(split.validation),
        test=list(split.test),
        fraction=split.fraction * fraction,
    )


def write_split(split: DatasetSplit, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, ids in (("train", split.train), ("validation", split.validation),
                      ("test", split.test)):
        (directory / f"{name}.txt").write_text("".join(f"{s}\n" for s in ids))


def read_split(directory) -> DatasetSplit:
    directory = Path(directory)

    def read(name):
        path = directory / f"{name}.txt"
        if not path.exists():
            return []
        return [line.strip() for line in path.read_text().splitlines() if line.strip()]

    return DatasetSplit(read("train"), read("validation"), read("test"))


# ---------------------------------------------------------------------------
# phantoms


def _smooth_noise(rng, shape, sigma):
    noise = rng.standard_normal(shape)
    noise = ndimage.gaussian_filter(noise, sigma=sigma, mode="wrap")
    return noise / (noise.std() + 1e-12)


def _phantom(rng, shape, n_lesions, mode, subject_id, dataset_id):
    X, Y, Z = shape
    gx, gy, gz = np.meshgrid(
        (np.arange(X) - (X - 1) / 2) / (X / 2),
        (np.arange(Y) - (Y - 1) / 2) / (Y / 2),
        (np.arange(Z) - (Z - 1) / 2) / (Z / 2),
        indexing="ij",
    )
    # head size and position vary a little, like residual registration error
    scale = 1.0 + rng.uniform(-0.05, 0.05, size=3)
    centre = rng.uniform(-0.02, 0.02, size=3)
    radii = np.array([0.74, 0.86, 0.84]) * scale
    ux, uy, uz = (gx - centre[0]) / radii[0], (gy - centre[1]) / radii[1], (gz - centre[2]) / radii[2]
    r = np.sqrt(ux ** 2 + uy ** 2 + uz ** 2)
    brain = r <= 1.0

    # cortical ribbon with folded inner boundary
    folds = _smooth_noise(rng, shape, sigma=2.0)
    gm_boundary = 0.85 + 0.04 * folds
    tissue = np.where(r > gm_boundary, 0.70, 0.55)

    # paired ventricles, dark on FLAIR
    vsize = 1.0 + rng.uniform(-0.15, 0.15)
    for side in (-1.0, 1.0):
        v = np.sqrt(
            ((gx - centre[0] - side * 0.12) / (0.08 * vsize)) ** 2
            + ((gy - centre[1] + 0.05) / (0.30 * vsize)) ** 2
            + ((gz - centre[2] - 0.05) / (0.35 * vsize)) ** 2
        )
        tissue = np.where(v <= 1.0, 0.18, tissue)

    texture = 1.0 + 0.04 * _smooth_noise(rng, shape, sigma=3.0)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    bias = 1.0 + 0.05 * (direction[0] * gx + direction[1] * gy + direction[2] * gz)
    image = tissue * texture * bias

    gt = np.zeros(shape, dtype=bool)
    min_dim = min(shape)
    for _ in range(n_lesions):
        # lesions sit in white matter, away from the ribbon
        for _attempt in range(100):
            c = rng.uniform(-0.6, 0.6, size=3)
            if np.sqrt(np.sum(c ** 2)) < 0.6:
                break
        c = centre + c * radii
        rad = rng.uniform(0.06, 0.14) * min_dim * rng.uniform(0.75, 1.25, size=3)
        d = np.sqrt(
            ((gx - c[0]) * X / 2 / rad[0]) ** 2
            + ((gy - c[1]) * Y / 2 / rad[1]) ** 2
            + ((gz - c[2]) * Z / 2 / rad[2]) ** 2
        )
        inside = (d <= 1.0) & brain
        if mode == "hyper":
            sign = 1.0
        else:
            sign = rng.choice([-1.0, 1.0])
        offset = sign * rng.uniform(0.45, 0.7) * (1.0 - 0.3 * d ** 2)
        image = np.where(inside, image + offset, image)
        gt |= inside

    image = image + 0.01 * rng.standard_normal(shape)
    image = np.clip(image, 0.0, None) * rng.uniform(300.0, 600.0)
    image = np.where(brain, image, 0.0).astype(np.float32)
    return Volume(
        intensities=image,
        brain_mask=brain,
        gt_mask=gt,
        subject_id=subject_id,
        dataset_id=dataset_id,
        normalized=False,
    )


def generate_phantoms(cfg: PhantomConfig) -> list:
    """Deterministic synthetic brain volumes, a fraction of them with lesions.

    Each subject draws from its own child of ``SeedSequence(cfg.seed)`` so
    subject ``i`` does not depend on how many subjects follow it.
    """
    cfg.validate()
    shape = tuple(int(s) for s in cfg.volume_shape)
    n = int(cfg.n_subjects)
    root = np.random.SeedSequence(int(cfg.seed))
    chooser = np.random.default_rng(root.spawn(1)[0])
    n_anom = int(round(cfg.anomaly_rate * n))
    anomalous = set(chooser.permutation(n)[:n_anom].tolist())
    volumes = []
    for i, child in enumerate(root.spawn(n + 1)[1:]):
        rng = np.random.default_rng(child)
        n_lesions = int(rng.integers(1, 5)) if i in anomalous else 0
        volumes.append(
            _phantom(
                rng,
                shape,
                n_lesions,
                cfg.lesion_intensity_mode,
                subject_id=f"{cfg.dataset_id}_{i:03d}",
                dataset_id=cfg.dataset_id,
            )
        )
    return volumes


# ---------------------------------------------------------------------------
# NIfTI IO


def _nib():
    import nibabel

    return nibabel


def _write_nifti(array, path, descrip=b""):
    nib = _nib()
    img = nib.Nifti1Image(array, affine=np.eye(4))
    img.header.set_data_dtype(array.dtype)
    img.header["descrip"] = descrip
    nib.save(img, str(path))


def _read_nifti(path):
    nib = _nib()
    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
    except Exception as exc:  # nibabel raises a zoo of types
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc
    return data, bytes(img.header["descrip"].tobytes()).rstrip(b"\x00")


def save_volume(v: Volume, directory) -> Path:
    """Write ``image``, ``mask`` and (if present) ``gt`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tag = NORMALIZED_TAG if v.normalized else b""
    _write_nifti(np.asarray(v.intensities, dtype=np.float32), directory / "image.nii.gz", tag)
    _write_nifti(v.brain_mask.astype(np.uint8), directory / "mask.nii.gz")
    if v.gt_mask is not None:
        _write_nifti(v.gt_mask.astype(np.uint8), directory / "gt.nii.gz")
    return directory / "image.nii.gz"


def load_volume(path) -> Volume:
    """Read an image file plus its sibling ``mask``/``gt`` files.

    ``path`` may point at the image file or at the subject directory.  Subject
    and dataset ids are taken from the directory names.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "image.nii.gz"
    if not path.exists():
        raise UnreadableFile(f"no such file: {path}")
    directory = path.parent
    image, descrip = _read_nifti(path)
    mask_path = directory / "mask.nii.gz"
    if not mask_path.exists():
        raise UnreadableFile(f"missing brain mask next to {path}")
    mask, _ = _read_nifti(mask_path)
    if mask.shape != image.shape:
        raise ShapeMismatch(f"mask {mask.shape} does not match image {image.shape}")
    gt = None
    gt_path = directory / "gt.nii.gz"
    if gt_path.exists():
        gt, _ = _read_nifti(gt_path)
        if gt.shape != image.shape:
            raise ShapeMismatch(f"gt {gt.shape} does not match image {image.shape}")
        gt = gt.astype(bool)
    return Volume(
        intensities=np.asarray(image, dtype=np.float32),
        brain_mask=mask.astype(bool),
        gt_mask=gt,
        subject_id=directory.name,
        dataset_id=directory.parent.name,
        normalized=descrip == NORMALIZED_TAG,
    )


def write_dataset(volumes, root) -> Path:
    """Materialize volumes as ``root/dataset_id/subject_id/{image,mask,gt}``."""
    root = Path(root)
    for v in volumes:
        save_volume(v, root / v.dataset_id / v.subject_id)
    return root


def read_dataset(directory, subjects=None) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise UnreadableFile(f"no dataset directory {directory}")
    if subjects is None:
        subjects = sorted(p.name for p in directory.iterdir() if (p / "image.nii.gz").exists())
    return [load_volume(directory / s) for s in subjects]
