"""Volumes on disk, study manifests, fold planning, and the synthetic XOR generator."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

VOLUME_MAGIC = b"MMV1"
_HEADER = struct.Struct("<4sIII")


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class TruncatedVolumeError(VolumeFormatError):
    pass


class ZeroDimsError(VolumeFormatError):
    pass


class ManifestError(ValueError):
    pass


class MissingVolumeError(ManifestError):
    pass


class DimMismatchError(ManifestError):
    pass


class LabelDomainError(ManifestError):
    pass


@dataclass(eq=False)
class Volume:
    voxels: np.ndarray  # shape (X, Y, Z), z fastest
    modality: str = "pet"

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ZeroDimsError(f"volume must have three positive dims, got {self.voxels.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Volume) and self.modality == other.modality
                and self.dims == other.dims and np.array_equal(self.voxels, other.voxels))


@dataclass(eq=False)
class PairedStudy:
    id: str
    pet: Volume
    ct: Volume
    label: int

    def __post_init__(self):
        if self.pet.dims != self.ct.dims:
            raise DimMismatchError(f"study {self.id}: pet dims {self.pet.dims} != ct dims {self.ct.dims}")
        if self.label not in (0, 1):
            raise LabelDomainError(f"study {self.id}: label must be 0 or 1, got {self.label!r}")

    def __eq__(self, other) -> bool:
        return (isinstance(other, PairedStudy) and self.id == other.id and self.label == other.label
                and self.pet == other.pet and self.ct == other.ct)


def encode_volume(vol: Volume) -> bytes:
    X, Y, Z = vol.dims
    return _HEADER.pack(VOLUME_MAGIC, X, Y, Z) + vol.voxels.astype("<f8").tobytes()


def decode_volume(blob: bytes, modality: str = "pet") -> Volume:
    if len(blob) < _HEADER.size:
        raise TruncatedVolumeError(f"volume header needs {_HEADER.size} bytes, got {len(blob)}")
    magic, X, Y, Z = _HEADER.unpack_from(blob)
    if magic != VOLUME_MAGIC:
        raise BadMagicError(f"bad volume magic {magic!r}, expected {VOLUME_MAGIC!r}")
    if min(X, Y, Z) == 0:
        raise ZeroDimsError(f"volume has a zero dimension: {(X, Y, Z)}")
    n = X * Y * Z
    payload = blob[_HEADER.size:]
    if len(payload) != 8 * n:
        raise TruncatedVolumeError(f"expected {8 * n} payload bytes for {(X, Y, Z)}, got {len(payload)}")
    return Volume(np.frombuffer(payload, dtype="<f8").reshape(X, Y, Z).astype(np.float64), modality)


def write_volume(vol: Volume, path) -> None:
    Path(path).write_bytes(encode_volume(vol))


def read_volume(path, modality: str = "pet") -> Volume:
    return decode_volume(Path(path).read_bytes(), modality)


def normalize_volume(vol: Volume) -> Volume:
    """Zero mean, unit variance; constant volumes become all zeros."""
    v = vol.voxels
    if v.size < 2:
        raise ValueError("normalization needs at least two voxels")
    c = v - v.mean()
    var = (c * c).mean()
    if var < 1e-12:
        return Volume(np.zeros_like(v), vol.modality)
    return Volume(c / np.sqrt(var), vol.modality)


# ---------------------------------------------------------------------------
# manifests


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_manifest(path) -> list[PairedStudy]:
    """Newline-delimited JSON records {id, pet_path, ct_path, label}."""
    path = Path(path)
    if not path.is_file():
        raise MissingVolumeError(f"manifest not found: {path}")
    base = path.parent
    studies = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sid = str(rec["id"])
            pet_path, ct_path, label = rec["pet_path"], rec["ct_path"], rec["label"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"manifest line {lineno}: malformed record ({exc})") from None
        if sid in seen:
            raise ManifestError(f"manifest line {lineno}: duplicate id {sid!r}")
        seen.add(sid)
        if label not in (0, 1) or isinstance(label, bool):
            raise LabelDomainError(f"study {sid}: label must be 0 or 1, got {label!r}")
        vols = {}
        for mod, p in (("pet", pet_path), ("ct", ct_path)):
            f = _resolve(base, p)
            if not f.is_file():
                raise MissingVolumeError(f"study {sid}: {mod} volume not found: {f}")
            try:
                vols[mod] = read_volume(f, mod)
            except VolumeFormatError as exc:
                raise ManifestError(f"study {sid}: {mod} volume {f}: {exc}") from None
        if vols["pet"].dims != vols["ct"].dims:
            raise DimMismatchError(
                f"study {sid}: pet dims {vols['pet'].dims} != ct dims {vols['ct'].dims}")
        studies.append(PairedStudy(sid, vols["pet"], vols["ct"], int(label)))
    return studies


def write_manifest(studies: Sequence[PairedStudy], out_dir, volume_subdir: str = "volumes") -> Path:
    out = Path(out_dir)
    (out / volume_subdir).mkdir(parents=True, exist_ok=True)
    lines = []
    for s in studies:
        pet_rel = f"{volume_subdir}/{s.id}_pet.mmv"
        ct_rel = f"{volume_subdir}/{s.id}_ct.mmv"
        write_volume(s.pet, out / pet_rel)
        write_volume(s.ct, out / ct_rel)
        lines.append(json.dumps({"id": s.id, "pet_path": pet_rel, "ct_path": ct_rel, "label": s.label}))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    k: int
    assignments: dict[str, int]
    seed: int

    def test_ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignments.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignments.items() if f != fold)


def _labels_by_id(studies) -> dict[str, int]:
    return {s.id: s.label for s in studies}


def make_folds(studies: Sequence[PairedStudy], k: int = 6, seed: int = 0) -> FoldPlan:
    """Stratified k-fold assignment: each class is shuffled and dealt round-robin."""
    labels = _labels_by_id(studies)
    n = len(labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"k = {k} exceeds the number of studies ({n})")
    if len(set(labels.values())) < 2:
        raise ValueError("fold planning needs both classes present")
    rng = np.random.default_rng(seed)
    order: list[str] = []
    for cls in (0, 1):
        ids = sorted(i for i, y in labels.items() if y == cls)
        order.extend(ids[p] for p in rng.permutation(len(ids)))
    # continuing the deal across classes keeps total fold sizes within one
    return FoldPlan(k, {sid: pos % k for pos, sid in enumerate(order)}, seed)


def stratified_split(studies: Sequence[PairedStudy], seed: int) -> tuple[list, list]:
    """Seeded 50/50 split preserving class proportions (a two-fold deal)."""
    rng = np.random.default_rng(seed)
    a, b = [], []
    pos = 0
    for cls in (0, 1):
        group = sorted((s for s in studies if s.label == cls), key=lambda s: s.id)
        for p in rng.permutation(len(group)):
            (a if pos % 2 == 0 else b).append(group[p])
            pos += 1
    return a, b


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Ground-truth description of the generator, recorded beside the data."""
    dims: tuple[int, int, int]
    noise_sigma: float
    seed: int
    pet_center: tuple[float, float, float]
    ct_center: tuple[float, float, float]
    blob_sigma: float
    pet_amplitude: float = 1.0
    ct_amplitude: float = 1.0
    truth: list[dict] = field(default_factory=list, compare=False)


def blob_centers(dims) -> tuple[tuple[float, ...], tuple[float, ...]]:
    X, Y, Z = dims
    pet = ((X - 1) / 2, (Y - 1) / 2, (Z - 1) * 0.35)
    ct = ((X - 1) / 2, (Y - 1) / 2, (Z - 1) * 0.65)
    return pet, ct


def gaussian_blob(dims, center, sigma: float) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return np.exp(-r2 / (2.0 * sigma * sigma))


def synth_generate(n: int, dims=(16, 16, 16), noise_sigma: float = 0.1, seed: int = 0
                   ) -> tuple[list[PairedStudy], SynthSpec]:
    """Paired volumes whose label is the XOR of blob presence in PET and CT.

    Each modality alone carries no information about the label.
    """
    if n % 2:
        raise ValueError(f"n must be even for exact class balance, got {n}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ValueError(f"dims must be three sizes >= 8, got {dims}")
    rng = np.random.default_rng(seed)
    pet_c, ct_c = blob_centers(dims)
    sigma = min(dims) / 8.0
    pet_blob = gaussian_blob(dims, pet_c, sigma)
    ct_blob = gaussian_blob(dims, ct_c, sigma)
    quota = {0: n // 2, 1: n // 2}
    studies, truth = [], []
    while len(studies) < n:
        b_pet, b_ct = (int(b) for b in rng.integers(0, 2, size=2))
        label = b_pet ^ b_ct
        if quota[label] == 0:
            continue
        quota[label] -= 1
        sid = f"syn{len(studies):04d}"
        pet = rng.normal(0.0, noise_sigma, size=dims) + b_pet * pet_blob
        ct = rng.normal(0.0, noise_sigma, size=dims) + b_ct * ct_blob
        studies.append(PairedStudy(sid, Volume(pet, "pet"), Volume(ct, "ct"), label))
        truth.append({"id": sid, "b_pet": b_pet, "b_ct": b_ct, "label": label})
    spec = SynthSpec(dims, float(noise_sigma), int(seed), pet_c, ct_c, sigma, truth=truth)
    return studies, spec


def write_truth(spec: SynthSpec, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "b_pet", "b_ct", "label"])
        for row in spec.truth:
            w.writerow([row["id"], row["b_pet"], row["b_ct"], row["label"]])


# ---------------------------------------------------------------------------
# model inputs


def study_arrays(study: PairedStudy) -> tuple[np.ndarray, np.ndarray]:
    """Normalized PET and CT as [1, D, H, W] arrays."""
    pet = normalize_volume(study.pet).voxels[None]
    ct = normalize_volume(study.ct).voxels[None]
    return pet, ct


@dataclass
class Batch:
    pet: np.ndarray  # [B, 1, D, H, W]
    ct: np.ndarray
    labels: np.ndarray
    ids: list[str]


class ArrayCache:
    """Normalized arrays per study, computed once."""

    def __init__(self, studies: Sequence[PairedStudy]):
        self.studies = {s.id: s for s in studies}
        self._arr: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def batch(self, studies: Sequence[PairedStudy]) -> Batch:
        if not studies:
            raise ValueError("empty batch")
        pets, cts = [], []
        for s in studies:
            if s.id not in self._arr:
                self._arr[s.id] = study_arrays(s)
            p, c = self._arr[s.id]
            pets.append(p)
            cts.append(c)
        return Batch(np.stack(pets), np.stack(cts), np.array([s.label for s in studies]),
                     [s.id for s in studies])
