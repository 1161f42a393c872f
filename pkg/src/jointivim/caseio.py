"""Reading and writing cases, maps and run artifacts.

A case directory holds ``dwi.nii`` (or ``.nii.gz``) with shape (H, W, n_b),
or (H, W, Z, n_b) for multi-slice data, and a ``dwi.json`` sidecar with at
least ``"bvalues"``. Optional masks sit next to it as ``mask.nii``,
``roi.nii`` and ``lung_masks.nii`` (H, W, n_b). Instead of NIfTI, a
``manifest.json`` may list headerless little-endian float32 planes.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path
from typing import Optional

import nibabel as nib
import numpy as np

from .case import DwiCase, crop_or_pad
from .errors import InvalidArgumentError, ShapeMismatchError
from .model import PARAM_NAMES, BValueSchedule, IvimMaps, DEFAULT_BOUNDS

MAP_NAMES = ("D", "Dstar", "f", "S0")
SIDECAR_KEYS = ("bvalues", "ga_weeks", "case_id", "norm_divisor")


def _find(directory: Path, stem: str) -> Optional[Path]:
    for ext in (".nii", ".nii.gz"):
        p = directory / (stem + ext)
        if p.exists():
            return p
    return None


def read_nifti(path) -> np.ndarray:
    try:
        img = nib.load(str(path))
    except (OSError, nib.filebasedimages.ImageFileError) as exc:
        raise InvalidArgumentError(f"cannot read NIfTI {path}: {exc}") from None
    return np.asarray(img.dataobj)


def write_nifti(path, data):
    data = np.asarray(data)
    img = nib.Nifti1Image(data, np.eye(4))
    img.header.set_data_dtype(data.dtype)
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: invalid JSON: {exc}") from None


def _select_slice(vol: np.ndarray, slice_index: Optional[int], path) -> np.ndarray:
    if vol.ndim == 3:
        if slice_index not in (None, 0):
            raise InvalidArgumentError(f"{path} is single-slice; cannot select slice {slice_index}")
        return vol
    if vol.ndim == 4:
        if slice_index is None:
            raise InvalidArgumentError(f"{path} has {vol.shape[2]} slices; pass a slice index")
        if not 0 <= slice_index < vol.shape[2]:
            raise InvalidArgumentError(f"slice {slice_index} out of range [0, {vol.shape[2]})")
        return vol[:, :, slice_index]
    raise ShapeMismatchError(f"{path}: expected (H, W, n_b) or (H, W, Z, n_b), got {vol.shape}")


def _read_raw(directory: Path, manifest: dict):
    try:
        H, W = (int(s) for s in manifest["shape"])
        planes = manifest["planes"]
    except (KeyError, TypeError, ValueError):
        raise InvalidArgumentError(f"{directory}/manifest.json needs 'shape' [H, W] and 'planes'") from None
    out = []
    for name in planes:
        p = directory / name
        if not p.exists():
            raise InvalidArgumentError(f"missing raw plane {p}")
        a = np.fromfile(p, dtype="<f4")
        if a.size != H * W:
            raise ShapeMismatchError(f"{p}: {a.size} values, expected {H}x{W}")
        out.append(a.reshape(H, W))
    return np.stack(out)


def load_case(path, slice_index: Optional[int] = None, crop: Optional[tuple] = None) -> DwiCase:
    """Load a case directory (or a ``.nii`` file with a same-stem sidecar)."""
    path = Path(path)
    if path.is_dir():
        directory = path
        manifest = directory / "manifest.json"
        if manifest.exists() and _find(directory, "dwi") is None:
            meta = _read_json(manifest)
            images = _read_raw(directory, meta)
            masks = {}
        else:
            nii = _find(directory, "dwi")
            if nii is None:
                raise InvalidArgumentError(f"{directory}: no dwi.nii or manifest.json")
            images, meta, masks = _load_nifti_case(nii, directory / "dwi.json", slice_index)
    elif path.name.endswith((".nii", ".nii.gz")):
        stem = path.name[: -len(".nii.gz")] if path.name.endswith(".gz") else path.stem
        images, meta, masks = _load_nifti_case(path, path.with_name(stem + ".json"), slice_index)
    else:
        raise InvalidArgumentError(f"{path}: not a case directory or NIfTI file")

    if "bvalues" not in meta:
        raise InvalidArgumentError("sidecar/manifest lacks 'bvalues'")
    bvals = tuple(float(b) for b in meta["bvalues"])
    if len(bvals) != images.shape[0]:
        raise ShapeMismatchError(f"sidecar lists {len(bvals)} b-values but the volume has {images.shape[0]} images")
    case = DwiCase(images, BValueSchedule(bvals), ga_weeks=meta.get("ga_weeks"),
                   norm_divisor=meta.get("norm_divisor"), case_id=str(meta.get("case_id", path.stem)),
                   **masks)
    return crop_or_pad(case, tuple(crop)) if crop is not None else case


def _load_nifti_case(nii: Path, sidecar: Path, slice_index):
    if not sidecar.exists():
        raise InvalidArgumentError(f"missing b-value sidecar {sidecar}")
    meta = _read_json(sidecar)
    vol = _select_slice(read_nifti(nii), slice_index, nii)
    images = np.moveaxis(vol, -1, 0)
    masks = {}
    directory = nii.parent
    for name in ("mask", "roi"):
        p = _find(directory, name)
        if p is not None:
            m = read_nifti(p)
            if m.ndim == 3:  # multi-slice mask
                m = _select_slice(m[..., None], slice_index, p)[..., 0]
            masks[name] = m
    p = _find(directory, "lung_masks")
    if p is not None:
        masks["lung_masks"] = np.moveaxis(_select_slice(read_nifti(p), slice_index, p), -1, 0)
    return images, meta, masks


def save_case(case: DwiCase, directory) -> Path:
    """Write a case in the NIfTI layout read by :func:`load_case`."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    images = case.images if case.images.dtype in (np.float32, np.float64) else case.images.astype(np.float64)
    write_nifti(d / "dwi.nii", np.moveaxis(images, 0, -1))
    meta = {"bvalues": list(case.schedule.values), "case_id": case.case_id}
    if case.ga_weeks is not None:
        meta["ga_weeks"] = case.ga_weeks
    if case.norm_divisor is not None:
        meta["norm_divisor"] = case.norm_divisor
    (d / "dwi.json").write_text(json.dumps(meta, indent=2))
    for name in ("mask", "roi"):
        m = getattr(case, name)
        if m is not None:
            write_nifti(d / f"{name}.nii", m.astype(np.uint8))
    if case.lung_masks is not None:
        write_nifti(d / "lung_masks.nii", np.moveaxis(case.lung_masks.astype(np.uint8), 0, -1))
    return d


def save_maps(maps: IvimMaps, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in MAP_NAMES:
        write_nifti(d / f"{name}.nii", np.asarray(getattr(maps, name), dtype=np.float32))
    return d


def load_maps(directory) -> IvimMaps:
    d = Path(directory)
    arrays = {}
    for name in MAP_NAMES:
        p = _find(d, name)
        if p is None:
            raise InvalidArgumentError(f"missing map {d / (name + '.nii')}")
        arrays[name] = read_nifti(p)
    # float32 rounding may push a value sitting on a bound just outside it;
    # clipping in float64 rounds back to the same float32
    for p in PARAM_NAMES:
        arrays[p] = np.clip(arrays[p].astype(np.float64), *getattr(DEFAULT_BOUNDS, p))
    return IvimMaps(**arrays)


def save_deformations(phis, path):
    """(n, 2, H, W) fields stored as an (H, W, n, 2) float32 image."""
    write_nifti(path, np.transpose(np.asarray(phis, dtype=np.float32), (2, 3, 0, 1)))


def load_deformations(path) -> np.ndarray:
    return np.transpose(read_nifti(path), (2, 3, 0, 1))


def write_trace(trace, path):
    keys = ("iteration", "lr", "total", "fit", "smooth", "sim")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        for row in trace:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in keys})


def read_trace(path) -> list:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def save_result(result, directory, metrics: Optional[dict] = None) -> Path:
    """Maps, deformations, loss trace and a JSON report for one joint run."""
    d = save_maps(result.maps, directory)
    save_deformations(result.deformations, d / "deformations.nii")
    write_trace(result.trace, d / "loss_trace.csv")
    report = {
        "config": dataclasses.asdict(result.config),
        "iterations": result.iterations,
        "best_iteration": result.best_iteration,
        "final": result.final.to_dict(),
        "metrics": metrics or {},
    }
    write_json(report, d / "report.json")
    return d


def write_json(obj, path):
    try:
        Path(path).write_text(json.dumps(obj, indent=2, default=_json_default))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
