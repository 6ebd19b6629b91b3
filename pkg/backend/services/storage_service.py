"""
Storage Service - LVIM rasters and tab-separated cohort manifests.

Raster layout (little-endian): b"LVIM", u16 version, u32 height, u32 width,
then height*width float32 values, row-major, in [0, 1].

Manifest: UTF-8, one row per (exam, view), 10 tab-separated fields:
patient_id, exam_id, date, view, raster_path, benign_left, malignant_left,
benign_right, malignant_right, biopsied. Lines starting with "#" are ignored.
"""
import datetime as dt
import struct
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from models.exam import VIEWS, BreastLabels, Cohort, Exam, View
from schemas.cohort import SplitConfig
from services.cohort_service import assign_split, crop_or_pad, standardize_size
from utils.errors import ManifestError, RasterFormatError
from utils.logger import logger

RASTER_MAGIC = b"LVIM"
RASTER_VERSION = 1
_HEADER = struct.Struct("<4sHII")

MANIFEST_NAME = "manifest.tsv"
MANIFEST_FIELDS = (
    "patient_id", "exam_id", "date", "view", "raster_path",
    "benign_left", "malignant_left", "benign_right", "malignant_right", "biopsied",
)

PathLike = Union[str, Path]


def write_raster(path: PathLike, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"Raster must be 2-d, got shape {image.shape}")
    if image.size and (not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0):
        raise ValueError(f"Raster values must lie in [0, 1]: {path}")
    h, w = image.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(RASTER_MAGIC, RASTER_VERSION, h, w))
        f.write(image.astype("<f4").tobytes())


def read_raster(path: PathLike) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise RasterFormatError("missing raster file", path) from e
    except OSError as e:
        raise RasterFormatError(f"unreadable raster file ({e})", path) from e

    if len(raw) < _HEADER.size:
        raise RasterFormatError("truncated raster header", path)
    magic, version, h, w = _HEADER.unpack_from(raw)
    if magic != RASTER_MAGIC:
        raise RasterFormatError(f"bad magic {magic!r}, expected {RASTER_MAGIC!r}", path)
    if version != RASTER_VERSION:
        raise RasterFormatError(f"unsupported raster version {version}", path)
    expected = _HEADER.size + 4 * h * w
    if len(raw) < expected:
        raise RasterFormatError(f"truncated raster data ({len(raw)} of {expected} bytes)", path)
    if len(raw) > expected:
        raise RasterFormatError(f"{len(raw) - expected} trailing bytes after raster data", path)
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w).astype(np.float32)


def raster_relpath(exam: Exam, view: View) -> str:
    return f"rasters/{exam.patient_id}/{exam.exam_id}_{view.value}.lvim"


def save_cohort(cohort: Cohort, out_dir: PathLike) -> Path:
    """Write every raster and the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["# " + "\t".join(MANIFEST_FIELDS)]
    for exam in cohort.all_exams():
        flags = [str(int(f)) for f in exam.labels.as_flags()] + [str(int(exam.biopsied))]
        for view in VIEWS:
            if view not in exam.images:
                continue
            rel = raster_relpath(exam, view)
            write_raster(out_dir / rel, exam.images[view])
            lines.append("\t".join([exam.patient_id, exam.exam_id, exam.date.isoformat(), view.value, rel, *flags]))
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Saved cohort ({len(cohort.exams)} patients, {cohort.n_exams} exams) to {out_dir}")
    return manifest


def _flag(value: str, name: str, line_number: int) -> bool:
    if value not in ("0", "1"):
        raise ManifestError(f"{name} must be '0' or '1', got {value!r}", line_number)
    return value == "1"


def load_cohort(
    manifest_path: PathLike,
    splits: Optional[SplitConfig] = None,
    image_scale: Optional[int] = None,
    seed: int = 0,
) -> Cohort:
    """Parse a manifest (or a directory containing manifest.tsv) into a Cohort.

    With `image_scale` every raster is center-cropped or zero-padded to the
    standard size of its view at that scale. Without it, rasters of a view
    whose shapes disagree are brought to that view's most common shape.
    Splits hash (seed, patient_id), so pass the seed the cohort was made with.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    try:
        text = manifest_path.read_text(encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"Manifest not found or unreadable: {manifest_path}") from e
    root = manifest_path.parent

    records: Dict[Tuple[str, str], dict] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != len(MANIFEST_FIELDS):
            raise ManifestError(
                f"expected {len(MANIFEST_FIELDS)} tab-separated fields, got {len(fields)}", line_number
            )
        patient_id, exam_id, date_text, view_text, raster, *flag_text = fields
        try:
            date = dt.date.fromisoformat(date_text)
        except ValueError as e:
            raise ManifestError(f"bad date {date_text!r}", line_number) from e
        try:
            view = View(view_text)
        except ValueError as e:
            raise ManifestError(f"unknown view {view_text!r}", line_number) from e
        flags = [_flag(v, n, line_number) for v, n in zip(flag_text, MANIFEST_FIELDS[5:])]
        labels, biopsied = BreastLabels(*flags[:4]), flags[4]

        record = records.setdefault(
            (patient_id, exam_id),
            {"date": date, "labels": labels, "biopsied": biopsied, "images": {}, "line": line_number},
        )
        if (record["date"], record["labels"], record["biopsied"]) != (date, labels, biopsied):
            raise ManifestError(f"exam {exam_id} has inconsistent date/labels across rows", line_number)
        if view in record["images"]:
            raise ManifestError(f"exam {exam_id} lists view {view.value} twice", line_number)
        record["images"][view] = read_raster(root / raster)

    by_patient: Dict[str, List[Exam]] = {}
    for (patient_id, exam_id), record in records.items():
        exam = Exam(patient_id, exam_id, record["date"], record["images"], record["labels"], record["biopsied"])
        missing = exam.missing_views()
        if missing:
            raise ManifestError(
                f"exam {exam_id} lacks views {[v.value for v in missing]}", record["line"]
            )
        by_patient.setdefault(patient_id, []).append(exam)

    exams: Dict[str, Tuple[Exam, ...]] = {}
    for patient_id, patient_exams in by_patient.items():
        patient_exams.sort(key=lambda e: e.date)
        for earlier, later in zip(patient_exams, patient_exams[1:]):
            if earlier.date == later.date:
                raise ManifestError(
                    f"duplicate (patient, date) ({patient_id}, {later.date}) for exams "
                    f"{earlier.exam_id} and {later.exam_id}",
                    records[(patient_id, later.exam_id)]["line"],
                )
        exams[patient_id] = tuple(patient_exams)

    exams = _standardize_views(exams, image_scale)
    cohort = Cohort(exams=exams, splits={p: assign_split(p, splits, seed) for p in exams})
    logger.info(f"Loaded cohort from {manifest_path}: {len(exams)} patients, {cohort.n_exams} exams")
    return cohort


def _standardize_views(
    exams: Dict[str, Tuple[Exam, ...]], image_scale: Optional[int]
) -> Dict[str, Tuple[Exam, ...]]:
    if image_scale is not None:
        return {
            patient_id: tuple(
                exam.with_images({v: standardize_size(exam.image(v), v, image_scale) for v in VIEWS})
                for exam in patient_exams
            )
            for patient_id, patient_exams in exams.items()
        }

    targets: Dict[View, Tuple[int, int]] = {}
    for view in VIEWS:
        shapes = Counter(exam.image(view).shape for group in exams.values() for exam in group)
        if len(shapes) > 1:
            targets[view] = shapes.most_common(1)[0][0]
            logger.warning(f"{view.value} rasters come in {len(shapes)} sizes; resizing to {targets[view]}")
    if not targets:
        return exams
    return {
        patient_id: tuple(
            exam.with_images({
                v: crop_or_pad(exam.image(v), targets[v]) if v in targets else exam.image(v) for v in VIEWS
            })
            for exam in patient_exams
        )
        for patient_id, patient_exams in exams.items()
    }
