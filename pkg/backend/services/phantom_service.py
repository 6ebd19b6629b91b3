"""
Phantom Service - synthetic longitudinal screening cohorts.

Every patient gets one breast phantom per view (a half-ellipse against the
chest wall with smoothed texture). Each exam re-images that anatomy under a
small random pose change. Malignant breasts carry a lesion that is smaller
and fainter in earlier exams; benign breasts carry a lesion that never
changes. Background pixels are exactly 0.
"""
import datetime as dt
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from models.exam import VIEWS, BreastLabels, Cohort, Exam, LabelKind, Projection, Side, View
from models.transform import AffineTransform
from schemas.cohort import LesionParams, SynthConfig
from services.alignment_service import affine_warp
from services.cohort_service import assign_split, target_size
from utils.logger import logger

TISSUE_FLOOR = 0.05
TISSUE_CEIL = 0.85
FIRST_EXAM = dt.date(2010, 1, 1)


@dataclass(frozen=True)
class Lesion:
    """A lesion in a breast's anatomical (unjittered) coordinates, at the latest exam."""
    kind: LabelKind
    center: Tuple[float, float]  # (x, y)
    radius: float
    intensity: float
    radius_growth: float = 1.0
    intensity_growth: float = 1.0

    def at_exam(self, k: int, n_exams: int) -> Tuple[float, float]:
        """(radius, intensity) at exam k of n; benign lesions never change."""
        if self.kind is LabelKind.BENIGN:
            return self.radius, self.intensity
        steps = n_exams - 1 - k
        return self.radius / self.radius_growth ** steps, self.intensity / self.intensity_growth ** steps


def _ellipse_axes(view: View, shape: Tuple[int, int], rng: np.random.Generator) -> Tuple[float, float, float]:
    """(center_y, semi_axis_x, semi_axis_y) of a left-breast half-ellipse."""
    h, w = shape
    if view.projection is Projection.CC:
        return h * 0.5, w * rng.uniform(0.70, 0.85), h * rng.uniform(0.38, 0.45)
    return h * 0.45, w * rng.uniform(0.75, 0.90), h * rng.uniform(0.40, 0.47)


def breast_phantom(
    view: View,
    shape: Tuple[int, int],
    rng: np.random.Generator,
    axes: Optional[Tuple[float, float, float]] = None,
) -> np.ndarray:
    """Left-oriented breast phantom; callers mirror it for right views."""
    h, w = shape
    cy, ax, ay = axes if axes is not None else _ellipse_axes(view, shape, rng)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    rho2 = (xs / ax) ** 2 + ((ys - cy) / ay) ** 2
    inside = rho2 <= 1.0

    texture = gaussian_filter(rng.standard_normal(shape), sigma=max(1.0, min(shape) / 30.0))
    texture /= texture.std() or 1.0
    tissue = 0.40 + 0.12 * texture + 0.15 * (1.0 - rho2)
    image = np.where(inside, np.clip(tissue, TISSUE_FLOOR, TISSUE_CEIL), 0.0)
    return image.astype(np.float32)


def _place_lesion(
    kind: LabelKind,
    axes: Tuple[float, float, float],
    params: LesionParams,
    rng: np.random.Generator,
) -> Lesion:
    """Lesion well inside the ellipse and clear of the chest-wall edge."""
    cy, ax, ay = axes
    radius = rng.uniform(*params.radius_px)
    intensity = rng.uniform(*params.intensity)
    x_frac = rng.uniform(0.3, 0.65)
    y_frac = rng.uniform(-0.5, 0.5) * np.sqrt(1.0 - x_frac ** 2)
    x = max(ax * x_frac, radius + 2.0)
    y = cy + ay * y_frac
    if kind is LabelKind.MALIGNANT:
        return Lesion(kind, (x, y), radius, intensity, rng.uniform(*params.radius_growth), params.intensity_growth)
    return Lesion(kind, (x, y), radius, intensity)


def exam_pose(shape: Tuple[int, int], config: SynthConfig, rng: np.random.Generator) -> AffineTransform:
    """Random target->source pose change about the image center."""
    h, w = shape
    jitter = config.jitter
    return AffineTransform.about_center(
        ((w - 1) / 2.0, (h - 1) / 2.0),
        rotation_deg=rng.uniform(-jitter.rotation_deg, jitter.rotation_deg),
        scale=1.0 + rng.uniform(-jitter.scale, jitter.scale),
        shift=tuple(rng.uniform(-jitter.translation_frac, jitter.translation_frac, size=2) * w),
    )


def render_exam_view(
    base: np.ndarray,
    pose: AffineTransform,
    lesion: Optional[Lesion],
    k: int,
    n_exams: int,
    min_radius: float,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Image of one (left-oriented) view at exam k, and its lesion mask if drawn."""
    image = np.clip(affine_warp(base, pose), 0.0, 1.0)
    if lesion is None:
        return image.astype(np.float32), None
    radius, intensity = lesion.at_exam(k, n_exams)
    if radius < min_radius:
        return image.astype(np.float32), None

    h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # Lesion geometry lives in anatomical coordinates; map exam pixels there.
    ax = pose.a11 * xs + pose.a12 * ys + pose.tx
    ay = pose.a21 * xs + pose.a22 * ys + pose.ty
    dist = np.hypot(ax - lesion.center[0], ay - lesion.center[1])
    breast = image > 0
    profile = intensity * np.clip(radius + 0.5 - dist, 0.0, 1.0)
    image = np.where(breast, np.clip(image + profile, 0.0, 1.0), 0.0)
    mask = (dist <= radius) & breast
    return image.astype(np.float32), mask


def _lesion_kind(config: SynthConfig, rng: np.random.Generator) -> Optional[LabelKind]:
    draw = rng.uniform()
    if draw < config.malignant_fraction:
        return LabelKind.MALIGNANT
    if draw < config.malignant_fraction + config.benign_fraction:
        return LabelKind.BENIGN
    return None


def _is_biopsied(labels: BreastLabels, rule: str) -> bool:
    if rule == "malignant_only":
        return labels.malignant_left or labels.malignant_right
    return labels.any()


def generate_patient(
    patient_id: str,
    config: SynthConfig,
    rng: np.random.Generator,
) -> Tuple[List[Exam], Dict[Tuple[str, View], np.ndarray]]:
    n_exams = config.exams_per_patient
    shapes = {v: target_size(v, config.image_scale) for v in VIEWS}
    axes = {v: _ellipse_axes(v, shapes[v], rng) for v in VIEWS}
    bases = {v: breast_phantom(v, shapes[v], rng, axes[v]) for v in VIEWS}

    kinds = {side: _lesion_kind(config, rng) for side in Side}
    lesions: Dict[View, Optional[Lesion]] = {}
    for view in VIEWS:
        kind = kinds[view.side]
        lesions[view] = None if kind is None else _place_lesion(kind, axes[view], config.lesion_params, rng)

    dates = [FIRST_EXAM + dt.timedelta(days=int(rng.integers(0, 3 * 365)))]
    for _ in range(n_exams - 1):
        dates.append(dates[-1] + dt.timedelta(days=365 + int(rng.integers(-30, 31))))

    exams: List[Exam] = []
    masks: Dict[Tuple[str, View], np.ndarray] = {}
    for k, date in enumerate(dates):
        exam_id = f"{patient_id}-E{k}"
        images: Dict[View, np.ndarray] = {}
        present = {(side, kind): False for side in Side for kind in LabelKind}
        for view in VIEWS:
            pose = exam_pose(shapes[view], config, rng)
            image, mask = render_exam_view(
                bases[view], pose, lesions[view], k, n_exams, config.lesion_params.min_radius_px
            )
            if view.side is Side.RIGHT:
                image = np.ascontiguousarray(np.fliplr(image))
                mask = None if mask is None else np.ascontiguousarray(np.fliplr(mask))
            images[view] = image
            if mask is not None:
                masks[(exam_id, view)] = mask
                present[(view.side, lesions[view].kind)] = True
        labels = BreastLabels(
            benign_left=present[(Side.LEFT, LabelKind.BENIGN)],
            malignant_left=present[(Side.LEFT, LabelKind.MALIGNANT)],
            benign_right=present[(Side.RIGHT, LabelKind.BENIGN)],
            malignant_right=present[(Side.RIGHT, LabelKind.MALIGNANT)],
        )
        exams.append(Exam(patient_id, exam_id, date, images, labels, _is_biopsied(labels, config.biopsy_rule)))
    return exams, masks


def synth_generate(config: Optional[SynthConfig] = None, seed: int = 0) -> Cohort:
    """Generate a cohort; the same (config, seed) gives bit-identical output.

    Each patient draws from its own generator seeded by (seed, patient index),
    so patient i is the same whatever n_patients is.
    """
    config = config or SynthConfig()
    exams: Dict[str, Tuple[Exam, ...]] = {}
    masks: Dict[Tuple[str, View], np.ndarray] = {}
    for index in range(config.n_patients):
        patient_id = f"P{index:05d}"
        rng = np.random.default_rng([seed, index])
        patient_exams, patient_masks = generate_patient(patient_id, config, rng)
        exams[patient_id] = tuple(patient_exams)
        masks.update(patient_masks)

    cohort = Cohort(
        exams=exams,
        splits={p: assign_split(p, config.splits, seed) for p in exams},
        lesion_masks=masks,
    )
    n_malignant = sum(e.labels.malignant_left + e.labels.malignant_right for e in cohort.all_exams())
    logger.info(
        f"Generated synthetic cohort: {len(exams)} patients, {cohort.n_exams} exams, "
        f"{n_malignant} malignant breast-exams (seed={seed})"
    )
    return cohort


class PhantomService:
    """Synthetic cohort generation."""

    def generate(self, config: Optional[SynthConfig] = None, seed: int = 0) -> Cohort:
        return synth_generate(config, seed)


# Singleton instance
phantom_service = PhantomService()
