"""
Alignment Service - affine registration of prior images to current images.

Two classical estimators (mask moments, NCC coordinate descent) produce the
candidate transforms; the candidate whose warped-source nonzero mask has the
best IoU with the target mask wins.
"""
import hashlib
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import map_coordinates

from models.exam import VIEWS, ExamPair, View
from models.transform import AffineTransform, AlignmentResult, BinaryMask
from schemas.alignment import AlignConfig, NCCConfig
from utils.errors import DegenerateImageError, PairingError, ShapeError, TransformError
from utils.logger import logger

DEFAULT_EPS = 1e-6
REPORT_COLUMNS = ["pair_id", "view", "estimator_id", "iou"]
TRANSFORM_COLUMNS = ["pair_id", "view", "a11", "a12", "a21", "a22", "tx", "ty"]


@lru_cache(maxsize=16)
def _pixel_grid(h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ys.flags.writeable = False
    xs.flags.writeable = False
    return ys, xs


def affine_warp(
    source: np.ndarray,
    transform: AffineTransform,
    out_shape: Optional[Tuple[int, int]] = None,
) -> np.ndarray:
    """Inverse-mapping bilinear warp; samples outside the source read as 0."""
    transform.validate()
    source = np.asarray(source, dtype=np.float32)
    if source.ndim != 2:
        raise ShapeError(f"affine_warp expects a 2-d image, got {source.shape}")
    h, w = out_shape if out_shape is not None else source.shape
    if transform.is_identity and (h, w) == source.shape:
        return source.copy()

    ys, xs = _pixel_grid(h, w)
    src_x = transform.a11 * xs + transform.a12 * ys + transform.tx
    src_y = transform.a21 * xs + transform.a22 * ys + transform.ty
    return map_coordinates(source, [src_y, src_x], order=1, mode="constant", cval=0.0)


def nonzero_mask(image: np.ndarray, eps: float = DEFAULT_EPS) -> BinaryMask:
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    return np.asarray(image) > eps


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """|a & b| / |a | b|, 1.0 when both masks are empty."""
    if a.shape != b.shape:
        raise ShapeError(f"mask_iou shape mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalized cross-correlation; 0 when either image is flat."""
    if a.shape != b.shape:
        raise ShapeError(f"ncc shape mismatch: {a.shape} vs {b.shape}")
    a0 = a.astype(np.float64) - a.mean()
    b0 = b.astype(np.float64) - b.mean()
    denom = np.sqrt(np.sum(a0 * a0) * np.sum(b0 * b0))
    if denom < 1e-12:
        return 0.0
    return float(np.sum(a0 * b0) / denom)


def _mask_moments(image: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.nonzero(nonzero_mask(image, eps))
    if xs.size == 0:
        raise DegenerateImageError("degenerate image: empty nonzero mask")
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    mean = pts.mean(axis=0)
    centered = pts - mean
    # Each pixel is a unit square, which keeps single-row masks non-singular.
    cov = centered.T @ centered / len(pts) + np.eye(2) / 12.0
    return mean, cov


def estimate_affine_moments(source: np.ndarray, target: np.ndarray, eps: float = DEFAULT_EPS) -> AffineTransform:
    """Match mask centroids and second-moment ellipses, without reflection."""
    mu_s, cov_s = _mask_moments(source, eps)
    mu_t, cov_t = _mask_moments(target, eps)
    w_s, u_s = np.linalg.eigh(cov_s)
    w_t, u_t = np.linalg.eigh(cov_t)

    # Eigenvector signs are arbitrary: keep the proper rotation closest to identity.
    best_signs, best_score = (1, 1), -np.inf
    for signs in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        rotation = (u_s * np.asarray(signs)) @ u_t.T
        if np.linalg.det(rotation) <= 0:
            continue
        score = np.trace(rotation)
        if score > best_score:
            best_score, best_signs = score, signs
    u_s = u_s * np.asarray(best_signs)

    a = u_s @ np.diag(np.sqrt(w_s / w_t)) @ u_t.T
    transform = AffineTransform.from_matrix(a, mu_s - a @ mu_t).clamp_scales()
    return transform.validate()


def _to_centered(transform: AffineTransform, center: np.ndarray) -> np.ndarray:
    a = transform.linear
    shift = transform.offset - center + a @ center
    return np.array([a[0, 0], a[0, 1], a[1, 0], a[1, 1], shift[0], shift[1]])


def _from_centered(params: np.ndarray, center: np.ndarray) -> AffineTransform:
    a = params[:4].reshape(2, 2)
    return AffineTransform.from_matrix(a, center - a @ center + params[4:])


def _ncc_score(source: np.ndarray, target: np.ndarray, transform: AffineTransform) -> float:
    try:
        warped = affine_warp(source, transform, target.shape)
    except TransformError:
        return -np.inf
    return ncc(warped, target)


def _coordinate_descent(
    source: np.ndarray,
    target: np.ndarray,
    start: AffineTransform,
    config: NCCConfig,
) -> Tuple[AffineTransform, float]:
    h, w = target.shape
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    params = _to_centered(start, center)
    steps = np.array([config.step_linear] * 4 + [config.step_translation] * 2)
    min_steps = steps * config.min_step_fraction
    score = _ncc_score(source, target, start)

    improved = False
    for it in range(config.iters):
        i = it % 6
        for direction in (1.0, -1.0):
            trial = params.copy()
            trial[i] += direction * steps[i]
            trial_score = _ncc_score(source, target, _from_centered(trial, center))
            if trial_score > score:
                params, score, improved = trial, trial_score, True
                break
        if i == 5:
            if not improved:
                steps = steps / 2.0
                if np.all(steps < min_steps):
                    break
            improved = False
    return _from_centered(params, center), score


def estimate_affine_ncc(
    source: np.ndarray,
    target: np.ndarray,
    config: Optional[NCCConfig] = None,
    eps: float = DEFAULT_EPS,
    moments: Optional[AffineTransform] = None,
) -> AffineTransform:
    """Maximize NCC(warp(source), target) from identity, moments and jittered starts."""
    config = config or NCCConfig()
    starts = [AffineTransform.identity()]
    if moments is None:
        try:
            moments = estimate_affine_moments(source, target, eps)
        except DegenerateImageError:
            moments = None
    if moments is not None:
        starts.append(moments)

    rng = np.random.default_rng(0)
    center = np.array([(target.shape[1] - 1) / 2.0, (target.shape[0] - 1) / 2.0])
    base = _to_centered(starts[-1], center)
    while len(starts) < config.starts:
        jitter = rng.normal(size=6) * config.perturbation
        jitter[4:] *= 0.5 * min(target.shape)
        starts.append(_from_centered(base + jitter, center))
    starts = starts[:config.starts]

    best, best_score = AffineTransform.identity(), _ncc_score(source, target, AffineTransform.identity())
    for start in starts:
        try:
            start.validate()
        except TransformError:
            continue
        candidate, score = _coordinate_descent(source, target, start, config)
        if score > best_score:
            best, best_score = candidate, score
    try:
        return best.clamp_scales().validate()
    except TransformError:
        return AffineTransform.identity()


def select_alignment(
    source: np.ndarray,
    target: np.ndarray,
    candidates: Sequence[AffineTransform],
    estimator_ids: Optional[Sequence[str]] = None,
    eps: float = DEFAULT_EPS,
) -> AlignmentResult:
    """Pick the candidate with maximal mask IoU; the earliest wins ties."""
    if not candidates:
        raise ValueError("select_alignment needs at least one candidate transform")
    ids = list(estimator_ids) if estimator_ids is not None else [f"candidate-{i}" for i in range(len(candidates))]
    if len(ids) != len(candidates):
        raise ValueError(f"{len(ids)} estimator ids for {len(candidates)} candidates")

    target_mask = nonzero_mask(target, eps)
    best: Optional[AlignmentResult] = None
    for transform, estimator_id in zip(candidates, ids):
        warped = affine_warp(source, transform, target.shape)
        iou = mask_iou(nonzero_mask(warped, eps), target_mask)
        if best is None or iou > best.iou:
            best = AlignmentResult(transform=transform, iou=iou, estimator_id=estimator_id)
    return best


def pair_key(pair_id: str) -> str:
    """Filesystem-safe key for a pair id."""
    return hashlib.md5(pair_id.encode("utf-8")).hexdigest()


class AlignmentService:
    """Aligns the four views of exam pairs and persists alignment tables."""

    def __init__(self, config: Optional[AlignConfig] = None):
        self.config = config or AlignConfig()

    def align_view(self, source: np.ndarray, target: np.ndarray) -> AlignmentResult:
        eps = self.config.eps
        d = self.config.downsample
        src_small, tgt_small = source[::d, ::d], target[::d, ::d]
        moments = estimate_affine_moments(src_small, tgt_small, eps)
        refined = estimate_affine_ncc(src_small, tgt_small, self.config.ncc, eps, moments=moments)
        candidates = [moments.rescaled(d), refined.rescaled(d)]
        return select_alignment(source, target, candidates, ["moments", "ncc"], eps)

    def align_pair(self, pair: ExamPair) -> ExamPair:
        """Warp every prior view onto its current view; current images are untouched."""
        warped: Dict[View, np.ndarray] = {}
        results: Dict[View, AlignmentResult] = {}
        for view in VIEWS:
            if view not in pair.prior.images or view not in pair.current.images:
                raise PairingError(f"Pair {pair.pair_id} is missing view {view.value}")
            source, target = pair.prior.image(view), pair.current.image(view)
            try:
                result = self.align_view(source, target)
            except DegenerateImageError:
                identity = AffineTransform.identity()
                iou = mask_iou(
                    nonzero_mask(affine_warp(source, identity, target.shape), self.config.eps),
                    nonzero_mask(target, self.config.eps),
                )
                result = AlignmentResult(identity, iou, "identity", degenerate=True)
                logger.warning(f"Degenerate image in {pair.pair_id} {view.value}; passing prior through unaligned")
            warped[view] = affine_warp(source, result.transform, target.shape)
            results[view] = result
            logger.debug(f"Aligned {pair.pair_id} {view.value}: {result.estimator_id} IoU={result.iou:.4f}")
        return ExamPair(pair.prior.with_images(warped), pair.current, alignment=results)

    def align_pairs(self, pairs: Sequence[ExamPair], threads: int = 1) -> List[ExamPair]:
        """Align many pairs; output order always matches input order."""
        logger.info(f"Aligning {len(pairs)} exam pairs with {threads} worker(s)")
        if threads <= 1 or len(pairs) < 2:
            return [self.align_pair(p) for p in pairs]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_align_one, [(self.config, p) for p in pairs], chunksize=4))

    def apply_alignment(self, pair: ExamPair, transforms: Dict[View, AlignmentResult]) -> ExamPair:
        """Re-create an aligned pair from stored per-view results."""
        warped = {
            view: affine_warp(pair.prior.image(view), transforms[view].transform, pair.current.image(view).shape)
            for view in VIEWS
        }
        return ExamPair(pair.prior.with_images(warped), pair.current, alignment=dict(transforms))

    @staticmethod
    def write_report(pairs: Iterable[ExamPair], report_path: Path, transforms_path: Optional[Path] = None) -> None:
        """Write the alignment report TSV and, optionally, the transform table."""
        rows, transform_rows = [], []
        for pair in pairs:
            for view in VIEWS:
                result = pair.alignment[view]
                rows.append([pair.pair_id, view.value, result.estimator_id, repr(result.iou)])
                transform_rows.append([pair.pair_id, view.value, *(repr(v) for v in result.transform.as_tuple())])
        pd.DataFrame(rows, columns=REPORT_COLUMNS).to_csv(report_path, sep="\t", index=False)
        if transforms_path is not None:
            pd.DataFrame(transform_rows, columns=TRANSFORM_COLUMNS).to_csv(transforms_path, sep="\t", index=False)
        logger.info(f"Alignment report written to {report_path}")

    @staticmethod
    def read_report(report_path: Path) -> pd.DataFrame:
        return pd.read_csv(
            report_path,
            sep="\t",
            dtype={"pair_id": str, "view": str, "estimator_id": str},
            float_precision="round_trip",
        )

    @staticmethod
    def read_transforms(report_path: Path, transforms_path: Path) -> Dict[str, Dict[View, AlignmentResult]]:
        """Load stored alignments keyed by pair id."""
        report = AlignmentService.read_report(report_path)
        table = pd.read_csv(
            transforms_path, sep="\t", dtype={"pair_id": str, "view": str}, float_precision="round_trip"
        )
        merged = table.merge(report, on=["pair_id", "view"], how="left")
        out: Dict[str, Dict[View, AlignmentResult]] = {}
        for row in merged.itertuples(index=False):
            transform = AffineTransform(row.a11, row.a12, row.a21, row.a22, row.tx, row.ty)
            out.setdefault(row.pair_id, {})[View(row.view)] = AlignmentResult(
                transform, float(row.iou), str(row.estimator_id), degenerate=row.estimator_id == "identity"
            )
        return out


def _align_one(args: Tuple[AlignConfig, ExamPair]) -> ExamPair:
    config, pair = args
    return AlignmentService(config).align_pair(pair)


# Singleton instance
alignment_service = AlignmentService()
