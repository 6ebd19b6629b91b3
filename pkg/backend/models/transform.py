"""
Affine transform models for prior-to-current image alignment.

Convention: a transform maps target (output) pixel coordinates to source
coordinates, (xs, ys) = A @ (xt, yt) + t, with x the column and y the row.
"""
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from utils.errors import TransformError

MIN_ABS_DET = 1e-6
MIN_SCALE = 0.25
MAX_SCALE = 4.0

# Boolean H x W array; a mask always has the shape of the image it came from.
BinaryMask = np.ndarray


@dataclass(frozen=True)
class AffineTransform:
    """6-parameter 2D affine map from target to source coordinates."""
    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform":
        return cls(tx=float(tx), ty=float(ty))

    @classmethod
    def about_center(
        cls,
        center: Tuple[float, float],
        rotation_deg: float = 0.0,
        scale: float = 1.0,
        shift: Tuple[float, float] = (0.0, 0.0),
    ) -> "AffineTransform":
        """Rotation/scale about `center` (x, y) followed by a shift, as a target->source map."""
        theta = math.radians(rotation_deg)
        a = scale * np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        cx, cy = center
        rotate = cls.from_matrix(a, np.zeros(2))
        return cls.translation(cx + shift[0], cy + shift[1]).compose(rotate).compose(cls.translation(-cx, -cy))

    @classmethod
    def from_matrix(cls, a: np.ndarray, t: np.ndarray) -> "AffineTransform":
        return cls(float(a[0, 0]), float(a[0, 1]), float(a[1, 0]), float(a[1, 1]), float(t[0]), float(t[1]))

    @property
    def linear(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]], dtype=np.float64)

    @property
    def offset(self) -> np.ndarray:
        return np.array([self.tx, self.ty], dtype=np.float64)

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    @property
    def scale_factors(self) -> Tuple[float, float]:
        s = np.linalg.svd(self.linear, compute_uv=False)
        return float(s[0]), float(s[1])

    @property
    def is_identity(self) -> bool:
        return self == AffineTransform.identity()

    def as_tuple(self) -> Tuple[float, float, float, float, float, float]:
        return (self.a11, self.a12, self.a21, self.a22, self.tx, self.ty)

    def validate(self) -> "AffineTransform":
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise TransformError(f"Transform has non-finite parameters: {self.as_tuple()}")
        if abs(self.det) <= MIN_ABS_DET:
            raise TransformError(f"Transform is not invertible (det={self.det:.3g})")
        return self

    def inverse(self) -> "AffineTransform":
        self.validate()
        a_inv = np.linalg.inv(self.linear)
        return AffineTransform.from_matrix(a_inv, -a_inv @ self.offset)

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """Coordinates mapped by `other` first, then by `self`."""
        a = self.linear @ other.linear
        return AffineTransform.from_matrix(a, self.linear @ other.offset + self.offset)

    def clamp_scales(self, low: float = MIN_SCALE, high: float = MAX_SCALE) -> "AffineTransform":
        """Clip the singular values of the linear part into [low, high]."""
        u, s, vt = np.linalg.svd(self.linear)
        if low <= s.min() and s.max() <= high:
            return self
        a = u @ np.diag(np.clip(s, low, high)) @ vt
        return AffineTransform.from_matrix(a, self.offset)

    def rescaled(self, factor: float) -> "AffineTransform":
        """Express the same map on an image grid scaled by `factor`."""
        return AffineTransform(self.a11, self.a12, self.a21, self.a22, self.tx * factor, self.ty * factor)


@dataclass(frozen=True)
class AlignmentResult:
    """Winning candidate of an alignment together with its mask IoU."""
    transform: AffineTransform
    iou: float
    estimator_id: str
    degenerate: bool = False
