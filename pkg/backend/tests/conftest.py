"""
Shared fixtures: exam factories, a tiny network plan and finite-difference
gradient checking.
"""
import datetime as dt
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from models.exam import VIEWS, BreastLabels, Exam, ExamPair  # noqa: E402
from schemas.network import BackboneConfig, PairModelConfig, Variant  # noqa: E402
from services import ndtensor as nd  # noqa: E402


def numerical_gradient(f, array: np.ndarray, h: float = 1e-3, indices=None) -> np.ndarray:
    """Central differences of scalar f() w.r.t. `array` (perturbed in place).

    Every element by default; with `indices` only those, the rest stay 0.
    """
    grad = np.zeros(array.shape, dtype=np.float64)
    for idx in (np.ndindex(array.shape) if indices is None else indices):
        original = array[idx]
        array[idx] = original + h
        f_plus = f()
        array[idx] = original - h
        f_minus = f()
        array[idx] = original
        grad[idx] = (f_plus - f_minus) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.linalg.norm(a) + np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / max(scale, 1e-12))


def sample_indices(shape, k: int, rng: np.random.Generator):
    """Up to k distinct multi-indices of an array of `shape`."""
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(k, size), replace=False)
    return [np.unravel_index(i, shape) for i in sorted(flat)]


def check_gradients(loss_fn, tensors, h: float = 1e-3, tol: float = 1e-4, samples=None, seed: int = 0) -> None:
    """Assert reverse-mode gradients of loss_fn() match central differences.

    With `samples`, each tensor is checked on that many seeded coordinates.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.zero_grad()
    loss_fn().backward()

    def value():
        with nd.no_grad():
            return loss_fn().item()

    for t in tensors:
        indices = None if samples is None else sample_indices(t.shape, samples, rng)
        numeric = numerical_gradient(value, t.data, h, indices)
        analytic = np.zeros_like(numeric) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
        if indices is not None:
            picked = tuple(np.array(axis) for axis in zip(*indices))
            numeric, analytic = numeric[picked], analytic[picked]
        err = relative_error(analytic, numeric)
        assert err < tol, f"{t.name or t.shape}: relative error {err:.2e}"


@pytest.fixture
def gradcheck():
    return check_gradients


@pytest.fixture
def float64():
    with nd.precision("float64"):
        yield


@pytest.fixture
def make_exam():
    def factory(patient_id, exam_id, day, rng=None, size=(16, 16), labels=None, biopsied=False, fill=None):
        rng = rng or np.random.default_rng(0)
        images = {
            v: (np.full(size, fill) if fill is not None else rng.uniform(0.1, 0.9, size)).astype(np.float32)
            for v in VIEWS
        }
        return Exam(
            patient_id,
            exam_id,
            dt.date(2015, 1, 1) + dt.timedelta(days=day),
            images,
            labels or BreastLabels(),
            biopsied,
        )

    return factory


@pytest.fixture
def toy_pairs(make_exam):
    """Six one-pair patients; two are biopsied with bright malignant left breasts."""
    rng = np.random.default_rng(11)
    pairs = []
    for i in range(6):
        malignant = i < 2
        labels = BreastLabels(malignant_left=malignant)
        prior = make_exam(f"T{i}", f"T{i}-0", 0, rng)
        current = make_exam(f"T{i}", f"T{i}-1", 365, rng, labels=labels, biopsied=malignant)
        if malignant:
            for view in VIEWS:
                if view.side.value == "left":
                    current.images[view][4:12, 4:12] = 1.0
        pairs.append(ExamPair(prior, current))
    return pairs


@pytest.fixture
def tiny_backbone():
    return BackboneConfig(stem_channels=2, stage_channels=(2, 3), blocks_per_stage=(1, 1), strides=(2, 2))


@pytest.fixture
def tiny_model_config(tiny_backbone):
    def factory(variant=Variant.ALIGN_LOCAL_COMPARE, freeze=True, hidden_dim=4):
        return PairModelConfig(variant=variant, backbone=tiny_backbone, hidden_dim=hidden_dim, freeze_backbone=freeze)

    return factory
