"""
Pair networks - shared residual backbone, GlobalCompare / AlignLocalCompare
fusion and the two per-label softmax heads, built on ndtensor.

Parameters live in a flat, insertion-ordered dict of leaf Tensors:

    backbone.stem.{w,b}
    backbone.s{i}.b{j}.conv1.{w,b}, .conv2.{w,b}[, .proj.{w,b}]
    compare.{w,b}                       (AlignLocalCompare only)
    head.hidden.{w,b}, head.benign.{w,b}, head.malignant.{w,b}
"""
from typing import Dict, Optional, Tuple

import numpy as np

from models.exam import ExamPair, LabelKind, Side, View
from models.prediction import Prediction
from schemas.network import BackboneConfig, PairModelConfig, Variant
from services import ndtensor as nd
from services.ndtensor import Tensor
from utils.errors import ModelInputError, ShapeError
from utils.logger import logger

Params = Dict[str, Tensor]
HeadOutput = Tuple[Tensor, Tensor]


def _he(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _block_names(config: BackboneConfig):
    """Yield (prefix, in_channels, out_channels, stride) for every residual block."""
    c_in = config.stem_channels
    for s, (c_out, blocks, stride) in enumerate(zip(config.stage_channels, config.blocks_per_stage, config.strides)):
        for j in range(blocks):
            yield f"backbone.s{s}.b{j}", c_in, c_out, stride if j == 0 else 1
            c_in = c_out


def representation_dim(config: PairModelConfig) -> int:
    c = config.backbone.feature_channels
    return c if config.variant is Variant.SINGLE_BASELINE else 2 * c


def init_parameters(config: PairModelConfig, seed: int = 0) -> Params:
    """He-initialized parameters in the current ndtensor precision."""
    rng = np.random.default_rng(seed)
    bb = config.backbone
    arrays: Dict[str, np.ndarray] = {
        "backbone.stem.w": _he(rng, (bb.stem_channels, 1, 3, 3)),
        "backbone.stem.b": np.zeros(bb.stem_channels),
    }
    for prefix, c_in, c_out, stride in _block_names(bb):
        arrays[f"{prefix}.conv1.w"] = _he(rng, (c_out, c_in, 3, 3))
        arrays[f"{prefix}.conv1.b"] = np.zeros(c_out)
        conv2 = _he(rng, (c_out, c_out, 3, 3))
        arrays[f"{prefix}.conv2.w"] = np.zeros_like(conv2) if bb.zero_init_residual else conv2
        arrays[f"{prefix}.conv2.b"] = np.zeros(c_out)
        if stride != 1 or c_in != c_out:
            arrays[f"{prefix}.proj.w"] = _he(rng, (c_out, c_in, 1, 1))
            arrays[f"{prefix}.proj.b"] = np.zeros(c_out)

    if config.variant is Variant.ALIGN_LOCAL_COMPARE:
        c2 = 2 * bb.feature_channels
        arrays["compare.w"] = _he(rng, (c2, c2, 1, 1))
        arrays["compare.b"] = np.zeros(c2)

    rep = representation_dim(config)
    arrays["head.hidden.w"] = _he(rng, (config.hidden_dim, rep))
    arrays["head.hidden.b"] = np.zeros(config.hidden_dim)
    for kind in LabelKind:
        arrays[f"head.{kind.value}.w"] = rng.standard_normal((2, config.hidden_dim)) * np.sqrt(1.0 / config.hidden_dim)
        arrays[f"head.{kind.value}.b"] = np.zeros(2)
    return {name: Tensor(value, requires_grad=True, name=name) for name, value in arrays.items()}


def backbone_forward(image: Tensor, params: Params, config: BackboneConfig) -> Tensor:
    """[1,1,H,W] image -> [1,C,h,w] feature map."""
    if image.ndim != 4 or image.shape[:2] != (1, 1):
        raise ModelInputError(f"backbone expects a [1,1,H,W] image, got {image.shape}")
    h, w = image.shape[2:]
    if h < config.total_stride or w < config.total_stride:
        raise ModelInputError(
            f"image {h}x{w} is smaller than the backbone's total stride {config.total_stride}"
        )
    x = nd.relu(nd.conv2d(image, params["backbone.stem.w"], params["backbone.stem.b"], padding=1))
    for prefix, _, _, stride in _block_names(config):
        y = nd.relu(nd.conv2d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], stride=stride, padding=1))
        y = nd.conv2d(y, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], padding=1)
        shortcut = x
        if f"{prefix}.proj.w" in params:
            shortcut = nd.conv2d(x, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"], stride=stride)
        x = nd.relu(nd.add(y, shortcut))
    return x


def _check_pair_shapes(prior: Tensor, current: Tensor) -> None:
    if prior.shape != current.shape:
        raise ShapeError(f"prior features {prior.shape} do not match current features {current.shape}")


def global_compare_forward(prior: Tensor, current: Tensor) -> Tensor:
    """concat(GAP(current), GAP(prior)) -> [1, 2C]."""
    _check_pair_shapes(prior, current)
    return nd.concat_channels(nd.global_avg_pool(current), nd.global_avg_pool(prior))


def align_local_compare_forward(prior: Tensor, current: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """GAP(ReLU(conv1x1(concat(current, prior)))) -> [1, 2C]."""
    _check_pair_shapes(prior, current)
    c2 = 2 * current.shape[1]
    if kernel.shape != (c2, c2, 1, 1):
        raise ShapeError(f"comparison kernel must be {(c2, c2, 1, 1)}, got {kernel.shape}")
    stacked = nd.concat_channels(current, prior)
    return nd.global_avg_pool(nd.relu(nd.conv2d(stacked, kernel, bias)))


def head_probs(representation: Tensor, params: Params) -> HeadOutput:
    """Hidden ReLU layer, then independent benign and malignant 2-class softmaxes."""
    hidden = nd.relu(nd.linear(representation, params["head.hidden.w"], params["head.hidden.b"]))
    benign = nd.softmax2(nd.linear(hidden, params["head.benign.w"], params["head.benign.b"]))
    malignant = nd.softmax2(nd.linear(hidden, params["head.malignant.w"], params["head.malignant.b"]))
    return benign, malignant


def head_forward(representation: Tensor, params: Params) -> Prediction:
    with nd.no_grad():
        benign, malignant = head_probs(representation, params)
    return Prediction(float(benign.data[0, 1]), float(malignant.data[0, 1]))


def image_tensor(image: np.ndarray) -> Tensor:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ModelInputError(f"expected a 2-d image, got shape {image.shape}")
    return Tensor(image[None, None])


class PairModel:
    """One pair model instance; its variant never changes after construction."""

    def __init__(self, config: PairModelConfig, seed: int = 0, params: Optional[Params] = None):
        self.config = config
        self.params = params if params is not None else init_parameters(config, seed)
        self.frozen = False
        self._feature_cache: Dict[Tuple[int, np.dtype], Tuple[np.ndarray, Tensor]] = {}
        self._warned_unaligned = False
        if config.freeze_backbone:
            self.freeze_backbone()

    @property
    def variant(self) -> Variant:
        return self.config.variant

    def named_parameters(self) -> Params:
        return self.params

    def trainable_parameters(self) -> Params:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_parameters(self, arrays: Dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy arrays into existing parameters; names under `prefix` must match exactly."""
        expected = {k for k in self.params if k.startswith(prefix)}
        given = {k for k in arrays if k.startswith(prefix)}
        if expected != given:
            missing, extra = sorted(expected - given), sorted(given - expected)
            raise ModelInputError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
        for name in sorted(expected):
            value = np.asarray(arrays[name])
            if value.shape != self.params[name].shape:
                raise ShapeError(f"parameter {name}: expected {self.params[name].shape}, got {value.shape}")
            self.params[name].data = value.astype(self.params[name].data.dtype, copy=True)
        self._feature_cache.clear()

    def load_backbone(self, arrays: Dict[str, np.ndarray]) -> None:
        self.load_parameters({k: v for k, v in arrays.items() if k.startswith("backbone.")}, prefix="backbone.")

    def freeze_backbone(self) -> None:
        for name, param in self.params.items():
            if name.startswith("backbone."):
                param.requires_grad = False
                param.grad = None
        self.frozen = True
        self._feature_cache.clear()

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def features(self, image: np.ndarray) -> Tensor:
        """Backbone features; constant while frozen, so cached per (image array, precision)."""
        if not self.frozen:
            return backbone_forward(image_tensor(image), self.params, self.config.backbone)
        key = (id(image), nd.default_dtype())
        hit = self._feature_cache.get(key)
        if hit is not None and hit[0] is image:
            return hit[1]
        with nd.no_grad():
            feats = backbone_forward(image_tensor(image), self.params, self.config.backbone)
        self._feature_cache[key] = (image, feats)
        return feats

    def clear_cache(self) -> None:
        self._feature_cache.clear()

    def representation(self, pair: ExamPair, view: View) -> Tensor:
        current = self.features(pair.current.image(view))
        if self.variant is Variant.SINGLE_BASELINE:
            return nd.global_avg_pool(current)
        if self.variant is Variant.ALIGN_LOCAL_COMPARE and not pair.is_aligned and not self._warned_unaligned:
            logger.warning(f"AlignLocalCompare received unaligned pair {pair.pair_id}; using priors as given")
            self._warned_unaligned = True
        prior = self.features(pair.prior.image(view))
        if self.variant is Variant.GLOBAL_COMPARE:
            return global_compare_forward(prior, current)
        return align_local_compare_forward(prior, current, self.params["compare.w"], self.params["compare.b"])

    def forward_view(self, pair: ExamPair, view: View) -> HeadOutput:
        """Recorded (benign, malignant) probability tensors for one view."""
        return head_probs(self.representation(pair, view), self.params)

    def predict_image(self, pair: ExamPair, view: View) -> Prediction:
        with nd.no_grad():
            return head_forward(self.representation(pair, view), self.params)

    def predict_pair(self, pair: ExamPair) -> Dict[Side, Prediction]:
        """Per-breast predictions: mean of the CC and MLO view predictions."""
        self.check_views(pair)
        out: Dict[Side, Prediction] = {}
        for side in Side:
            preds = [self.predict_image(pair, view) for view in View.of_side(side)]
            out[side] = Prediction(
                benign_present=(preds[0].benign_present + preds[1].benign_present) / 2.0,
                malignant_present=(preds[0].malignant_present + preds[1].malignant_present) / 2.0,
            )
        return out

    def check_views(self, pair: ExamPair) -> None:
        exams = (pair.current,) if self.variant is Variant.SINGLE_BASELINE else (pair.prior, pair.current)
        for exam in exams:
            missing = exam.missing_views()
            if missing:
                raise ModelInputError(
                    f"pair {pair.pair_id}: exam {exam.exam_id} lacks views {[v.value for v in missing]}"
                )

    def __repr__(self):
        return f"<PairModel(variant={self.variant.value}, params={len(self.params)}, frozen={self.frozen})>"
