"""A per-voxel logistic classifier trained with patch SGD.

The model is linear in seven hand-crafted features (intensity, and local
mean and standard deviation in cubic windows of radius 1, 2 and 4) and
is hand-differentiated: the chain rule

    dL/dtheta = sum_j dL/dp_j * p_j (1 - p_j) * f_j

composes the voxel-wise loss gradients of :mod:`lesionkit.imbalance` with
the sigmoid derivative.  ``VoxelClassifier`` exposes it with the usual
``fit`` / ``predict_proba`` / ``predict`` estimator interface.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ValidationError
from .imbalance import LOSS_KINDS, build_weight_grid, compute_loss
from .labeling import DEFAULT_CONNECTIVITY, label_components
from .lesion_metrics import (
    SMALL_CUT_MM,
    LesionPRC,
    lesion_dice,
    lesion_prc,
    match_case,
    operating_point,
    parallel_map,
)
from .rater_protocol import median
from .sampler import Patch, PatchSpec, TrainingCase, sample_batch
from .validation import check_volume_array, values_of
from .volgrid import Mask, ProbabilityMap, check_same_geometry, positive_fraction

DEFAULT_RADII = (1, 2, 4)


def feature_names(radii=DEFAULT_RADII) -> list[str]:
    return ["intensity"] + [f"mean_r{r}" for r in radii] + [f"std_r{r}" for r in radii]


def extract_features(image, radii=DEFAULT_RADII) -> np.ndarray:
    """Feature stack of shape ``(1 + 2 * len(radii), nx, ny, nz)``, float64.

    Windows are cubes of side ``2r + 1`` with edge voxels replicated
    outside the volume.
    """
    x = check_volume_array(values_of(image), dtype=np.float64, name="image")
    means, stds = [], []
    for r in radii:
        size = 2 * int(r) + 1
        m = ndimage.uniform_filter(x, size, mode="nearest")
        m2 = ndimage.uniform_filter(x * x, size, mode="nearest")
        var = m2 - m * m
        # cancellation leaves ~1e-16 * mean^2 noise on flat regions
        var[var < 1e-12 * np.maximum(m2, 1e-300)] = 0.0
        means.append(m)
        stds.append(np.sqrt(var))
    return np.stack([x] + means + stds)


class VoxelFeatures(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapping :func:`extract_features`."""

    def __init__(self, radii=DEFAULT_RADII):
        self.radii = radii

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return extract_features(X, self.radii)


@dataclass
class VoxelModel:
    """Logistic weights over standardized features.

    ``feature_mean`` / ``feature_scale`` standardize the raw features and
    are fixed before training; only ``weights`` and ``bias`` are learned.
    """

    weights: np.ndarray
    bias: float = 0.0
    feature_mean: np.ndarray | None = None
    feature_scale: np.ndarray | None = None
    radii: tuple[int, ...] = DEFAULT_RADII

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = 1 + 2 * len(self.radii)
        if self.weights.shape != (n,):
            raise ValidationError(f"expected {n} weights for radii {self.radii}, got {self.weights.shape}")
        if self.feature_mean is None:
            self.feature_mean = np.zeros(n)
        if self.feature_scale is None:
            self.feature_scale = np.ones(n)
        self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64)
        self.feature_scale = np.asarray(self.feature_scale, dtype=np.float64)
        self.bias = float(self.bias)

    @property
    def n_features(self) -> int:
        return len(self.weights)

    @property
    def params(self) -> np.ndarray:
        return np.append(self.weights, self.bias)

    def with_params(self, theta) -> "VoxelModel":
        theta = np.asarray(theta, dtype=np.float64)
        return VoxelModel(theta[:-1].copy(), float(theta[-1]), self.feature_mean,
                          self.feature_scale, self.radii)

    def standardize(self, features) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        if f.shape[0] != self.n_features:
            raise ValidationError(f"model expects {self.n_features} features, got {f.shape[0]}")
        shape = (-1,) + (1,) * (f.ndim - 1)
        return (f - self.feature_mean.reshape(shape)) / self.feature_scale.reshape(shape)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "feature_mean": self.feature_mean.tolist(),
            "feature_scale": self.feature_scale.tolist(),
            "radii": list(self.radii),
            "features": feature_names(self.radii),
        }

    @classmethod
    def from_dict(cls, doc) -> "VoxelModel":
        try:
            return cls(doc["weights"], doc["bias"], doc.get("feature_mean"),
                       doc.get("feature_scale"), tuple(doc.get("radii", DEFAULT_RADII)))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed model document: {exc!r}") from None

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "VoxelModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def logits(model: VoxelModel, features) -> np.ndarray:
    z = np.tensordot(model.weights, model.standardize(features), axes=1)
    return z + model.bias


def forward(model: VoxelModel, features) -> np.ndarray:
    """Per-voxel probability ``sigmoid(w . f + b)`` as float64."""
    return expit(logits(model, features))


def loss_and_grad(model: VoxelModel, patch: Patch, loss_kind: str):
    """Patch loss and its gradient with respect to ``(weights..., bias)``."""
    if loss_kind not in LOSS_KINDS:
        raise ValidationError(f"unknown loss kind {loss_kind!r}")
    if loss_kind == "iwbce" and patch.weights is None:
        raise ValidationError("iwbce needs patch weights; build weight grids before sampling")
    features = patch.features if patch.features is not None else extract_features(patch.image, model.radii)
    if features.shape[0] != model.n_features:
        raise ValidationError(f"model expects {model.n_features} features, got {features.shape[0]}")
    f = np.asarray(features, dtype=np.float64).reshape(model.n_features, -1)
    # standardization folded into the weights: w.(f - mu)/s + b = (w/s).f + b - (w/s).mu
    w_eff = model.weights / model.feature_scale
    b_eff = model.bias - w_eff @ model.feature_mean
    p = expit(w_eff @ f + b_eff)
    weights = None if patch.weights is None else np.asarray(patch.weights).reshape(-1)
    report = compute_loss(loss_kind, p, np.asarray(patch.gt).reshape(-1), weights)
    dz = report.gradient * p * (1.0 - p)
    sum_dz = np.sum(dz)
    grad_w = (f @ dz - model.feature_mean * sum_dz) / model.feature_scale
    return report.value, np.append(grad_w, sum_dz)


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "iwbce"
    epochs: int = 20
    iters_per_epoch: int = 50
    batch_size: int = 12
    patch_size: tuple[int, int, int] = (32, 32, 32)
    lr: float = 0.1
    lr_after_drop: float = 0.01
    # epoch index (0-based) from which ``lr_after_drop`` applies; None = 90% of epochs
    lr_drop_epoch: int | None = None
    tumor_prob: float = 0.5
    connectivity: int = DEFAULT_CONNECTIVITY
    radii: tuple[int, ...] = DEFAULT_RADII
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValidationError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        for name in ("epochs", "iters_per_epoch", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be positive")
        object.__setattr__(self, "patch_size", tuple(int(s) for s in self.patch_size))
        object.__setattr__(self, "radii", tuple(int(r) for r in self.radii))
        if not self.lr > 0 or not self.lr_after_drop > 0:
            raise ValidationError("learning rates must be positive")
        # a drop at or past ``epochs`` simply never happens
        if self.drop_epoch < 0:
            raise ValidationError(f"lr_drop_epoch must be >= 0, got {self.lr_drop_epoch}")
        PatchSpec(self.patch_size, self.tumor_prob, self.seed)

    @property
    def drop_epoch(self) -> int:
        if self.lr_drop_epoch is not None:
            return int(self.lr_drop_epoch)
        return int(round(0.9 * self.epochs))

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.drop_epoch else self.lr_after_drop

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        d["radii"] = list(self.radii)
        return d

    @classmethod
    def from_dict(cls, doc) -> "TrainConfig":
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        if "patch_size" in doc:
            doc["patch_size"] = tuple(doc["patch_size"])
        if "radii" in doc:
            doc["radii"] = tuple(doc["radii"])
        return cls(**doc)


def prepare_cases(images, masks, config: TrainConfig, beta: float | None = None,
                  features=None) -> list[TrainingCase]:
    """Feature stacks and (for iwbce) full-volume weight grids per case.

    ``beta`` defaults to the positive fraction pooled over all ``masks``.
    Precomputed ``features`` (one stack per image) are reused as given.
    """
    images, masks = list(images), list(masks)
    if not images or len(images) != len(masks):
        raise ValidationError("need the same positive number of images and masks")
    for i, (img, gt) in enumerate(zip(images, masks)):
        check_same_geometry(img, gt, names=[f"image{i}", f"mask{i}"])
    if beta is None:
        beta = positive_fraction(masks)
    cases = []
    for i, (img, gt) in enumerate(zip(images, masks)):
        weights = None
        if config.loss == "iwbce":
            if beta > 0:
                weights = build_weight_grid(label_components(gt, config.connectivity), beta).values
            else:
                weights = np.ones(gt.dims)
        if features is not None:
            feats = features[i]
        else:
            feats = extract_features(img, config.radii).astype(np.float32)
        cases.append(TrainingCase(values_of(img), np.asarray(gt.values), weights, feats, f"case{i}"))
    return cases


def feature_statistics(cases) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and standard deviation pooled over every voxel."""
    n = 0
    s = None
    s2 = None
    for c in cases:
        f = c.features.reshape(c.features.shape[0], -1).astype(np.float64)
        s = f.sum(axis=1) if s is None else s + f.sum(axis=1)
        s2 = (f * f).sum(axis=1) if s2 is None else s2 + (f * f).sum(axis=1)
        n += f.shape[1]
    mean = s / n
    var = np.maximum(s2 / n - mean * mean, 0.0)
    scale = np.sqrt(var)
    scale[scale == 0] = 1.0
    return mean, scale


def train(cases, config: TrainConfig, model: VoxelModel | None = None):
    """SGD over Tumor-Sampled batches.

    Each iteration averages the patch gradients of one batch.  Returns the
    trained model and a per-epoch log of ``{epoch, lr, mean_loss}``.
    """
    cases = list(cases)
    if not cases:
        raise ValidationError("no training cases")
    if config.loss == "iwbce" and any(c.weights is None for c in cases):
        raise ValidationError("iwbce training needs precomputed weight grids for every case")
    if model is None:
        mean, scale = feature_statistics(cases)
        model = VoxelModel(np.zeros(1 + 2 * len(config.radii)), 0.0, mean, scale, config.radii)
    spec = PatchSpec(config.patch_size, config.tumor_prob, config.seed)
    rng = np.random.default_rng(config.seed)
    theta = model.params
    log = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        losses = []
        for _ in range(config.iters_per_epoch):
            batch = sample_batch(cases, spec, config.batch_size, rng)
            current = model.with_params(theta)
            grad = np.zeros_like(theta)
            batch_loss = 0.0
            for patch in batch:
                value, g = loss_and_grad(current, patch, config.loss)
                grad += g
                batch_loss += value
            theta = theta - lr * grad / len(batch)
            losses.append(batch_loss / len(batch))
        log.append({"epoch": epoch, "lr": lr, "mean_loss": float(np.mean(losses))})
    return model.with_params(theta), log


class VoxelClassifier(ClassifierMixin, BaseEstimator):
    """Estimator interface over :func:`train`.

    ``fit`` takes a sequence of images and the matching ground-truth masks;
    ``predict_proba`` maps one image to a :class:`ProbabilityMap`.
    """

    def __init__(self, loss="iwbce", epochs=20, iters_per_epoch=50, batch_size=12,
                 patch_size=(32, 32, 32), lr=0.1, lr_after_drop=0.01, lr_drop_epoch=None,
                 tumor_prob=0.5, connectivity=DEFAULT_CONNECTIVITY, radii=DEFAULT_RADII,
                 random_state=0):
        self.loss = loss
        self.epochs = epochs
        self.iters_per_epoch = iters_per_epoch
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.lr = lr
        self.lr_after_drop = lr_after_drop
        self.lr_drop_epoch = lr_drop_epoch
        self.tumor_prob = tumor_prob
        self.connectivity = connectivity
        self.radii = radii
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            loss=self.loss, epochs=self.epochs, iters_per_epoch=self.iters_per_epoch,
            batch_size=self.batch_size, patch_size=tuple(self.patch_size), lr=self.lr,
            lr_after_drop=self.lr_after_drop, lr_drop_epoch=self.lr_drop_epoch,
            tumor_prob=self.tumor_prob, connectivity=self.connectivity,
            radii=tuple(self.radii), seed=int(self.random_state or 0),
        )

    @classmethod
    def from_config(cls, config: TrainConfig) -> "VoxelClassifier":
        d = config.to_dict()
        d["random_state"] = d.pop("seed")
        return cls(**d)

    def fit(self, X, y, beta=None):
        config = self._config()
        cases = prepare_cases(X, y, config, beta)
        self.model_, self.training_log_ = train(cases, config)
        self.classes_ = np.array([0, 1])
        return self

    def fit_cases(self, cases):
        """Fit on already prepared :class:`TrainingCase` objects."""
        self.model_, self.training_log_ = train(cases, self._config())
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return logits(self.model_, extract_features(X, self.model_.radii))

    def predict_proba(self, X) -> ProbabilityMap:
        check_is_fitted(self, "model_")
        p = forward(self.model_, extract_features(X, self.model_.radii))
        return ProbabilityMap(p.astype(np.float32), getattr(X, "spacing", (1.0, 1.0, 1.0)))

    def predict(self, X) -> Mask:
        p = self.predict_proba(X)
        return Mask((p.values > 0.5).astype(np.uint8), p.spacing)


@dataclass
class EvaluationReport:
    """Lesion-wise results of one model on a held-out set.

    ``small_prc`` restricts recall to lesions below ``small_cut_mm``
    (sphere-equivalent diameter) while precision still counts every
    prediction.
    """

    prc: LesionPRC
    small_prc: LesionPRC | None
    matches: list
    lesion_dice: list = field(default_factory=list)
    small_cut_mm: float = SMALL_CUT_MM

    @property
    def median_lesion_dice(self) -> float:
        values = [d for _, _, d in self.lesion_dice]
        return median(values) if values else math.nan

    def at_precision(self, target_precision: float) -> dict:
        """Operating point with the most recall at precision >= target."""
        i = operating_point(self.prc, target_precision)
        if i is None:
            return {"threshold": None, "precision": None, "recall": 0.0,
                    "small_recall": 0.0, "small_missed": self.n_small, "missed": self.prc.n_gt}
        out = {
            "threshold": float(self.prc.thresholds[i]),
            "precision": float(self.prc.precision[i]),
            "recall": float(self.prc.recall[i]),
            "missed": int(self.prc.fn[i]),
        }
        if self.small_prc is not None:
            out["small_recall"] = float(self.small_prc.recall[i])
            out["small_missed"] = int(self.small_prc.fn[i])
        return out

    @property
    def n_small(self) -> int:
        return 0 if self.small_prc is None else self.small_prc.n_gt


def evaluate_probabilities(probs, masks, connectivity=DEFAULT_CONNECTIVITY,
                           small_cut_mm=SMALL_CUT_MM, case_ids=None) -> EvaluationReport:
    """Lesion-wise PRC, small-stratum PRC and lesion Dice for probability maps."""
    probs, masks = list(probs), list(masks)
    case_ids = case_ids or [f"case{i}" for i in range(len(probs))]

    def one(args):
        prob, gt, cid = args
        table = match_case(prob, gt, connectivity, cid)
        pred_mask = np.asarray(prob.values) > 0.5
        dice = lesion_dice(pred_mask, label_components(gt, connectivity), connectivity)
        return table, [(cid, g, d) for g, d in dice]

    results = parallel_map(one, zip(probs, masks, case_ids))
    matches = [t for t, _ in results]
    dice = [x for _, ds in results for x in ds]
    prc = lesion_prc(matches)
    n_small = sum(int(np.count_nonzero(m.gt_diameters_mm < small_cut_mm)) for m in matches)
    small = lesion_prc(matches, small_cut_mm, thresholds=prc.thresholds) if n_small else None
    return EvaluationReport(prc, small, matches, dice, small_cut_mm)


def evaluate(model, images, masks, connectivity=DEFAULT_CONNECTIVITY,
             small_cut_mm=SMALL_CUT_MM) -> EvaluationReport:
    """Run ``model`` (a VoxelModel or fitted VoxelClassifier) on held-out cases."""
    if isinstance(model, VoxelClassifier):
        model = model.model_
    probs = []
    for img in images:
        p = forward(model, extract_features(img, model.radii))
        probs.append(ProbabilityMap(p.astype(np.float32), img.spacing))
    return evaluate_probabilities(probs, masks, connectivity, small_cut_mm)
