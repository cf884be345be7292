"""Market-value classifier and the reward functions that score generated
artifacts: tier-improvement market reward, clamped aesthetic improvement, and a
thresholded relevance penalty, combined as a weighted total.

The classifier is a small feedforward net (default 5 weight layers, leaky-ReLU
hidden activations, optional per-layer batch normalization) trained with
cross-entropy over category-balanced batches. Forward/backward passes are
written out explicitly so analytic gradients can be checked against central
finite differences.

Class index convention: 0 = Low, 1 = Medium, 2 = High, so a class index divided
by (n_classes - 1) maps the lowest tier to 0 and the highest to 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .collection import Tier
from .optim import Adam
from .pipeline import category_balanced_sampler

__all__ = [
    "TIER_TO_CLASS",
    "CLASS_LABELS",
    "FeatureExtractor",
    "extract_features",
    "MvClassifier",
    "MvTrainConfig",
    "cross_entropy_loss",
    "cross_entropy_batch",
    "train_mv_classifier",
    "gradcheck",
    "classifier_accuracy",
    "confusion_matrix",
    "RewardWeights",
    "RewardBundle",
    "market_reward",
    "aesthetic_reward",
    "relevance_reward",
    "total_reward",
    "AestheticScorer",
    "RelevanceScorer",
    "MarketScorer",
    "ScorerSuite",
]

TIER_TO_CLASS = {Tier.LOW: 0, Tier.MEDIUM: 1, Tier.HIGH: 2}
CLASS_LABELS = ("Low", "Medium", "High")

_PROB_FLOOR = 1e-12


# --- features ----------------------------------------------------------------

class FeatureExtractor:
    """Multi-hot encoder over a fixed attribute vocabulary."""

    def __init__(self, attributes: Sequence[str]) -> None:
        self.attributes = tuple(attributes)
        if len(set(self.attributes)) != len(self.attributes):
            raise ValueError("attribute vocabulary has duplicates")
        self._index = {a: i for i, a in enumerate(self.attributes)}

    @property
    def dim(self) -> int:
        return len(self.attributes)

    def extract(self, attributes: Iterable[str]) -> np.ndarray:
        vector = np.zeros(self.dim)
        for attribute in attributes:
            if attribute not in self._index:
                raise KeyError(f"unknown attribute {attribute!r}")
            vector[self._index[attribute]] = 1.0
        return vector


def extract_features(attributes: Iterable[str], vocab: Sequence[str]) -> np.ndarray:
    return FeatureExtractor(vocab).extract(attributes)


# --- classifier --------------------------------------------------------------

def _leaky(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


class MvClassifier:
    """Feedforward tier classifier with explicit backprop.

    `normalize=True` adds batch normalization after each hidden linear layer
    (training mode uses batch statistics; inference uses running averages).
    The forward pass never mutates state; running statistics are updated
    explicitly by the training loop.
    """

    BN_EPS = 1e-5

    def __init__(
        self,
        input_dim: int,
        hidden: Sequence[int] = (64, 64, 32, 16),
        n_classes: int = 3,
        leak: float = 0.01,
        normalize: bool = False,
        seed: int = 0,
    ) -> None:
        if n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        self.input_dim = input_dim
        self.hidden = tuple(hidden)
        self.n_classes = n_classes
        self.leak = leak
        self.normalize = normalize
        sizes = (input_dim, *self.hidden, n_classes)
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        for i in range(len(sizes) - 1):
            fan_in = sizes[i]
            self.params[f"w{i}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (sizes[i], sizes[i + 1]))
            self.params[f"b{i}"] = np.zeros(sizes[i + 1])
        if normalize:
            for i, width in enumerate(self.hidden):
                self.params[f"g{i}"] = np.ones(width)
                self.params[f"be{i}"] = np.zeros(width)
        self.running_mean = [np.zeros(w) for w in self.hidden]
        self.running_var = [np.ones(w) for w in self.hidden]

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def forward(self, x: np.ndarray, training: bool = False):
        """Return (probs, cache); cache carries intermediates for backward."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {x.shape[1]}")
        a = x
        cache = {"a": [a], "z": [], "bn": []}
        for i in range(len(self.hidden)):
            z = a @ self.params[f"w{i}"] + self.params[f"b{i}"]
            if self.normalize:
                if training:
                    mean = z.mean(axis=0)
                    var = z.var(axis=0)
                else:
                    mean = self.running_mean[i]
                    var = self.running_var[i]
                inv_std = 1.0 / np.sqrt(var + self.BN_EPS)
                z_hat = (z - mean) * inv_std
                out = self.params[f"g{i}"] * z_hat + self.params[f"be{i}"]
                cache["bn"].append((z_hat, inv_std, mean, var))
            else:
                out = z
                cache["bn"].append(None)
            cache["z"].append(out)
            a = _leaky(out, self.leak)
            cache["a"].append(a)
        logits = a @ self.params[f"w{len(self.hidden)}"] + self.params[f"b{len(self.hidden)}"]
        cache["logits"] = logits
        return _softmax(logits), cache

    def predict_probs(self, x: np.ndarray) -> np.ndarray:
        probs, _ = self.forward(x, training=False)
        return probs

    def class_probs(self, x: np.ndarray) -> np.ndarray:
        return self.predict_probs(np.asarray(x, dtype=float).reshape(1, -1))[0]

    def loss(self, x: np.ndarray, labels: np.ndarray, training: bool = False) -> float:
        probs, _ = self.forward(x, training=training)
        return cross_entropy_batch(probs, np.atleast_1d(labels))

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray, training: bool = True):
        """Cross-entropy loss with analytic parameter gradients.

        Returns (loss, grads, batch_stats); batch_stats holds per-hidden-layer
        (mean, var) for the trainer to fold into running statistics.
        """
        labels = np.atleast_1d(labels)
        probs, cache = self.forward(x, training=training)
        m = probs.shape[0]
        loss = cross_entropy_batch(probs, labels)

        grads = {name: np.zeros_like(value) for name, value in self.params.items()}
        dlogits = probs.copy()
        dlogits[np.arange(m), labels] -= 1.0
        dlogits /= m

        last = len(self.hidden)
        grads[f"w{last}"] = cache["a"][last].T @ dlogits
        grads[f"b{last}"] = dlogits.sum(axis=0)
        da = dlogits @ self.params[f"w{last}"].T

        for i in reversed(range(len(self.hidden))):
            out = cache["z"][i]
            dout = da * np.where(out > 0, 1.0, self.leak)
            if self.normalize:
                z_hat, inv_std, _, _ = cache["bn"][i]
                gamma = self.params[f"g{i}"]
                grads[f"g{i}"] = (dout * z_hat).sum(axis=0)
                grads[f"be{i}"] = dout.sum(axis=0)
                if training:
                    # backprop through batch statistics
                    dz_hat = dout * gamma
                    dz = inv_std * (
                        dz_hat
                        - dz_hat.mean(axis=0)
                        - z_hat * (dz_hat * z_hat).mean(axis=0)
                    )
                else:
                    dz = dout * gamma * inv_std
            else:
                dz = dout
            grads[f"w{i}"] = cache["a"][i].T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            da = dz @ self.params[f"w{i}"].T

        batch_stats = [
            (bn[2], bn[3]) if bn is not None else None for bn in cache["bn"]
        ]
        return loss, grads, batch_stats

    def update_running_stats(self, batch_stats, momentum: float = 0.1) -> None:
        if not self.normalize:
            return
        for i, stats in enumerate(batch_stats):
            if stats is None:
                continue
            mean, var = stats
            self.running_mean[i] = (1 - momentum) * self.running_mean[i] + momentum * mean
            self.running_var[i] = (1 - momentum) * self.running_var[i] + momentum * var

    # persistence hooks; the container format lives in model_io
    def state_meta(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "n_classes": self.n_classes,
            "leak": self.leak,
            "normalize": self.normalize,
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.params)
        for i in range(len(self.hidden)):
            arrays[f"running_mean{i}"] = self.running_mean[i]
            arrays[f"running_var{i}"] = self.running_var[i]
        return arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "MvClassifier":
        model = cls(
            input_dim=meta["input_dim"],
            hidden=tuple(meta["hidden"]),
            n_classes=meta["n_classes"],
            leak=meta["leak"],
            normalize=meta["normalize"],
        )
        for name in model.params:
            model.params[name] = arrays[name].copy()
        for i in range(len(model.hidden)):
            model.running_mean[i] = arrays[f"running_mean{i}"].copy()
            model.running_var[i] = arrays[f"running_var{i}"].copy()
        return model


def cross_entropy_loss(probs: Sequence[float], label: int) -> float:
    """Negative log probability of the label; probabilities below 1e-12 are
    clamped and flagged with a warning."""
    probs = np.asarray(probs, dtype=float)
    if label < 0 or label >= probs.shape[-1]:
        raise ValueError(f"label {label} out of range")
    p = probs[label]
    if p < _PROB_FLOOR:
        warnings.warn("probability at label clamped to 1e-12", RuntimeWarning, stacklevel=2)
        p = _PROB_FLOOR
    return -float(np.log(p))


def cross_entropy_batch(probs: np.ndarray, labels: np.ndarray) -> float:
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(labels)
    picked = probs[np.arange(probs.shape[0]), labels]
    if np.any(picked < _PROB_FLOOR):
        warnings.warn("probability at label clamped to 1e-12", RuntimeWarning, stacklevel=2)
        picked = np.maximum(picked, _PROB_FLOOR)
    return float(-np.log(picked).mean())


@dataclass(frozen=True)
class MvTrainConfig:
    hidden: tuple[int, ...] = (64, 64, 32, 16)
    n_classes: int = 3
    leak: float = 0.01
    normalize: bool = False
    learning_rate: float = 3e-3
    batch_size: int = 64
    iterations: int = 2000
    seed: int = 0


def train_mv_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    config: MvTrainConfig = MvTrainConfig(),
) -> tuple[MvClassifier, list[float]]:
    """Train the tier classifier with category-balanced minibatches.

    Returns the model and the per-iteration loss history. Fully seeded: the
    same inputs and config reproduce identical final weights.
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValueError("features and labels must align")
    present = np.unique(labels)
    if present.size < 2:
        raise ValueError("degenerate dataset: need at least two classes")

    by_class = {int(c): np.flatnonzero(labels == c).tolist() for c in present}
    sampler = category_balanced_sampler(by_class, seed=config.seed)

    model = MvClassifier(
        input_dim=features.shape[1],
        hidden=config.hidden,
        n_classes=config.n_classes,
        leak=config.leak,
        normalize=config.normalize,
        seed=config.seed,
    )
    optimizer = Adam(model.params, learning_rate=config.learning_rate)
    history: list[float] = []
    for _ in range(config.iterations):
        batch_idx = np.asarray(sampler.draw_many(config.batch_size))
        loss, grads, batch_stats = model.loss_and_grads(
            features[batch_idx], labels[batch_idx], training=True
        )
        optimizer.step(grads)
        model.update_running_stats(batch_stats)
        history.append(loss)
    return model, history


def gradcheck(model: MvClassifier, x: np.ndarray, labels: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    labels = np.atleast_1d(labels)
    _, grads, _ = model.loss_and_grads(x, labels, training=True)
    worst = 0.0
    for name, param in model.params.items():
        flat = param.reshape(-1)
        analytic = grads[name].reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + step
            loss_plus = model.loss(x, labels, training=True)
            flat[j] = original - step
            loss_minus = model.loss(x, labels, training=True)
            flat[j] = original
            numeric = (loss_plus - loss_minus) / (2 * step)
            denom = max(abs(analytic[j]), abs(numeric), 1e-3)
            worst = max(worst, abs(analytic[j] - numeric) / denom)
    return worst


def classifier_accuracy(model: MvClassifier, features: np.ndarray, labels: np.ndarray) -> float:
    probs = model.predict_probs(np.asarray(features, dtype=float))
    return float((probs.argmax(axis=1) == np.asarray(labels)).mean())


def confusion_matrix(
    model: MvClassifier, features: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Counts with rows = prediction, columns = ground truth."""
    probs = model.predict_probs(np.asarray(features, dtype=float))
    predictions = probs.argmax(axis=1)
    matrix = np.zeros((model.n_classes, model.n_classes), dtype=int)
    for pred, truth in zip(predictions, np.asarray(labels, dtype=int)):
        matrix[pred, truth] += 1
    return matrix


# --- reward functions --------------------------------------------------------

@dataclass(frozen=True)
class RewardWeights:
    """Combination weights for the three reward components plus the relevance
    penalty's scale and threshold."""

    market: float = 1.0
    aesthetic: float = 0.5
    relevance: float = 0.5
    relevance_scale: float = 10.0
    relevance_threshold: float = 0.2

    def __post_init__(self) -> None:
        for name in ("market", "aesthetic", "relevance", "relevance_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class RewardBundle:
    market: float
    aesthetic: float
    relevance: float
    total: float

    def __post_init__(self) -> None:
        eps = 1e-9
        if not -1 - eps <= self.market <= 1 + eps:
            raise ValueError(f"market reward {self.market} outside [-1, 1]")
        if not -1 - eps <= self.aesthetic <= 1 + eps:
            raise ValueError(f"aesthetic reward {self.aesthetic} outside [-1, 1]")
        if not -1 - eps <= self.relevance <= eps:
            raise ValueError(f"relevance reward {self.relevance} outside [-1, 0]")


def market_reward(
    probs_before: Sequence[float], probs_after: Sequence[float], n_classes: int = 3
) -> float:
    """Change in predicted class index, normalized by n_classes - 1.

    Argmax ties resolve to the lower class index (conservative valuation).
    """
    if n_classes < 2:
        raise ValueError("n_classes must be at least 2")
    before = np.asarray(probs_before, dtype=float)
    after = np.asarray(probs_after, dtype=float)
    if before.shape != (n_classes,) or after.shape != (n_classes,):
        raise ValueError(f"expected distributions over {n_classes} classes")
    return (int(after.argmax()) - int(before.argmax())) / (n_classes - 1)


def aesthetic_reward(score_after: float, score_before: float) -> float:
    """Aesthetic-score improvement, clamped to [-1, 1]."""
    return float(np.clip(score_after - score_before, -1.0, 1.0))


def relevance_reward(similarity: float, weights: RewardWeights = RewardWeights()) -> float:
    """Scaled penalty when similarity drops below the threshold, clamped to
    [-1, 0] so the stated reward range holds for any similarity."""
    if not -1.0 <= similarity <= 1.0:
        raise ValueError(f"similarity {similarity} outside [-1, 1]")
    raw = weights.relevance_scale * min(similarity - weights.relevance_threshold, 0.0)
    return float(max(raw, -1.0))


def total_reward(
    market: float,
    aesthetic: float,
    relevance: float,
    weights: RewardWeights = RewardWeights(),
) -> RewardBundle:
    total = (
        weights.market * market
        + weights.aesthetic * aesthetic
        + weights.relevance * relevance
    )
    return RewardBundle(market=market, aesthetic=aesthetic, relevance=relevance, total=total)


# --- desk-scale scorers ------------------------------------------------------
#
# Deterministic stand-ins for the full-scale scoring backbones. Anything with
# the same call surface (class_probs / score / similarity) can replace them
# without touching the RL code.

class AestheticScorer:
    """Maps weighted coverage of a configured pleasing-attribute set onto the
    1..10 scale: no coverage scores 1, full coverage 10."""

    def __init__(self, pleasing: Mapping[str, float] | Iterable[str]) -> None:
        if isinstance(pleasing, Mapping):
            weights = {str(k): float(v) for k, v in pleasing.items()}
        else:
            weights = {str(k): 1.0 for k in pleasing}
        if not weights:
            raise ValueError("pleasing attribute set must be non-empty")
        if any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
            raise ValueError("pleasing weights must be non-negative with positive sum")
        self._weights = weights
        self._total = sum(weights.values())

    def score(self, attributes: Iterable[str]) -> float:
        present = set(attributes)
        covered = sum(w for a, w in self._weights.items() if a in present)
        return 1.0 + 9.0 * covered / self._total


class RelevanceScorer:
    """Fraction of the prompt's attributes realized in the artifact; an empty
    prompt is fully satisfied by convention."""

    def similarity(self, attributes: Iterable[str], prompt_attributes: Iterable[str]) -> float:
        prompt = set(prompt_attributes)
        if not prompt:
            return 1.0
        return len(prompt & set(attributes)) / len(prompt)


class MarketScorer:
    """Classifier + feature extractor wrapped as an attribute-set scorer."""

    def __init__(self, classifier: MvClassifier, extractor: FeatureExtractor) -> None:
        if classifier.input_dim != extractor.dim:
            raise ValueError("classifier input dim does not match extractor vocabulary")
        self.classifier = classifier
        self.extractor = extractor

    @property
    def n_classes(self) -> int:
        return self.classifier.n_classes

    def class_probs(self, attributes: Iterable[str]) -> np.ndarray:
        return self.classifier.class_probs(self.extractor.extract(attributes))


@dataclass
class ScorerSuite:
    """Everything the environment needs to turn artifacts into rewards."""

    market: MarketScorer
    aesthetic: AestheticScorer
    relevance: RelevanceScorer = field(default_factory=RelevanceScorer)
    weights: RewardWeights = field(default_factory=RewardWeights)
