"""scikit-learn style wrapper around the training and inference functions."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .bayesinfer import McConfig, mc_predict
from .objective import ObjectiveConfig
from .segnet import UNetConfig
from .trainer import TrainConfig, fit_chips, predict_proba
from .validation import as_pairs, check_chip_array, check_label_array


class UNetSegmenter(ClassifierMixin, BaseEstimator):
    """Per-pixel tomato / non-tomato segmenter for 64-band embedding stacks.

    ``X`` is N x 64 x H x W with NaN marking NoData pixels; ``y`` is N x H x W
    in {0, 1}. Scores and probabilities only cover valid pixels.
    """

    def __init__(
        self,
        base_width=32,
        depth=3,
        dropout_rate=0.2,
        norm_enabled=True,
        learning_rate=1e-3,
        weight_decay=1e-4,
        batch_size=24,
        epochs=30,
        epsilon=1e-6,
        prob_clamp=1e-7,
        validation_fraction=0.15,
        threshold=0.5,
        random_state=0,
    ):
        self.base_width = base_width
        self.depth = depth
        self.dropout_rate = dropout_rate
        self.norm_enabled = norm_enabled
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.epsilon = epsilon
        self.prob_clamp = prob_clamp
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.random_state = random_state

    def _train_config(self, n_bands):
        return TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.random_state,
            objective=ObjectiveConfig(self.epsilon, self.prob_clamp),
            unet=UNetConfig(n_bands, self.base_width, self.depth, self.dropout_rate, self.norm_enabled),
        )

    def fit(self, X, y, valid=None, validation_data=None):
        """Train; ``validation_data`` is ``(X_val, y_val)``, otherwise a random
        ``validation_fraction`` of chips is held out."""
        X = np.asarray(X)
        n_bands = X.shape[1] if X.ndim == 4 else 64
        bands, ok = check_chip_array(X, n_bands, valid)
        labels = check_label_array(y, ok)
        pairs = as_pairs(bands, ok, labels, "train")
        if validation_data is not None:
            vb, vok = check_chip_array(validation_data[0], n_bands)
            val = as_pairs(vb, vok, check_label_array(validation_data[1], vok), "val")
            train = pairs
        else:
            if len(pairs) < 2:
                raise ValueError("need at least two chips to hold out a validation set")
            order = np.random.default_rng(self.random_state).permutation(len(pairs))
            n_val = min(max(1, int(round(self.validation_fraction * len(pairs)))), len(pairs) - 1)
            val = [pairs[i] for i in order[:n_val]]
            train = [pairs[i] for i in order[n_val:]]
        self.params_, self.history_ = fit_chips(self._train_config(n_bands), train, val)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = n_bands
        return self

    def predict_proba(self, X, valid=None):
        """Eval-mode tomato probability per pixel (N x H x W); NoData pixels get NaN."""
        check_is_fitted(self, "params_")
        bands, ok = check_chip_array(X, self.n_features_in_, valid)
        probs = np.stack(predict_proba(self.params_, as_pairs(bands, ok), self.batch_size))
        return np.where(ok, probs, np.nan)

    def predict(self, X, valid=None):
        p = self.predict_proba(X, valid)
        return (np.nan_to_num(p, nan=0.0) > self.threshold).astype(np.uint8)

    def predict_uncertainty(self, X, passes=100, valid=None):
        """MC dropout predictive mean and variance maps, each N x H x W."""
        check_is_fitted(self, "params_")
        bands, ok = check_chip_array(X, self.n_features_in_, valid)
        cfg = McConfig(passes=passes, base_seed=self.random_state)
        maps = [mc_predict(self.params_, chip, cfg) for chip, _ in as_pairs(bands, ok)]
        mean = np.stack([m.mean for m in maps])
        var = np.stack([m.variance for m in maps])
        return np.where(ok, mean, np.nan), np.where(ok, var, np.nan)

    def score(self, X, y, valid=None):
        """Pixel accuracy over valid pixels."""
        bands, ok = check_chip_array(X, self.n_features_in_, valid)
        labels = check_label_array(y, ok)
        p = np.nan_to_num(self.predict_proba(X, valid), nan=0.0)
        counts = metrics.confusion(list(p), list(labels), list(ok), self.threshold)
        return metrics.pixel_metrics(counts)["pixel_accuracy"]
