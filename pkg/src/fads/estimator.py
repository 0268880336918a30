"""scikit-learn style wrappers: fit on nominal images, score/predict new ones.

Scores follow the anomaly convention (higher = more anomalous) through
``anomaly_score``; ``score_samples``/``decision_function``/``predict`` follow
scikit-learn's outlier-detector conventions (lower / negative / -1 = outlier).
"""
import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin, clone
from sklearn.utils.validation import check_is_fitted

from . import core
from .localization import saliency
from .netio import check_weights, make_reference_net
from .validation import check_choice, check_images

REFERENCE_SEED = 42


class FADSDetector(OutlierMixin, BaseEstimator):
    """Single FADS model over a fixed CNN.

    Parameters
    ----------
    graph, weights : NetworkGraph and parameter mapping. ``None`` uses the
        seeded reference network.
    input_size : (C, H, W) the images are resized to; ``None`` keeps the
        training images' common size.
    agg : 'max', 'min' or 'mean' activation-map aggregation.
    scoring : 'max', 'percentile90' or 'l2' r-vector reduction.
    sigma_floor : lower bound on each filter's standard deviation.
    tap : record conv outputs ('conv') or their ReLU ('relu').
    boundary : normalized score above which ``predict`` flags an anomaly.
    n_jobs : threads used for embedding.
    """

    def __init__(self, graph=None, weights=None, input_size=None, agg="max", scoring="max",
                 sigma_floor=core.DEFAULT_SIGMA_FLOOR, tap="conv", boundary=1.0, n_jobs=None):
        self.graph = graph
        self.weights = weights
        self.input_size = input_size
        self.agg = agg
        self.scoring = scoring
        self.sigma_floor = sigma_floor
        self.tap = tap
        self.boundary = boundary
        self.n_jobs = n_jobs

    def _network(self):
        if self.graph is None:
            return make_reference_net(REFERENCE_SEED)
        return self.graph, check_weights(self.graph, self.weights)

    def fit(self, X, y=None):
        check_choice("agg", self.agg, core.AGGREGATIONS)
        check_choice("scoring", self.scoring, core.SCORINGS)
        images = check_images(X, min_samples=2)
        graph, weights = self._network()
        model = core.fit(images, graph, weights, self.agg, self.sigma_floor, self.input_size, self.tap,
                         self.n_jobs)
        self.ensemble_ = core.ensemble_fit([(model, graph, weights)], images, self.scoring, self.n_jobs)
        self.model_ = model
        self.graph_, self.weights_ = graph, weights
        self.filter_mean_ = model.filter_mean
        self.filter_std_ = model.filter_std
        self.normalizer_ = self.ensemble_.members[0].normalizers[self.scoring]
        self.n_filters_ = model.n_filters
        return self

    def _prepared(self, X):
        check_is_fitted(self, "model_")
        return [self.model_.prepare(img) for img in check_images(X, n_channels=self.model_.input_size[0])]

    def embed(self, X):
        """Aggregated filter activations, shape ``(n_samples, n_filters)``."""
        images = self._prepared(X)
        return np.array(core.embed_many(images, self.graph_, self.weights_, self.agg, self.tap, self.n_jobs))

    def transform(self, X):
        """r-vectors: per-filter standardized deviation from the nominal mean."""
        return np.array([core.r_from_embedding(self.model_, e) for e in self.embed(X)])

    def raw_score(self, X):
        return np.array([core.score(r, self.scoring) for r in self.transform(X)])

    def anomaly_score(self, X):
        """Score divided by the mean training score (1.0 = typical nominal image)."""
        return self.raw_score(X) / self.normalizer_

    def score_samples(self, X):
        return -self.anomaly_score(X)

    def decision_function(self, X):
        return self.boundary - self.anomaly_score(X)

    def predict(self, X):
        return np.where(self.decision_function(X) < 0, -1, 1)

    def saliency(self, X):
        """Guided-backprop saliency map of each image (at the model's input size)."""
        return [saliency(img, self.model_, self.graph_, self.weights_, self.scoring) for img in self._prepared(X)]


def default_members():
    return [FADSDetector(input_size=(1, 32, 32)), FADSDetector(input_size=(1, 64, 64))]


class FADSEnsemble(OutlierMixin, BaseEstimator):
    """Average of self-normalized FADS members (different networks and/or input sizes).

    ``members`` are unfitted :class:`FADSDetector` templates; each is cloned,
    given this ensemble's ``scoring`` and fitted on the same images.
    ``None`` uses the reference network at 32x32 and 64x64.
    """

    def __init__(self, members=None, scoring="max", boundary=1.0, n_jobs=None):
        self.members = members
        self.scoring = scoring
        self.boundary = boundary
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        check_choice("scoring", self.scoring, core.SCORINGS)
        images = check_images(X, min_samples=2)
        templates = default_members() if self.members is None else self.members
        if not templates:
            raise ValueError("an ensemble needs at least one member")
        self.members_ = [clone(m).set_params(scoring=self.scoring, n_jobs=self.n_jobs).fit(images)
                         for m in templates]
        self.ensemble_ = core.EnsembleModel(tuple(m.ensemble_.members[0] for m in self.members_), self.scoring)
        return self

    def member_scores(self, X):
        """Normalized score per member, shape ``(n_samples, n_members)``."""
        check_is_fitted(self, "members_")
        images = check_images(X)
        return np.column_stack([m.anomaly_score(images) for m in self.members_])

    def anomaly_score(self, X):
        return self.member_scores(X).mean(axis=1)

    def score_samples(self, X):
        return -self.anomaly_score(X)

    def decision_function(self, X):
        return self.boundary - self.anomaly_score(X)

    def predict(self, X):
        return np.where(self.decision_function(X) < 0, -1, 1)
