"""scikit-learn style wrappers around the model, the pruners and the skipper.

Inputs ``X`` are integer token arrays shaped (samples, seq_len) or (tokens,);
``y`` holds one class per token with the same shape.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import TokenSet, init_model, pretrain_toy
from .moe import ModelConfig, MoEModel, PruneMask, model_forward
from .pruning import (
    exhaustive_layer_search,
    frequency_prune,
    global_scores,
    n_to_prune,
    random_prune,
    select_bottom_k,
)
from .search import SearchConfig, run_search
from .skipping import calibrate, skip_forward

__all__ = [
    "AdaptiveSkipper",
    "DiEPPruner",
    "ExhaustivePruner",
    "FrequencyPruner",
    "MoEClassifier",
    "RandomPruner",
]


def _tokens(X, vocab: int | None = None) -> np.ndarray:
    X = check_array(X, dtype=np.int64, ensure_2d=False)
    if X.ndim == 1:
        X = X[None, :]
    if X.size and X.min() < 0:
        raise ValueError("token ids must be non-negative")
    if vocab is not None and X.size and X.max() >= vocab:
        raise ValueError(f"token id {int(X.max())} outside vocabulary of {vocab}")
    return X


def _targets(y, shape) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(shape)
    return y


def _accuracy(pred, y) -> float:
    return float(np.mean(np.asarray(pred).reshape(-1) == np.asarray(y).reshape(-1)))


def _unwrap(model) -> MoEModel:
    if isinstance(model, MoEClassifier):
        check_is_fitted(model, "model_")
        return model.model_
    if isinstance(model, MoEModel):
        return model
    raise TypeError(f"expected an MoEModel or fitted MoEClassifier, got {type(model).__name__}")


class MoEClassifier(BaseEstimator):
    """Per-token classifier backed by the toy residual MoE stack."""

    def __init__(self, n_layers=4, n_experts=6, top_k=2, d_model=16, d_hidden=None, vocab=None,
                 classes=None, epochs=30, lr=1e-2, batch_size=32, random_state=0):
        self.n_layers = n_layers
        self.n_experts = n_experts
        self.top_k = top_k
        self.d_model = d_model
        self.d_hidden = d_hidden
        self.vocab = vocab
        self.classes = classes
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X = _tokens(X, self.vocab)
        y = _targets(y, X.shape)
        vocab = self.vocab if self.vocab is not None else int(X.max()) + 1
        classes = self.classes if self.classes is not None else int(y.max()) + 1
        config = ModelConfig(self.n_layers, self.n_experts, self.top_k, self.d_model, vocab, classes,
                             self.d_hidden)
        seed = 0 if self.random_state is None else int(self.random_state)
        result = pretrain_toy(init_model(config, seed=seed), TokenSet(X, y), self.epochs, self.lr,
                              batch_size=self.batch_size, seed=seed, train_embedding=True)
        self.model_ = result.model
        self.classes_ = np.arange(classes)
        self.loss_curve_ = result.losses
        return self

    @classmethod
    def from_model(cls, model: MoEModel) -> "MoEClassifier":
        c = model.config
        est = cls(c.n_layers, c.n_experts, c.top_k, c.d_model, c.d_hidden, c.vocab, c.classes)
        est.model_ = model
        est.classes_ = np.arange(c.classes)
        return est

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _tokens(X, self.model_.config.vocab)
        return model_forward(X.reshape(-1), self.model_).reshape(*X.shape, -1)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=-1)

    def score(self, X, y) -> float:
        return _accuracy(self.predict(X), y)


class _PrunerBase(BaseEstimator):
    """Shared predict/score for pruners; subclasses set ``mask_`` and ``decision_``."""

    def _model(self) -> MoEModel:
        return _unwrap(self.model)

    def _K(self, model: MoEModel) -> int:
        return n_to_prune(model.config.n_layers, model.config.n_experts, self.r)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "mask_")
        model = self._model()
        X = _tokens(X, model.config.vocab)
        return model_forward(X.reshape(-1), model, "masked", mask=self.mask_).reshape(*X.shape, -1)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=-1)

    def score(self, X, y) -> float:
        return _accuracy(self.predict(X), y)

    def transform(self, X) -> np.ndarray:
        """Masked logits, one row per token."""
        return self.decision_function(X).reshape(-1, self._model().config.classes)


class DiEPPruner(_PrunerBase):
    """Learns intra/inter-layer importance scores on calibration data and prunes globally."""

    def __init__(self, model=None, r=0.25, lam=0.01, lr_alpha=5e-3, lr_beta=5e-3, epochs=10,
                 batch_size=16, alt_ratio=3, schedule="cosine", router_weighted=False,
                 variant="normalized", random_state=0):
        self.model = model
        self.r = r
        self.lam = lam
        self.lr_alpha = lr_alpha
        self.lr_beta = lr_beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.alt_ratio = alt_ratio
        self.schedule = schedule
        self.router_weighted = router_weighted
        self.variant = variant
        self.random_state = random_state

    def fit(self, X, y):
        model = self._model()
        X = _tokens(X, model.config.vocab)
        y = _targets(y, X.shape)
        config = SearchConfig(self.lr_alpha, self.lr_beta, self.lam, self.epochs, self.batch_size,
                              self.alt_ratio, self.schedule, int(self.random_state or 0),
                              self.router_weighted)
        params, state, report = run_search(model, TokenSet(X, y), config)
        self.params_ = params
        self.scores_ = global_scores(params, self.variant).scores
        self.decision_ = select_bottom_k(global_scores(params, self.variant), self.r, model.config.top_k)
        self.mask_ = self.decision_.mask
        self.history_ = state
        self.convergence_ = report
        return self


class RandomPruner(_PrunerBase):
    def __init__(self, model=None, r=0.25, random_state=0):
        self.model = model
        self.r = r
        self.random_state = random_state

    def fit(self, X=None, y=None):
        model = self._model()
        c = model.config
        self.decision_ = random_prune(c.n_layers, c.n_experts, self._K(model), c.top_k,
                                      int(self.random_state or 0))
        self.mask_ = self.decision_.mask
        return self


class FrequencyPruner(_PrunerBase):
    def __init__(self, model=None, r=0.25):
        self.model = model
        self.r = r

    def fit(self, X, y=None):
        model = self._model()
        X = _tokens(X, model.config.vocab)
        self.decision_ = frequency_prune(model, X, self._K(model))
        self.counts_ = np.array(self.decision_.details["counts"])
        self.mask_ = self.decision_.mask
        return self


class ExhaustivePruner(_PrunerBase):
    def __init__(self, model=None, keep=2, max_subsets=10_000):
        self.model = model
        self.keep = keep
        self.max_subsets = max_subsets

    def fit(self, X, y=None):
        model = self._model()
        X = _tokens(X, model.config.vocab)
        self.decision_ = exhaustive_layer_search(model, X, self.keep, self.max_subsets)
        self.mask_ = self.decision_.mask
        return self


class AdaptiveSkipper(BaseEstimator):
    """Calibrates per-layer skip thresholds and predicts with top-2 skipping."""

    def __init__(self, model=None, mask=None, kernel="linear", mode="routed", post_skip_weight="one"):
        self.model = model
        self.mask = mask
        self.kernel = kernel
        self.mode = mode
        self.post_skip_weight = post_skip_weight

    def _mask(self) -> PruneMask | None:
        m = self.mask
        if isinstance(m, _PrunerBase):
            check_is_fitted(m, "mask_")
            return m.mask_
        if m is None or isinstance(m, PruneMask):
            return m
        return PruneMask(np.asarray(m, dtype=bool))

    def fit(self, X, y=None):
        model = _unwrap(self.model)
        X = _tokens(X, model.config.vocab)
        self.thresholds_ = calibrate(model, self._mask(), X, kernel=self.kernel, mode=self.mode)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "thresholds_")
        model = _unwrap(self.model)
        X = _tokens(X, model.config.vocab)
        logits, stats = skip_forward(X.reshape(-1), model, self._mask(), self.thresholds_,
                                     post_skip_weight=self.post_skip_weight)
        self.stats_ = stats
        return logits.reshape(*X.shape, -1)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=-1)

    def score(self, X, y) -> float:
        return _accuracy(self.predict(X), y)
