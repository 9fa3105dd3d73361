"""Centered kernel alignment between expert output features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import DegenerateFeatureError, DegenerateKernelError
from .moe import MoEModel, PruneMask, run_forward

__all__ = [
    "SimilarityMatrix",
    "adjacent_layer_similarity",
    "center",
    "cka",
    "expert_features",
    "expert_similarity",
    "gram",
    "hsic",
    "layer_inputs",
]

KERNELS = ("linear", "rbf")


@dataclass
class SimilarityMatrix:
    matrix: np.ndarray
    kernel: str

    @property
    def off_diagonal_mean(self) -> float:
        n = self.matrix.shape[0]
        if n < 2:
            return float("nan")
        return float(self.matrix[~np.eye(n, dtype=bool)].mean())


def gram(X, kernel: str = "linear") -> np.ndarray:
    """Kernel matrix of the rows of ``X``.

    The RBF bandwidth uses the median heuristic: sigma^2 is the median of
    the pairwise squared distances between distinct rows.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"need a feature matrix with at least 2 rows, got shape {X.shape}")
    if kernel == "linear":
        return X @ X.T
    if kernel == "rbf":
        sq = np.sum(X * X, axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (X @ X.T), 0.0)
        np.fill_diagonal(d2, 0.0)
        sigma2 = float(np.median(d2[np.triu_indices(X.shape[0], k=1)]))
        if sigma2 <= 0.0:
            raise DegenerateKernelError("median pairwise distance is zero; RBF bandwidth undefined")
        return np.exp(-d2 / (2.0 * sigma2))
    raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")


def center(K: np.ndarray) -> np.ndarray:
    """H K H with H = I - 11^T / n."""
    K = np.asarray(K, dtype=np.float64)
    return K - K.mean(axis=0, keepdims=True) - K.mean(axis=1, keepdims=True) + K.mean()


def _hsic_centered(Kc: np.ndarray, Lc: np.ndarray) -> float:
    n = Kc.shape[0]
    return float(np.sum(Kc * Lc) / (n - 1) ** 2)


def hsic(K, L) -> float:
    """trace(K H L H) / (n - 1)^2."""
    K = np.asarray(K, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if K.shape != L.shape or K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"kernel matrices must be square and equal-sized, got {K.shape} and {L.shape}")
    return _hsic_centered(center(K), center(L))


class _Prepared:
    """Centered Gram matrix plus its self-HSIC, reused across pairs."""

    __slots__ = ("Kc", "self_hsic")

    def __init__(self, X, kernel: str):
        K = gram(X, kernel)
        self.Kc = center(K)
        self.self_hsic = _hsic_centered(self.Kc, self.Kc)
        scale = np.sum(K * K) / (K.shape[0] - 1) ** 2
        if self.self_hsic <= 1e-15 * scale or self.self_hsic == 0.0:
            raise DegenerateFeatureError("feature matrix is constant across rows; CKA undefined")


def _cka_prepared(a: _Prepared, b: _Prepared) -> float:
    return _hsic_centered(a.Kc, b.Kc) / np.sqrt(a.self_hsic * b.self_hsic)


def cka(X, Y, kernel: str = "linear") -> float:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"row counts differ: {X.shape[0]} vs {Y.shape[0]}")
    return float(_cka_prepared(_Prepared(X, kernel), _Prepared(Y, kernel)))


def _tokens(calibration) -> np.ndarray:
    return np.asarray(getattr(calibration, "tokens", calibration)).reshape(-1)


def layer_inputs(model: MoEModel, calibration, mask: PruneMask | None = None) -> list[np.ndarray]:
    """Input to every MoE layer for the given tokens (full or masked routing)."""
    trace: list = []
    mode = "full" if mask is None else "masked"
    run_forward(ad.Tape(), model, _tokens(calibration), mode, mask=mask, trace=trace)
    return [rec.inputs for rec in trace]


def expert_features(model: MoEModel, calibration, mask: PruneMask | None = None) -> list[list[np.ndarray]]:
    """features[l][i]: output of expert i of layer l on that layer's inputs, before routing."""
    inputs = layer_inputs(model, calibration, mask)
    return [[ex(x) for ex in layer.experts] for layer, x in zip(model.layers, inputs)]


def _prepare_all(feats, kernel, layer):
    prepared = []
    for i, f in enumerate(feats):
        try:
            prepared.append(_Prepared(f, kernel))
        except (DegenerateFeatureError, DegenerateKernelError) as exc:
            raise type(exc)(f"layer {layer}, expert {i}: {exc}") from exc
    return prepared


def similarity_from_features(feats, kernel: str = "rbf", layer: int | None = None) -> SimilarityMatrix:
    prepared = _prepare_all(feats, kernel, layer)
    n = len(prepared)
    S = np.empty((n, n))
    for i in range(n):
        S[i, i] = _cka_prepared(prepared[i], prepared[i])
        for j in range(i + 1, n):
            S[i, j] = S[j, i] = _cka_prepared(prepared[i], prepared[j])
    return SimilarityMatrix(S, kernel)


def expert_similarity(
    model: MoEModel, layer: int, calibration, kernel: str = "rbf", mask: PruneMask | None = None
) -> SimilarityMatrix:
    """Pairwise CKA between all experts of ``layer`` on shared inputs."""
    if not 0 <= layer < model.config.n_layers:
        raise IndexError(f"layer {layer} out of range")
    if _tokens(calibration).size == 0:
        raise ValueError("calibration is empty")
    feats = expert_features(model, calibration, mask)[layer]
    return similarity_from_features(feats, kernel, layer)


def adjacent_layer_similarity(
    model: MoEModel, layer: int, calibration, kernel: str = "rbf", mask: PruneMask | None = None
) -> np.ndarray:
    """N x N CKA between experts of ``layer`` (rows) and ``layer + 1`` (columns)."""
    if not 0 <= layer or layer + 1 >= model.config.n_layers:
        raise IndexError(f"layer {layer} has no successor among {model.config.n_layers} layers")
    feats = expert_features(model, calibration, mask)
    a = _prepare_all(feats[layer], kernel, layer)
    b = _prepare_all(feats[layer + 1], kernel, layer + 1)
    return np.array([[_cka_prepared(x, y) for y in b] for x in a])
