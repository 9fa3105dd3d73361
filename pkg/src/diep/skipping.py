"""Adaptive expert skipping for top-2 routing.

Per layer, the second routed expert e1 is bypassed when its routing weight is
strictly below ``gamma * w_e0``.  ``gamma = gamma1 * gamma2`` where gamma1 is
the median weight ratio on calibration data and gamma2 compares the CKA of
routed expert pairs to the mean CKA of all retained pairs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cka import _Prepared, _cka_prepared
from .exceptions import ComparisonError, ConfigError, DegenerateFeatureError, DegenerateKernelError
from .moe import MoEModel, PruneMask, run_forward

__all__ = [
    "InferenceStats",
    "SkipThresholds",
    "calibrate",
    "calibrate_gamma1",
    "calibrate_gamma2",
    "skip_forward",
    "throughput_report",
]


@dataclass
class SkipThresholds:
    gamma1: np.ndarray
    gamma2: np.ndarray

    def __post_init__(self):
        self.gamma1 = np.asarray(self.gamma1, dtype=np.float64).reshape(-1)
        self.gamma2 = np.asarray(self.gamma2, dtype=np.float64).reshape(-1)
        if self.gamma1.shape != self.gamma2.shape:
            raise ConfigError("gamma", "gamma1 and gamma2 lengths differ")
        if np.any(self.gamma1 < 0) or np.any(self.gamma1 > 1):
            raise ConfigError("gamma1", "must lie in [0, 1]")
        if np.any(self.gamma2 < 0):
            raise ConfigError("gamma2", "must be >= 0")

    @property
    def gamma(self) -> np.ndarray:
        return self.gamma1 * self.gamma2

    @classmethod
    def fixed(cls, gamma, n_layers: int | None = None) -> "SkipThresholds":
        """Thresholds with a prescribed product (gamma2 = 1 unless gamma > 1)."""
        g = np.asarray(gamma, dtype=np.float64)
        if g.ndim == 0:
            if n_layers is None:
                raise ValueError("n_layers needed for a scalar gamma")
            g = np.full(n_layers, float(g))
        g1 = np.minimum(g, 1.0)
        g2 = np.where(g > 1.0, g, 1.0)
        return cls(g1, g2)

    def to_dict(self) -> dict:
        return {"gamma1": self.gamma1.tolist(), "gamma2": self.gamma2.tolist(), "gamma": self.gamma.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "SkipThresholds":
        return cls(data["gamma1"], data["gamma2"])


@dataclass
class InferenceStats:
    tokens: int
    evaluated: np.ndarray
    skipped: np.ndarray
    stream_digest: str
    divergence: float = 0.0
    logits: np.ndarray | None = field(default=None, repr=False)

    @property
    def experts_per_token(self) -> float:
        if self.tokens == 0:
            return 0.0
        return float(self.evaluated.sum() / (self.tokens * len(self.evaluated)))

    def to_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "evaluated_per_layer": self.evaluated.tolist(),
            "skipped_per_layer": self.skipped.tolist(),
            "experts_per_token": self.experts_per_token,
            "divergence": self.divergence,
            "stream_digest": self.stream_digest,
        }


def _require_top2(model: MoEModel, k: int | None = None) -> None:
    k = model.config.top_k if k is None else k
    if k != 2:
        raise ConfigError("top_k", f"adaptive skipping is defined for top-2 routing only, got k={k}")


def _flat_tokens(data) -> np.ndarray:
    return np.asarray(getattr(data, "tokens", data)).reshape(-1)


def _masked_trace(model: MoEModel, mask: PruneMask | None, tokens):
    trace: list = []
    if mask is None:
        mask = PruneMask.full(model.config.n_layers, model.config.n_experts)
    logits = run_forward(ad.Tape(), model, tokens, "masked", mask=mask, trace=trace)
    return np.array(logits.data), trace


def _top2(weights: np.ndarray, selected: np.ndarray):
    """(e0, e1, w0, w1) per row with w0 >= w1; lower index first on ties."""
    order = np.argsort(-np.where(selected, weights, -np.inf), axis=1, kind="stable")[:, :2]
    rows = np.arange(weights.shape[0])
    e0, e1 = order[:, 0], order[:, 1]
    return e0, e1, weights[rows, e0], weights[rows, e1]


def calibrate_gamma1(model: MoEModel, mask: PruneMask | None, calibration) -> np.ndarray:
    """Per-layer median of w_e1 / w_e0 over calibration tokens."""
    _require_top2(model)
    tokens = _flat_tokens(calibration)
    if tokens.size == 0:
        raise ValueError("calibration is empty")
    _, trace = _masked_trace(model, mask, tokens)
    out = []
    for rec in trace:
        _, _, w0, w1 = _top2(rec.weights, rec.selected)
        out.append(float(np.median(w1 / w0)))
    return np.array(out)


def calibrate_gamma2(
    model: MoEModel,
    mask: PruneMask | None,
    calibration,
    kernel: str = "linear",
    mode: str = "routed",
    min_tokens: int = 3,
) -> np.ndarray:
    """Per-layer ratio of routed-pair CKA to the mean CKA over all retained pairs.

    ``mode="routed"`` computes each routed pair's CKA on the tokens sent to
    that pair (falling back to the full calibration set when fewer than
    ``min_tokens`` tokens, or constant features, make the subset unusable);
    ``mode="batch"`` always uses the full set.  The numerator averages over
    tokens, i.e. pairs are weighted by how often they are routed.
    """
    _require_top2(model)
    if mode not in ("routed", "batch"):
        raise ConfigError("gamma2_mode", f"unknown mode {mode!r}")
    tokens = _flat_tokens(calibration)
    if tokens.size == 0:
        raise ValueError("calibration is empty")
    if mask is None:
        mask = PruneMask.full(model.config.n_layers, model.config.n_experts)
    _, trace = _masked_trace(model, mask, tokens)
    out = []
    for l, rec in enumerate(trace):
        kept = [int(i) for i in np.nonzero(mask.mask[l])[0]]
        if len(kept) < 2:
            raise ConfigError("mask", f"layer {l} retains fewer than 2 experts")
        feats = {i: model.layers[l].experts[i](rec.inputs) for i in kept}
        prepared = {}
        for i in kept:
            try:
                prepared[i] = _Prepared(feats[i], kernel)
            except (DegenerateFeatureError, DegenerateKernelError) as exc:
                raise type(exc)(f"layer {l}, expert {i}: {exc}") from exc
        full = {}
        for a_pos, a in enumerate(kept):
            for b in kept[a_pos + 1:]:
                full[(a, b)] = _cka_prepared(prepared[a], prepared[b])
        denominator = float(np.mean(list(full.values())))
        if denominator <= 0:
            raise DegenerateFeatureError(f"layer {l}: mean pairwise CKA is zero")

        e0, e1, _, _ = _top2(rec.weights, rec.selected)
        pairs = np.stack([np.minimum(e0, e1), np.maximum(e0, e1)], axis=1)
        uniq, inverse, counts = np.unique(pairs, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        numerator = 0.0
        for p, (a, b) in enumerate(uniq):
            a, b = int(a), int(b)
            value = full[(a, b)]
            if mode == "routed" and counts[p] >= min_tokens:
                rows = inverse == p
                try:
                    value = _cka_prepared(_Prepared(feats[a][rows], kernel), _Prepared(feats[b][rows], kernel))
                except (DegenerateFeatureError, DegenerateKernelError):
                    value = full[(a, b)]
            numerator += counts[p] * value
        numerator /= tokens.size
        out.append(float(numerator / denominator))
    return np.array(out)


def calibrate(model: MoEModel, mask: PruneMask | None, calibration, kernel: str = "linear",
              mode: str = "routed") -> SkipThresholds:
    return SkipThresholds(
        calibrate_gamma1(model, mask, calibration),
        calibrate_gamma2(model, mask, calibration, kernel=kernel, mode=mode),
    )


def _digest(tokens: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(tokens, dtype=np.int64).tobytes()).hexdigest()[:16]


def skip_forward(
    tokens,
    model: MoEModel,
    mask: PruneMask | None,
    thresholds: SkipThresholds,
    k: int = 2,
    post_skip_weight: str = "one",
) -> tuple[np.ndarray, InferenceStats]:
    """Masked top-2 forward that drops e1 whenever w_e1 < gamma * w_e0.

    ``post_skip_weight="one"`` gives e0 the whole token; ``"renormalized"``
    keeps e0's two-way renormalized gate.
    """
    _require_top2(model, k)
    if post_skip_weight not in ("one", "renormalized"):
        raise ConfigError("post_skip_weight", f"unknown convention {post_skip_weight!r}")
    cfg = model.config
    gamma = thresholds.gamma
    if gamma.shape != (cfg.n_layers,):
        raise ConfigError("gamma", f"expected {cfg.n_layers} per-layer thresholds, got {gamma.shape}")
    tokens = _flat_tokens(tokens)
    if mask is None:
        mask = PruneMask.full(cfg.n_layers, cfg.n_experts)
    evaluated = np.zeros(cfg.n_layers, dtype=np.int64)
    skipped = np.zeros(cfg.n_layers, dtype=np.int64)
    tape = ad.Tape()

    def hook(l, weights, selected, gates):
        e0, e1, w0, w1 = _top2(weights, selected)
        skip = w1 < gamma[l] * w0
        n_skip = int(skip.sum())
        skipped[l] = n_skip
        evaluated[l] = 2 * weights.shape[0] - n_skip
        if n_skip == 0:
            return gates
        g = np.array(gates.data)
        rows = np.nonzero(skip)[0]
        g[rows, e1[rows]] = 0.0
        if post_skip_weight == "one":
            g[rows, e0[rows]] = 1.0
        return tape.const(g)

    logits = np.array(run_forward(tape, model, tokens, "masked", mask=mask, k=2, gate_hook=hook).data)
    reference, _ = _masked_trace(model, mask, tokens)
    divergence = float(np.mean(np.linalg.norm(logits - reference, axis=1))) if tokens.size else 0.0
    stats = InferenceStats(int(tokens.size), evaluated, skipped, _digest(tokens), divergence, logits)
    return logits, stats


def throughput_report(with_skip: InferenceStats, without_skip: InferenceStats, targets=None) -> dict:
    """Expert-evaluation ratio, logit divergence and accuracy change between two runs."""
    if with_skip.stream_digest != without_skip.stream_digest or with_skip.tokens != without_skip.tokens:
        raise ComparisonError("statistics come from different token streams")
    ev_with = int(with_skip.evaluated.sum())
    ev_without = int(without_skip.evaluated.sum())
    report = {
        "evaluations_with": ev_with,
        "evaluations_without": ev_without,
        "evaluation_ratio": ev_without / ev_with if ev_with else float("inf"),
        "experts_per_token_with": with_skip.experts_per_token,
        "experts_per_token_without": without_skip.experts_per_token,
        "divergence": 0.0,
    }
    if with_skip.logits is not None and without_skip.logits is not None and with_skip.tokens:
        report["divergence"] = float(np.mean(np.linalg.norm(with_skip.logits - without_skip.logits, axis=1)))
    if targets is not None and with_skip.logits is not None and without_skip.logits is not None:
        t = np.asarray(targets).reshape(-1)
        acc_with = float(np.mean(np.argmax(with_skip.logits, axis=1) == t))
        acc_without = float(np.mean(np.argmax(without_skip.logits, axis=1) == t))
        report.update(accuracy_with=acc_with, accuracy_without=acc_without, accuracy_delta=acc_with - acc_without)
    return report
