"""Turning importance scores into a global pruning mask, plus baseline pruners."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cka import _Prepared, _cka_prepared, expert_features
from .exceptions import CapacityError, DegenerateFeatureError, FeasibilityError
from .moe import MoEModel, PruneMask, PruneParams, layer_forward_full, layer_forward_masked, run_forward

__all__ = [
    "PruneDecision",
    "ScoreTable",
    "activation_counts",
    "exhaustive_layer_search",
    "frequency_prune",
    "global_scores",
    "max_feasible",
    "merge_pruned",
    "n_to_prune",
    "random_prune",
    "select_bottom_k",
]


@dataclass
class ScoreTable:
    scores: np.ndarray
    variant: str

    def entries(self) -> list[tuple[int, int, float]]:
        L, N = self.scores.shape
        return [(l, i, float(self.scores[l, i])) for l in range(L) for i in range(N)]


@dataclass
class PruneDecision:
    mask: PruneMask
    n_pruned: int
    pruned: list[tuple[int, int]]
    method: str = "diep"
    details: dict = field(default_factory=dict)

    @property
    def retained(self) -> list[int]:
        return [int(c) for c in self.mask.retained_counts]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "K": self.n_pruned,
            "pruned": [list(p) for p in self.pruned],
            "retained_per_layer": self.retained,
            "mask": self.mask.to_grid(),
            "details": self.details,
        }


def global_scores(params: PruneParams, variant: str = "normalized") -> ScoreTable:
    """Per-expert importance: (softmaxed or raw) intra-layer score times layer scale."""
    if variant == "normalized":
        s = params.alpha_bar * params.beta[:, None]
    elif variant == "raw":
        s = params.alpha * params.beta[:, None]
    else:
        raise ValueError(f"unknown score variant {variant!r}")
    return ScoreTable(s, variant)


def n_to_prune(n_layers: int, n_experts: int, r: float) -> int:
    """K = N * L * r rounded half up."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"sparsity ratio must be in [0, 1], got {r}")
    return int(math.floor(n_layers * n_experts * r + 0.5))


def max_feasible(n_layers: int, n_experts: int, k: int) -> int:
    return n_layers * max(n_experts - k, 0)


def _prune_lowest(values: np.ndarray, K: int, k: int, method: str) -> PruneDecision:
    L, N = values.shape
    if K > max_feasible(L, N, k):
        raise FeasibilityError(K, max_feasible(L, N, k))
    layer_idx, expert_idx = np.divmod(np.arange(L * N), N)
    order = np.lexsort((expert_idx, layer_idx, values.reshape(-1)))
    retained = np.full(L, N)
    pruned = []
    for flat in order:
        if len(pruned) == K:
            break
        l, i = int(layer_idx[flat]), int(expert_idx[flat])
        if retained[l] > k:
            retained[l] -= 1
            pruned.append((l, i))
    return PruneDecision(PruneMask.from_pruned(L, N, pruned), K, pruned, method)


def select_bottom_k(scores: ScoreTable, r: float, k: int) -> PruneDecision:
    """Globally remove the K lowest-scoring experts, keeping >= k per layer."""
    s = np.asarray(scores.scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    K = n_to_prune(*s.shape, r)
    decision = _prune_lowest(s, K, k, "diep")
    decision.details["variant"] = scores.variant
    return decision


def random_prune(n_layers: int, n_experts: int, K: int, k: int, seed: int = 0) -> PruneDecision:
    """Uniform draw among all masks that prune K experts and keep >= k per layer."""
    if K > max_feasible(n_layers, n_experts, k):
        raise FeasibilityError(K, max_feasible(n_layers, n_experts, k))
    cap = max(n_experts - k, 0)
    # ways[l][c]: masks pruning c experts from layers l..L-1
    ways = [[0] * (K + 1) for _ in range(n_layers + 1)]
    ways[n_layers][0] = 1
    for l in range(n_layers - 1, -1, -1):
        for c in range(K + 1):
            ways[l][c] = sum(math.comb(n_experts, j) * ways[l + 1][c - j] for j in range(min(cap, c) + 1))
    rng = np.random.default_rng(seed)
    remaining = K
    pruned = []
    for l in range(n_layers):
        options = list(range(min(cap, remaining) + 1))
        counts = [math.comb(n_experts, j) * ways[l + 1][remaining - j] for j in options]
        total = sum(counts)
        j = int(rng.choice(options, p=[c / total for c in counts]))
        for i in sorted(rng.choice(n_experts, size=j, replace=False).tolist()):
            pruned.append((l, int(i)))
        remaining -= j
    return PruneDecision(PruneMask.from_pruned(n_layers, n_experts, pruned), K, pruned, "random")


def activation_counts(model: MoEModel, tokens, mask: PruneMask | None = None, k: int | None = None) -> np.ndarray:
    """L x N number of tokens routing to each expert (top-k selections)."""
    trace: list = []
    mode = "full" if mask is None else "masked"
    run_forward(ad.Tape(), model, np.asarray(getattr(tokens, "tokens", tokens)).reshape(-1),
                mode, mask=mask, k=k, trace=trace)
    return np.array([rec.selected.sum(axis=0) for rec in trace], dtype=np.int64)


def frequency_prune(model: MoEModel, calibration, K: int, k: int | None = None) -> PruneDecision:
    """Remove the K least-routed experts across all layers."""
    k = model.config.top_k if k is None else k
    tokens = np.asarray(getattr(calibration, "tokens", calibration)).reshape(-1)
    if tokens.size == 0:
        raise ValueError("calibration is empty")
    counts = activation_counts(model, tokens, k=k)
    decision = _prune_lowest(counts.astype(np.float64), K, k, "frequency")
    decision.details["counts"] = counts.tolist()
    return decision


def exhaustive_layer_search(
    model: MoEModel, calibration, keep: int, max_subsets: int = 10_000
) -> PruneDecision:
    """Per layer, keep the subset of experts that best reconstructs the layer output."""
    cfg = model.config
    L, N = cfg.n_layers, cfg.n_experts
    if not cfg.top_k <= keep <= N:
        raise CapacityError(f"keep={keep} must lie in [top_k={cfg.top_k}, {N}]")
    n_subsets = math.comb(N, keep)
    if n_subsets > max_subsets:
        raise CapacityError(f"C({N},{keep}) = {n_subsets} subsets exceeds guard of {max_subsets}")
    tokens = np.asarray(getattr(calibration, "tokens", calibration)).reshape(-1)
    trace: list = []
    run_forward(ad.Tape(), model, tokens, trace=trace)

    pruned: list[tuple[int, int]] = []
    evaluations, errors = [], []
    for l in range(L):
        x = trace[l].inputs
        reference = layer_forward_full(x, l, model)
        best, best_err, layer_errs = None, math.inf, []
        for subset in itertools.combinations(range(N), keep):
            row = np.zeros((L, N), dtype=bool)
            row[:, :] = True
            row[l] = False
            row[l, list(subset)] = True
            err = float(np.linalg.norm(layer_forward_masked(x, l, model, PruneMask(row)) - reference))
            layer_errs.append({"keep": list(subset), "error": err})
            if err < best_err:
                best, best_err = subset, err
        evaluations.append(len(layer_errs))
        errors.append(layer_errs)
        pruned.extend((l, i) for i in range(N) if i not in best)
    decision = PruneDecision(PruneMask.from_pruned(L, N, pruned), len(pruned), pruned, "exhaustive")
    decision.details = {"evaluations": evaluations, "errors": errors}
    return decision


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def merge_pruned(
    model: MoEModel, decision: PruneDecision, features=None, calibration=None, kernel: str = "linear"
) -> tuple[MoEModel, dict]:
    """Fold every pruned expert into its most CKA-similar retained expert of the same layer.

    Group members are averaged with softmax(CKA to the retained expert) weights.
    ``features[l][i]`` are expert outputs; computed from ``calibration`` if absent.
    Constant (degenerate) experts are treated as similarity 0.
    """
    if features is None:
        if calibration is None:
            raise ValueError("need features or calibration")
        features = expert_features(model, calibration)
    out = model.copy()
    groups = {}
    mask = decision.mask.mask
    for l in range(model.config.n_layers):
        kept = [i for i in np.nonzero(mask[l])[0]]
        gone = [i for i in np.nonzero(~mask[l])[0]]
        if not kept:
            raise CapacityError(f"layer {l} retains no experts")
        prepared = {}
        for i in kept + gone:
            try:
                prepared[i] = _Prepared(features[l][i], kernel)
            except DegenerateFeatureError:
                prepared[i] = None

        def sim(a, b):
            if prepared[a] is None or prepared[b] is None:
                return 0.0
            return float(_cka_prepared(prepared[a], prepared[b]))

        members = {int(i): [(int(i), 1.0)] for i in kept}
        for j in gone:
            sims = [sim(j, i) for i in kept]
            target = int(kept[int(np.argmax(sims))])
            members[target].append((int(j), max(sims)))
        for target, group in members.items():
            if len(group) == 1:
                continue
            w = _softmax(np.array([s for _, s in group]))
            src = [model.layers[l].experts[m].arrays() for m, _ in group]
            merged = {name: sum(wi * a[name] for wi, a in zip(w, src)) for name in src[0]}
            out.layers[l].experts[target] = type(model.layers[l].experts[target])(**merged)
            groups[(l, target)] = {"members": [m for m, _ in group], "weights": w.tolist()}
    return out, groups
