"""Toy residual mixture-of-experts stack with full, masked and relaxed forward modes.

The model is per-token: embedding lookup, ``n_layers`` residual MoE layers,
then a linear classification head.  All three forward modes share one tape
based implementation so that gradients are available whenever needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .exceptions import CapacityError, ConfigError

__all__ = [
    "CloneGroup",
    "Expert",
    "LayerTrace",
    "MoELayer",
    "MoEModel",
    "ModelConfig",
    "PruneMask",
    "PruneParams",
    "layer_forward_full",
    "layer_forward_masked",
    "layer_forward_relaxed",
    "model_forward",
    "router_weights",
    "run_forward",
    "topk_mask",
    "topk_route",
]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_experts: int
    top_k: int
    d_model: int
    vocab: int
    classes: int
    d_hidden: int | None = None
    renormalize: bool = True

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers", f"must be >= 1, got {self.n_layers}")
        if self.n_experts < 1:
            raise ConfigError("n_experts", f"must be >= 1, got {self.n_experts}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError("top_k", f"must be in [1, {self.n_experts}], got {self.top_k}")
        if self.d_model < 1:
            raise ConfigError("d_model", f"must be >= 1, got {self.d_model}")
        if self.vocab < 1:
            raise ConfigError("vocab", f"must be >= 1, got {self.vocab}")
        if self.classes < 1:
            raise ConfigError("classes", f"must be >= 1, got {self.classes}")
        if self.d_hidden is not None and self.d_hidden < 1:
            raise ConfigError("d_hidden", f"must be >= 1, got {self.d_hidden}")

    @property
    def hidden(self) -> int:
        return self.d_hidden if self.d_hidden is not None else 2 * self.d_model

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_experts": self.n_experts,
            "top_k": self.top_k,
            "d_model": self.d_model,
            "vocab": self.vocab,
            "classes": self.classes,
            "d_hidden": self.d_hidden,
            "renormalize": self.renormalize,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class Expert:
    w_up: np.ndarray
    b_up: np.ndarray
    w_down: np.ndarray
    b_down: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x @ self.w_up + self.b_up, 0.0) @ self.w_down + self.b_down

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w_up": self.w_up, "b_up": self.b_up, "w_down": self.w_down, "b_down": self.b_down}

    def copy(self) -> "Expert":
        return Expert(*(a.copy() for a in self.arrays().values()))


@dataclass
class MoELayer:
    router: np.ndarray
    experts: list[Expert]


@dataclass(frozen=True)
class CloneGroup:
    """Bookkeeping for experts planted as copies of ``source``."""

    layer: int
    source: int
    clones: tuple[int, ...]
    sigma: float

    @property
    def members(self) -> tuple[int, ...]:
        return (self.source, *self.clones)

    def to_dict(self) -> dict:
        return {"layer": self.layer, "source": self.source, "clones": list(self.clones), "sigma": self.sigma}

    @classmethod
    def from_dict(cls, data: dict) -> "CloneGroup":
        return cls(int(data["layer"]), int(data["source"]), tuple(int(c) for c in data["clones"]), float(data["sigma"]))


@dataclass
class MoEModel:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[MoELayer]
    head: np.ndarray
    head_bias: np.ndarray
    clone_groups: tuple[CloneGroup, ...] = field(default_factory=tuple)

    def __post_init__(self):
        cfg = self.config
        if len(self.layers) != cfg.n_layers:
            raise ConfigError("layers", f"expected {cfg.n_layers} layers, got {len(self.layers)}")
        for l, layer in enumerate(self.layers):
            if len(layer.experts) != cfg.n_experts:
                raise ConfigError(
                    f"layers[{l}].experts", f"expected {cfg.n_experts} experts, got {len(layer.experts)}"
                )

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "MoEModel":
        rng = np.random.default_rng(seed)
        d, h = config.d_model, config.hidden
        layers = []
        for _ in range(config.n_layers):
            router = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, config.n_experts))
            experts = [
                Expert(
                    rng.normal(0.0, np.sqrt(2.0 / d), size=(d, h)),
                    np.zeros(h),
                    rng.normal(0.0, np.sqrt(1.0 / h), size=(h, d)),
                    np.zeros(d),
                )
                for _ in range(config.n_experts)
            ]
            layers.append(MoELayer(router, experts))
        return cls(
            config=config,
            embedding=rng.normal(0.0, 1.0, size=(config.vocab, d)),
            layers=layers,
            head=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, config.classes)),
            head_bias=np.zeros(config.classes),
        )

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat, ordered name -> array view of every weight."""
        out = {"embedding": self.embedding}
        for l, layer in enumerate(self.layers):
            out[f"layers.{l}.router"] = layer.router
            for i, ex in enumerate(layer.experts):
                for name, arr in ex.arrays().items():
                    out[f"layers.{l}.experts.{i}.{name}"] = arr
        out["head"] = self.head
        out["head_bias"] = self.head_bias
        return out

    @classmethod
    def from_parameters(
        cls, config: ModelConfig, params: dict[str, np.ndarray], clone_groups=()
    ) -> "MoEModel":
        layers = []
        for l in range(config.n_layers):
            experts = [
                Expert(*(np.array(params[f"layers.{l}.experts.{i}.{n}"], dtype=np.float64)
                         for n in ("w_up", "b_up", "w_down", "b_down")))
                for i in range(config.n_experts)
            ]
            layers.append(MoELayer(np.array(params[f"layers.{l}.router"], dtype=np.float64), experts))
        return cls(
            config=config,
            embedding=np.array(params["embedding"], dtype=np.float64),
            layers=layers,
            head=np.array(params["head"], dtype=np.float64),
            head_bias=np.array(params["head_bias"], dtype=np.float64),
            clone_groups=tuple(clone_groups),
        )

    def with_parameters(self, params: dict[str, np.ndarray]) -> "MoEModel":
        merged = {**self.parameters(), **params}
        return MoEModel.from_parameters(self.config, merged, self.clone_groups)

    def copy(self) -> "MoEModel":
        return MoEModel.from_parameters(
            self.config, {k: v.copy() for k, v in self.parameters().items()}, self.clone_groups
        )

    def with_config(self, **changes) -> "MoEModel":
        """Same weights under a modified routing configuration (e.g. top_k)."""
        return MoEModel.from_parameters(replace(self.config, **changes), self.parameters(), self.clone_groups)


@dataclass
class PruneParams:
    """Intra-layer logits ``alpha`` (L x N) and inter-layer scales ``beta`` (L)."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.array(self.alpha, dtype=np.float64)
        self.beta = np.array(self.beta, dtype=np.float64)
        if self.alpha.ndim != 2 or self.beta.shape != (self.alpha.shape[0],):
            raise ConfigError("params", f"alpha {self.alpha.shape} / beta {self.beta.shape} mismatch")
        if not (np.all(np.isfinite(self.alpha)) and np.all(np.isfinite(self.beta))):
            raise ConfigError("params", "alpha and beta must be finite")

    @classmethod
    def init(cls, n_layers: int, n_experts: int) -> "PruneParams":
        return cls(np.zeros((n_layers, n_experts)), np.ones(n_layers))

    @property
    def alpha_bar(self) -> np.ndarray:
        z = self.alpha - self.alpha.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def copy(self) -> "PruneParams":
        return PruneParams(self.alpha.copy(), self.beta.copy())


@dataclass
class PruneMask:
    """Binary L x N retention matrix; zero entries form the pruned set."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2 or not np.all((m == 0) | (m == 1)):
            raise ConfigError("mask", "must be a 2-D 0/1 matrix")
        self.mask = m.astype(bool)

    @classmethod
    def full(cls, n_layers: int, n_experts: int) -> "PruneMask":
        return cls(np.ones((n_layers, n_experts), dtype=bool))

    @classmethod
    def from_pruned(cls, n_layers: int, n_experts: int, pruned) -> "PruneMask":
        m = np.ones((n_layers, n_experts), dtype=bool)
        for l, i in pruned:
            m[l, i] = False
        return cls(m)

    @property
    def pruned(self) -> list[tuple[int, int]]:
        return [(int(l), int(i)) for l, i in zip(*np.nonzero(~self.mask))]

    @property
    def retained_counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def check(self, k: int) -> None:
        counts = self.retained_counts
        bad = np.nonzero(counts < k)[0]
        if bad.size:
            raise CapacityError(f"layer {int(bad[0])} retains {int(counts[bad[0]])} experts, top_k={k}")

    def to_grid(self) -> list[list[int]]:
        return self.mask.astype(int).tolist()


# -- routing helpers -------------------------------------------------------

def topk_mask(weights: np.ndarray, k: int, available: np.ndarray | None = None) -> np.ndarray:
    """Boolean selection of the k largest weights per row, lowest index on ties."""
    w = np.atleast_2d(weights)
    avail = np.ones(w.shape, dtype=bool) if available is None else np.broadcast_to(available, w.shape)
    n_avail = avail.sum(axis=1)
    if np.any(n_avail < k):
        raise CapacityError(f"top-{k} routing needs {k} available experts, found {int(n_avail.min())}")
    order = np.argsort(-np.where(avail, w, -np.inf), axis=1, kind="stable")[:, :k]
    sel = np.zeros(w.shape, dtype=bool)
    np.put_along_axis(sel, order, True, axis=1)
    return sel


def topk_route(w, k: int, available=None, renormalize: bool = True) -> list[tuple[int, float]]:
    """Top-k (index, weight) pairs of one routing-weight vector, in descending weight order."""
    w = np.asarray(w, dtype=np.float64)
    sel = topk_mask(w, k, available)[0]
    idx = [int(i) for i in np.argsort(-np.where(sel, w, -np.inf), kind="stable")[:k]]
    total = float(np.sum(w[idx])) if renormalize else 1.0
    return [(i, float(w[i]) / total) for i in idx]


def router_weights(x, layer: int, model: MoEModel, available=None) -> np.ndarray:
    """Softmax routing weights for a token representation (or a batch of them)."""
    if not 0 <= layer < model.config.n_layers:
        raise IndexError(f"layer {layer} out of range for {model.config.n_layers} layers")
    x = np.asarray(x, dtype=np.float64)
    tape = ad.Tape()
    logits = ad.matmul(tape.const(np.atleast_2d(x)), tape.const(model.layers[layer].router))
    mask = None if available is None else np.broadcast_to(np.asarray(available, dtype=bool), logits.shape)
    w = ad.softmax(logits, mask=mask).data
    return w[0] if x.ndim == 1 else np.array(w)


# -- tape forward ----------------------------------------------------------

@dataclass
class LayerTrace:
    """Per-layer quantities captured during a forward pass."""

    inputs: np.ndarray
    weights: np.ndarray | None = None
    selected: np.ndarray | None = None
    gates: np.ndarray | None = None


def bind(tape: ad.Tape, model: MoEModel, trainable=False) -> dict[str, ad.Tensor]:
    """Put every model array on ``tape``; ``trainable`` is a bool or a set of names."""
    out = {}
    for name, arr in model.parameters().items():
        is_param = trainable if isinstance(trainable, bool) else name in trainable
        out[name] = tape.param(arr) if is_param else tape.const(arr)
    return out


def _expert(h: ad.Tensor, t: dict, prefix: str) -> ad.Tensor:
    z = ad.relu(ad.add_bias(ad.matmul(h, t[prefix + "w_up"]), t[prefix + "b_up"]))
    return ad.add_bias(ad.matmul(z, t[prefix + "w_down"]), t[prefix + "b_down"])


def _mix(h: ad.Tensor, l: int, t: dict, gates: ad.Tensor, n_experts: int) -> ad.Tensor:
    out = None
    active = np.any(gates.data != 0.0, axis=0)
    for i in range(n_experts):
        if not active[i]:
            continue
        term = ad.row_scale(_expert(h, t, f"layers.{l}.experts.{i}."), ad.column(gates, i))
        out = term if out is None else ad.add(out, term)
    return out


GateHook = Callable[[int, np.ndarray, np.ndarray, ad.Tensor], ad.Tensor]


def run_forward(
    tape: ad.Tape,
    model: MoEModel,
    tokens,
    mode: str = "full",
    *,
    mask: PruneMask | None = None,
    relax: tuple[ad.Tensor, ad.Tensor] | None = None,
    k: int | None = None,
    bound: dict | None = None,
    trace: list | None = None,
    gate_hook: GateHook | None = None,
    router_weighted: bool = False,
    embedded: ad.Tensor | None = None,
) -> ad.Tensor:
    """Record a forward pass on ``tape`` and return the logits tensor.

    ``mode`` is ``"full"``, ``"masked"`` (needs ``mask``) or ``"relaxed"``
    (needs ``relax = (alpha, beta)`` tensors).  ``gate_hook`` may replace the
    routing gates of a layer; it receives (layer, weights, selected, gates).
    """
    cfg = model.config
    k = cfg.top_k if k is None else k
    if mode not in ("full", "masked", "relaxed"):
        raise ValueError(f"unknown forward mode {mode!r}")
    if mode == "masked" and mask is None:
        raise ValueError("masked mode needs a mask")
    if mode == "relaxed" and relax is None:
        raise ValueError("relaxed mode needs alpha/beta tensors")
    t = bound if bound is not None else bind(tape, model)

    if embedded is None:
        tokens = _check_tokens(tokens, cfg.vocab)
        h = ad.take_rows(t["embedding"], tokens)
    else:
        h = embedded
    for l in range(cfg.n_layers):
        rec = LayerTrace(inputs=h.data) if trace is not None else None
        logits = ad.matmul(h, t[f"layers.{l}.router"])
        if mode == "relaxed":
            alpha, beta = relax
            abar = ad.softmax(ad.row(alpha, l))
            w = ad.softmax(logits) if router_weighted else None
            mixed = None
            for i in range(cfg.n_experts):
                y = _expert(h, t, f"layers.{l}.experts.{i}.")
                if w is not None:
                    y = ad.row_scale(y, ad.column(w, i))
                term = ad.scale_by(ad.element(abar, i), y)
                mixed = term if mixed is None else ad.add(mixed, term)
            h = ad.add(h, ad.scale_by(ad.element(beta, l), mixed))
        else:
            available = mask.mask[l] if mode == "masked" else np.ones(cfg.n_experts, dtype=bool)
            avail = np.broadcast_to(available, logits.shape)
            w = ad.softmax(logits, mask=avail)
            sel = topk_mask(w.data, k, available)
            if cfg.renormalize:
                gates = ad.softmax(logits, mask=sel)
            else:
                gates = ad.mul(w, tape.const(sel.astype(np.float64)))
            if gate_hook is not None:
                gates = gate_hook(l, w.data, sel, gates)
            if rec is not None:
                rec.weights, rec.selected, rec.gates = np.array(w.data), sel, np.array(gates.data)
            h = ad.add(h, _mix(h, l, t, gates, cfg.n_experts))
        if rec is not None:
            trace.append(rec)
    return ad.add_bias(ad.matmul(h, t["head"]), t["head_bias"])


def _check_tokens(tokens, vocab: int) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise TypeError(f"tokens must be integers, got dtype {arr.dtype}")
    arr = arr.astype(np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab):
        raise IndexError(f"token index out of range for vocab of {vocab}")
    return arr


def model_forward(
    tokens,
    model: MoEModel,
    mode: str = "full",
    *,
    mask: PruneMask | None = None,
    params: PruneParams | None = None,
    k: int | None = None,
    router_weighted: bool = False,
) -> np.ndarray:
    """Logits (n_tokens x classes) for a flat or batched array of token ids."""
    tape = ad.Tape()
    relax = None
    if mode == "relaxed":
        if params is None:
            raise ValueError("relaxed mode needs params")
        relax = (tape.const(params.alpha), tape.const(params.beta))
    out = run_forward(tape, model, tokens, mode, mask=mask, relax=relax, k=k, router_weighted=router_weighted)
    return np.array(out.data)


def _single_layer(x, layer: int, model: MoEModel, mode: str, **kw) -> np.ndarray:
    if not 0 <= layer < model.config.n_layers:
        raise IndexError(f"layer {layer} out of range for {model.config.n_layers} layers")
    x = np.asarray(x, dtype=np.float64)
    sub = MoEModel(
        config=replace(model.config, n_layers=1),
        embedding=np.zeros((1, model.config.d_model)),
        layers=[model.layers[layer]],
        head=np.eye(model.config.d_model),
        head_bias=np.zeros(model.config.d_model),
    )
    tape = ad.Tape()
    t = bind(tape, sub)
    mask = kw.pop("mask", None)
    if mask is not None:
        mask = PruneMask(mask.mask[layer:layer + 1])
    params = kw.pop("params", None)
    relax = None
    if params is not None:
        relax = (tape.const(params.alpha[layer:layer + 1]), tape.const(params.beta[layer:layer + 1]))
    h = tape.const(np.atleast_2d(x))
    # head is the identity, so logits are the layer output exactly
    out = run_forward(tape, sub, None, mode, mask=mask, relax=relax, bound=t, embedded=h, **kw)
    y = np.array(out.data)
    return y[0] if x.ndim == 1 else y


def layer_forward_full(x, layer: int, model: MoEModel, k: int | None = None) -> np.ndarray:
    return _single_layer(x, layer, model, "full", k=k)


def layer_forward_masked(x, layer: int, model: MoEModel, mask: PruneMask, k: int | None = None) -> np.ndarray:
    return _single_layer(x, layer, model, "masked", mask=mask, k=k)


def layer_forward_relaxed(
    x, layer: int, model: MoEModel, params: PruneParams, router_weighted: bool = False
) -> np.ndarray:
    return _single_layer(x, layer, model, "relaxed", params=params, router_weighted=router_weighted)
