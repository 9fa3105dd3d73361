"""Learning intra-layer (alpha) and inter-layer (beta) importance scores.

The objective is cross-entropy of the relaxed model plus ``lam`` times the
Frobenius distance between relaxed and full-model logits.  Model weights are
frozen; alpha and beta are updated by plain gradient descent in alternation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import TokenSet
from .exceptions import ConfigError, OptimizationError, SpecError
from .moe import MoEModel, PruneParams, bind, run_forward

logger = logging.getLogger(__name__)

__all__ = [
    "ConvergenceReport",
    "ObjectiveValue",
    "SearchConfig",
    "TrainState",
    "alpha_step",
    "beta_step",
    "block_gradient",
    "convergence_diagnostics",
    "estimate_lipschitz",
    "full_batch_descent",
    "reconstruction_penalty",
    "run_search",
    "teacher_logits",
    "total_objective",
]


@dataclass(frozen=True)
class SearchConfig:
    lr_alpha: float = 5e-3
    lr_beta: float = 5e-3
    lam: float = 0.01
    epochs: int = 10
    batch_size: int = 16
    alt_ratio: int = 3
    schedule: str = "cosine"
    seed: int = 0
    router_weighted: bool = False

    def __post_init__(self):
        if not self.lr_alpha > 0:
            raise ConfigError("lr_alpha", "must be > 0")
        if not self.lr_beta > 0:
            raise ConfigError("lr_beta", "must be > 0")
        if self.lam < 0:
            raise ConfigError("lam", "must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.alt_ratio < 1:
            raise ConfigError("alt_ratio", "must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("schedule", f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def learning_rate(self, base: float, step: int, total: int) -> float:
        if self.schedule == "constant" or total <= 0:
            return base
        return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


@dataclass
class TrainState:
    params: PruneParams
    t: int = 0
    step: int = 0
    losses: list[float] = field(default_factory=list)
    ce: list[float] = field(default_factory=list)
    phi: list[float] = field(default_factory=list)
    kinds: list[str] = field(default_factory=list)
    alpha_norms: list[float] = field(default_factory=list)
    beta_norms: list[float] = field(default_factory=list)
    alpha_epochs: list[int] = field(default_factory=list)
    beta_epochs: list[int] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    epoch: int = 0

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "steps": self.step,
            "losses": list(self.losses),
            "ce": list(self.ce),
            "phi": list(self.phi),
            "kinds": list(self.kinds),
            "alpha_norms": list(self.alpha_norms),
            "beta_norms": list(self.beta_norms),
            "epoch_losses": list(self.epoch_losses),
        }


@dataclass
class ConvergenceReport:
    monotone: bool
    violations: int
    loss_curve: list[float]
    final_alpha_norm: float
    final_beta_norm: float
    alpha_ratio: float
    beta_ratio: float
    vanishing: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ObjectiveValue:
    """Recorded objective: total loss tensor plus its parts."""

    tape: ad.Tape
    loss: ad.Tensor
    alpha: ad.Tensor
    beta: ad.Tensor
    ce: float
    phi: float

    @property
    def value(self) -> float:
        return self.loss.item()


def teacher_logits(model: MoEModel, tokens) -> np.ndarray:
    """Full-mode logits, detached from any tape."""
    tape = ad.Tape()
    return np.array(run_forward(tape, model, tokens).data)


def total_objective(
    tokens,
    targets,
    model: MoEModel,
    params: PruneParams,
    lam: float,
    *,
    teacher: np.ndarray | None = None,
    wrt=("alpha", "beta"),
    router_weighted: bool = False,
) -> ObjectiveValue:
    """Cross-entropy of the relaxed model plus ``lam`` times the reconstruction penalty."""
    tokens = np.asarray(tokens).reshape(-1)
    targets = np.asarray(targets).reshape(-1)
    if teacher is None:
        teacher = teacher_logits(model, tokens)
    tape = ad.Tape()
    alpha = tape.param(params.alpha) if "alpha" in wrt else tape.const(params.alpha)
    beta = tape.param(params.beta) if "beta" in wrt else tape.const(params.beta)
    logits = run_forward(
        tape, model, tokens, "relaxed", relax=(alpha, beta), bound=bind(tape, model),
        router_weighted=router_weighted,
    )
    ce = ad.cross_entropy(logits, targets)
    diff = ad.sub(logits, tape.const(np.reshape(teacher, logits.shape)))
    phi = ad.scalar_multiply(ad.frobenius_norm(diff), 1.0 / math.sqrt(tokens.size))
    loss = ad.add(ce, ad.scalar_multiply(phi, lam))
    return ObjectiveValue(tape, loss, alpha, beta, ce.item(), phi.item())


def reconstruction_penalty(tokens, model: MoEModel, params: PruneParams, teacher=None,
                           router_weighted: bool = False) -> float:
    """Frobenius distance between relaxed and full logits over sqrt(token count)."""
    tokens = np.asarray(tokens).reshape(-1)
    if teacher is None:
        teacher = teacher_logits(model, tokens)
    alpha, beta = _const_pair(params)
    relaxed = np.array(run_forward(
        alpha.tape, model, tokens, "relaxed", relax=(alpha, beta), router_weighted=router_weighted
    ).data)
    return float(np.linalg.norm(relaxed - teacher) / math.sqrt(tokens.size))


def _const_pair(params: PruneParams):
    tape = ad.Tape()
    return tape.const(params.alpha), tape.const(params.beta)


def block_gradient(
    model: MoEModel, tokens, targets, params: PruneParams, lam: float, block: str,
    teacher=None, router_weighted: bool = False,
) -> tuple[float, np.ndarray, ObjectiveValue]:
    obj = total_objective(
        tokens, targets, model, params, lam, teacher=teacher, wrt=(block,), router_weighted=router_weighted
    )
    target = obj.alpha if block == "alpha" else obj.beta
    grad = obj.tape.backward(obj.loss, [target])[target.id]
    return obj.value, grad, obj


def _step(block: str, state: TrainState, model, tokens, targets, lr, lam, teacher, router_weighted):
    value, grad, obj = block_gradient(model, tokens, targets, state.params, lam, block, teacher, router_weighted)
    if not np.isfinite(value):
        raise OptimizationError(f"loss is {value}", state.step, state)
    if not np.all(np.isfinite(grad)):
        raise OptimizationError(f"non-finite gradient for {block}", state.step, state)
    old = state.params.alpha if block == "alpha" else state.params.beta
    new = old - lr * grad
    if block == "alpha":
        state.params = PruneParams(new, state.params.beta)
        state.alpha_norms.append(float(np.linalg.norm(new - old)))
        state.alpha_epochs.append(state.epoch)
    else:
        state.params = PruneParams(state.params.alpha, new)
        state.beta_norms.append(float(np.linalg.norm(new - old)))
        state.beta_epochs.append(state.epoch)
    state.losses.append(value)
    state.ce.append(obj.ce)
    state.phi.append(obj.phi)
    state.kinds.append(block)
    state.step += 1
    return state


def alpha_step(state: TrainState, model: MoEModel, batch: TokenSet, lr: float, lam: float,
               teacher=None, router_weighted: bool = False) -> TrainState:
    """One descent step on alpha with beta frozen."""
    return _step("alpha", state, model, batch.tokens, batch.targets, lr, lam, teacher, router_weighted)


def beta_step(state: TrainState, model: MoEModel, batch: TokenSet, lr: float, lam: float,
              teacher=None, router_weighted: bool = False) -> TrainState:
    """One descent step on beta with alpha frozen (already updated)."""
    return _step("beta", state, model, batch.tokens, batch.targets, lr, lam, teacher, router_weighted)


def run_search(
    model: MoEModel,
    calibration: TokenSet,
    config: SearchConfig = SearchConfig(),
    init: PruneParams | None = None,
) -> tuple[PruneParams, TrainState, ConvergenceReport]:
    """Alternate ``alt_ratio`` alpha steps and one beta step per mini-batch."""
    if calibration.n_samples == 0:
        raise SpecError("calibration set is empty")
    cfg = model.config
    params = init.copy() if init is not None else PruneParams.init(cfg.n_layers, cfg.n_experts)
    state = TrainState(params=params)
    n = calibration.n_samples
    seq = calibration.tokens.shape[1]
    teacher = teacher_logits(model, calibration.tokens).reshape(n, seq, -1)
    n_batches = math.ceil(n / config.batch_size)
    total = config.epochs * n_batches * (config.alt_ratio + 1)
    rng = np.random.default_rng(config.seed)

    def full_loss() -> float:
        return total_objective(
            calibration.tokens, calibration.targets, model, state.params, config.lam,
            teacher=teacher, wrt=(), router_weighted=config.router_weighted,
        ).value

    state.epoch_losses.append(full_loss())
    for epoch in range(config.epochs):
        state.epoch = epoch
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = TokenSet(calibration.tokens[idx], calibration.targets[idx])
            tb = teacher[idx]
            for _ in range(config.alt_ratio):
                lr = config.learning_rate(config.lr_alpha, state.step, total)
                alpha_step(state, model, batch, lr, config.lam, tb, config.router_weighted)
            lr = config.learning_rate(config.lr_beta, state.step, total)
            beta_step(state, model, batch, lr, config.lam, tb, config.router_weighted)
            state.t += 1
        value = full_loss()
        if not np.isfinite(value):
            raise OptimizationError(f"full-batch loss is {value}", state.step, state)
        state.epoch_losses.append(value)
        logger.debug("search epoch %d loss %.6f", epoch, value)
    return state.params, state, convergence_diagnostics(state)


def _epoch_means(norms, epochs) -> tuple[float, float]:
    if not norms:
        return float("nan"), float("nan")
    norms = np.asarray(norms)
    epochs = np.asarray(epochs)
    return float(norms[epochs == epochs.min()].mean()), float(norms[epochs == epochs.max()].mean())


def count_increases(values, rtol: float = 1e-12) -> int:
    """Number of steps where the sequence rises by more than rounding slack."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0
    slack = rtol * np.maximum(1.0, np.abs(v[:-1]))
    return int(np.sum(v[1:] - v[:-1] > slack))


def convergence_diagnostics(state: TrainState, vanish_ratio: float = 0.1) -> ConvergenceReport:
    """Monotonicity of full-batch epoch losses and shrinkage of update norms."""
    violations = count_increases(state.epoch_losses)
    a_first, a_last = _epoch_means(state.alpha_norms, state.alpha_epochs)
    b_first, b_last = _epoch_means(state.beta_norms, state.beta_epochs)

    def ratio(first, last):
        if not np.isfinite(first):
            return float("nan")
        return 0.0 if first == 0 else last / first

    a_ratio, b_ratio = ratio(a_first, a_last), ratio(b_first, b_last)
    return ConvergenceReport(
        monotone=violations == 0,
        violations=violations,
        loss_curve=list(state.epoch_losses),
        final_alpha_norm=state.alpha_norms[-1] if state.alpha_norms else 0.0,
        final_beta_norm=state.beta_norms[-1] if state.beta_norms else 0.0,
        alpha_ratio=a_ratio,
        beta_ratio=b_ratio,
        vanishing=bool(a_ratio < vanish_ratio and b_ratio < vanish_ratio),
    )


def estimate_lipschitz(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    n_pairs: int = 8,
    radius: float = 0.5,
    seed: int = 0,
    power_iters: int = 6,
) -> float:
    """Probe the gradient's Lipschitz constant near ``theta``.

    Centers are drawn uniformly in a box of half-width ``radius``; at each one
    a few power iterations on finite-difference Hessian-vector products find
    the steepest gradient-change direction.  Returns the largest ratio
    ||g(u + h v) - g(u)|| / h seen.
    """
    rng = np.random.default_rng(seed)
    theta = np.asarray(theta, dtype=np.float64)
    best = 0.0
    for c in range(n_pairs):
        u = theta if c == 0 else theta + rng.uniform(-radius, radius, size=theta.shape)
        gu = grad_fn(u)
        v = rng.normal(size=theta.shape)
        h = 1e-4 * (1.0 + np.linalg.norm(u))
        for _ in range(power_iters):
            nv = np.linalg.norm(v)
            if nv == 0:
                break
            v = v / nv
            hv = (grad_fn(u + h * v) - gu) / h
            best = max(best, float(np.linalg.norm(hv)))
            v = hv
    return best


def full_batch_descent(
    model: MoEModel,
    data: TokenSet,
    lam: float = 0.01,
    iterations: int = 200,
    *,
    steps: tuple[float, float] | None = None,
    router_weighted: bool = False,
    probe_pairs: int = 4,
    probe_radius: float = 0.1,
    probe_path: bool = True,
    epoch_length: int = 20,
    seed: int = 0,
    init: PruneParams | None = None,
) -> tuple[PruneParams, TrainState, ConvergenceReport, tuple[float, float]]:
    """Deterministic alternating descent on the whole set with fixed step sizes.

    Unless ``steps`` is given, each block's step is 1 / L where L is the
    largest probed gradient-Lipschitz estimate of that block.  Probes sit at
    the start point and, with ``probe_path``, at every ``epoch_length``-th
    iterate of a pilot run that uses the start-point steps; curvature tends
    to grow as the scores sharpen, so the start alone underestimates it.
    Every half-step's loss goes into ``epoch_losses``; an "epoch" here is
    ``epoch_length`` iterations, for the update-norm comparison.
    """
    cfg = model.config
    params = init.copy() if init is not None else PruneParams.init(cfg.n_layers, cfg.n_experts)
    teacher = teacher_logits(model, data.tokens)
    tokens, targets = data.tokens, data.targets

    def grad_of(block, at):
        def fn(theta):
            p = PruneParams(theta, at.beta) if block == "alpha" else PruneParams(at.alpha, theta)
            return block_gradient(model, tokens, targets, p, lam, block, teacher, router_weighted)[1]
        return fn

    def probe(points):
        la = max(estimate_lipschitz(grad_of("alpha", q), q.alpha, probe_pairs, probe_radius, seed) for q in points)
        lb = max(estimate_lipschitz(grad_of("beta", q), q.beta, probe_pairs, probe_radius, seed + 1)
                 for q in points)
        return (1.0 / la if la > 0 else 1.0, 1.0 / lb if lb > 0 else 1.0)

    if steps is None:
        steps = probe([params])
        if probe_path and iterations > 0:
            pilot = TrainState(params=params.copy())
            points = [params]
            try:
                for it in range(iterations):
                    _step("alpha", pilot, model, tokens, targets, steps[0], lam, teacher, router_weighted)
                    _step("beta", pilot, model, tokens, targets, steps[1], lam, teacher, router_weighted)
                    if (it + 1) % epoch_length == 0:
                        points.append(pilot.params)
            except OptimizationError:
                points.append(pilot.params)
            steps = probe(points)
    eta_a, eta_b = steps
    state = TrainState(params=params)

    def value():
        return total_objective(tokens, targets, model, state.params, lam, teacher=teacher, wrt=(),
                               router_weighted=router_weighted).value

    state.epoch_losses.append(value())
    for it in range(iterations):
        state.epoch = it // epoch_length
        _step("alpha", state, model, tokens, targets, eta_a, lam, teacher, router_weighted)
        state.epoch_losses.append(value())
        _step("beta", state, model, tokens, targets, eta_b, lam, teacher, router_weighted)
        state.epoch_losses.append(value())
        state.t += 1
        if not np.isfinite(state.epoch_losses[-1]):
            raise OptimizationError("full-batch loss is not finite", state.step, state)
    return state.params, state, convergence_diagnostics(state), (eta_a, eta_b)
