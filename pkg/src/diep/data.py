"""Synthetic per-token tasks, toy pretraining, planted redundancy and text ingestion."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .exceptions import CompatibilityError, SpecError, TrainingError
from .moe import CloneGroup, MoEModel, ModelConfig, bind, run_forward

logger = logging.getLogger(__name__)

CALIBRATION_SIZE_GRID = (32, 64, 128, 256, 512, 1024)

__all__ = [
    "CALIBRATION_SIZE_GRID",
    "CalibrationSet",
    "PretrainResult",
    "RedundancyEntry",
    "RedundancySpec",
    "TaskSpec",
    "TokenSet",
    "accuracy",
    "gen_task",
    "ingest_text",
    "init_model",
    "load_jsonl",
    "plant_redundancy",
    "pretrain_toy",
    "redundant_pruned_count",
    "save_jsonl",
    "task_embedding",
]


@dataclass(frozen=True)
class TaskSpec:
    """Domains partition the vocabulary; each domain relabels token content its own way."""

    n_domains: int = 4
    vocab: int = 64
    classes: int = 4
    seq_len: int = 8
    n_train: int = 512
    n_eval: int = 256
    n_calibration: int = 128
    mapping_seed: int = 0

    def __post_init__(self):
        if self.n_domains < 1:
            raise SpecError(f"n_domains must be >= 1, got {self.n_domains}")
        if self.vocab % self.n_domains:
            raise SpecError(f"vocab {self.vocab} is not divisible by n_domains {self.n_domains}")
        if self.classes < 2:
            raise SpecError(f"classes must be >= 2, got {self.classes}")
        for name in ("seq_len", "n_train", "n_eval", "n_calibration"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")

    @property
    def block(self) -> int:
        return self.vocab // self.n_domains

    def domain_of(self, tokens) -> np.ndarray:
        return np.asarray(tokens) // self.block

    def label_table(self) -> np.ndarray:
        """Class of every token id."""
        table = np.empty(self.vocab, dtype=np.int64)
        for dom in range(self.n_domains):
            perm = np.random.default_rng([self.mapping_seed, dom]).permutation(self.block)
            table[dom * self.block:(dom + 1) * self.block] = perm % self.classes
        return table

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TokenSet:
    """Token sequences with per-token targets, both shaped (samples, seq_len)."""

    tokens: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.int64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.int64))
        if self.tokens.shape != self.targets.shape:
            raise CompatibilityError(f"tokens {self.tokens.shape} vs targets {self.targets.shape}")

    @property
    def n_samples(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.tokens.size

    def subset(self, n: int) -> "TokenSet":
        return type(self)(self.tokens[:n], self.targets[:n])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator["TokenSet"]:
        order = np.arange(self.n_samples) if rng is None else rng.permutation(self.n_samples)
        for start in range(0, self.n_samples, batch_size):
            idx = order[start:start + batch_size]
            yield type(self)(self.tokens[idx], self.targets[idx])


class CalibrationSet(TokenSet):
    """Small data sample driving search, baselines and skip calibration."""

    def __post_init__(self):
        super().__post_init__()
        if self.tokens.size == 0:
            raise SpecError("calibration set is empty")


def gen_task(spec: TaskSpec, seed: int = 0) -> tuple[TokenSet, TokenSet, CalibrationSet]:
    """Train, eval and calibration splits drawn from independent seed streams."""
    table = spec.label_table()
    streams = np.random.SeedSequence(seed).spawn(3)

    def draw(n, ss):
        rng = np.random.default_rng(ss)
        dom = rng.integers(0, spec.n_domains, size=(n, 1))
        content = rng.integers(0, spec.block, size=(n, spec.seq_len))
        tokens = dom * spec.block + content
        return tokens, table[tokens]

    train = TokenSet(*draw(spec.n_train, streams[0]))
    evaluation = TokenSet(*draw(spec.n_eval, streams[1]))
    calib = CalibrationSet(*draw(spec.n_calibration, streams[2]))
    return train, evaluation, calib


def task_embedding(spec: TaskSpec, d_model: int, seed: int = 0) -> np.ndarray:
    """Embedding = domain vector + content vector, so labels need a nonlinear read-out."""
    rng = np.random.default_rng([seed, 7919])
    dom = rng.normal(0.0, 1.0, size=(spec.n_domains, d_model))
    con = rng.normal(0.0, 1.0, size=(spec.block, d_model))
    ids = np.arange(spec.vocab)
    return dom[ids // spec.block] + con[ids % spec.block]


def init_model(config: ModelConfig, spec: TaskSpec | None = None, seed: int = 0) -> MoEModel:
    model = MoEModel.init(config, seed)
    if spec is not None:
        if spec.vocab != config.vocab or spec.classes != config.classes:
            raise CompatibilityError(
                f"task vocab/classes {spec.vocab}/{spec.classes} vs model {config.vocab}/{config.classes}"
            )
        model.embedding = task_embedding(spec, config.d_model, seed)
    return model


def accuracy(logits: np.ndarray, targets) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(targets).reshape(-1)))


# -- pretraining -----------------------------------------------------------

@dataclass
class PretrainResult:
    model: MoEModel
    losses: list[float] = field(default_factory=list)
    train_accuracy: float = float("nan")
    eval_accuracy: float | None = None

    def to_dict(self) -> dict:
        return {
            "losses": list(self.losses),
            "train_accuracy": self.train_accuracy,
            "eval_accuracy": self.eval_accuracy,
        }


def _tie_map(model: MoEModel) -> dict[str, list[str]]:
    """Parameter name -> names of all tied copies (planted clone groups)."""
    ties = {}
    for group in model.clone_groups:
        for name in ("w_up", "b_up", "w_down", "b_down"):
            names = [f"layers.{group.layer}.experts.{m}.{name}" for m in group.members]
            for n in names:
                ties[n] = names
    return ties


def pretrain_toy(
    model: MoEModel,
    train: TokenSet,
    epochs: int = 30,
    lr: float = 1e-2,
    *,
    batch_size: int = 32,
    seed: int = 0,
    eval_set: TokenSet | None = None,
    train_embedding: bool = False,
) -> PretrainResult:
    """Train router, expert and head weights with Adam on token cross-entropy.

    Planted clone groups receive the summed gradient of their members, so
    copies stay exact copies (or keep their fixed perturbation) throughout.
    """
    cfg = model.config
    if train.tokens.size and train.tokens.max() >= cfg.vocab:
        raise CompatibilityError(f"task tokens exceed model vocab {cfg.vocab}")
    if train.targets.size and train.targets.max() >= cfg.classes:
        raise CompatibilityError(f"task targets exceed model classes {cfg.classes}")

    params = {k: v.copy() for k, v in model.parameters().items()}
    names = [n for n in params if train_embedding or n != "embedding"]
    ties = _tie_map(model)
    m1 = {n: np.zeros_like(params[n]) for n in names}
    m2 = {n: np.zeros_like(params[n]) for n in names}
    b1, b2, eps = 0.9, 0.999, 1e-8
    rng = np.random.default_rng(seed)
    history: list[float] = []
    step = 0
    current = model
    for epoch in range(epochs):
        total, count = 0.0, 0
        for batch in train.batches(batch_size, rng):
            tape = ad.Tape()
            t = bind(tape, current, trainable=set(names))
            logits = run_forward(tape, current, batch.tokens, bound=t)
            loss = ad.cross_entropy(logits, batch.targets)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss became {value} in epoch {epoch}", history)
            grads = tape.backward(loss, [t[n] for n in names])
            g = {n: grads[t[n].id] for n in names}
            for n, tied in ties.items():
                if n in g:
                    g[n] = sum(grads[t[m].id] for m in tied)
            step += 1
            for n in names:
                m1[n] = b1 * m1[n] + (1 - b1) * g[n]
                m2[n] = b2 * m2[n] + (1 - b2) * g[n] * g[n]
                mhat = m1[n] / (1 - b1 ** step)
                vhat = m2[n] / (1 - b2 ** step)
                params[n] = params[n] - lr * mhat / (np.sqrt(vhat) + eps)
            current = current.with_parameters(params)
            total += value * batch.n_tokens
            count += batch.n_tokens
        history.append(total / count)
        logger.debug("pretrain epoch %d loss %.4f", epoch, history[-1])

    result = PretrainResult(current, history)
    result.train_accuracy = accuracy(_logits(current, train.tokens), train.targets)
    if eval_set is not None:
        result.eval_accuracy = accuracy(_logits(current, eval_set.tokens), eval_set.targets)
    return result


def _logits(model: MoEModel, tokens) -> np.ndarray:
    tape = ad.Tape()
    return np.array(run_forward(tape, model, tokens).data)


# -- planted redundancy ----------------------------------------------------

@dataclass(frozen=True)
class RedundancyEntry:
    layer: int
    source: int
    clones: int
    sigma: float = 0.0
    targets: tuple[int, ...] | None = None


@dataclass(frozen=True)
class RedundancySpec:
    entries: tuple[RedundancyEntry, ...] = ()

    @classmethod
    def from_dict(cls, data) -> "RedundancySpec":
        entries = data.get("entries", []) if isinstance(data, dict) else data
        return cls(tuple(
            RedundancyEntry(
                int(e["layer"]), int(e["source"]), int(e["clones"]), float(e.get("sigma", 0.0)),
                None if e.get("targets") is None else tuple(int(x) for x in e["targets"]),
            )
            for e in entries
        ))

    def to_dict(self) -> dict:
        return {"entries": [
            {"layer": e.layer, "source": e.source, "clones": e.clones, "sigma": e.sigma,
             "targets": None if e.targets is None else list(e.targets)}
            for e in self.entries
        ]}

    @property
    def clone_count(self) -> int:
        return sum(e.clones for e in self.entries)


def plant_redundancy(model: MoEModel, spec: RedundancySpec, seed: int = 0) -> MoEModel:
    """Overwrite designated experts with noisy copies of a source expert."""
    cfg = model.config
    rng = np.random.default_rng(seed)
    out = model.copy()
    used: dict[int, set[int]] = {}
    groups = list(model.clone_groups)
    for entry in spec.entries:
        if not 0 <= entry.layer < cfg.n_layers:
            raise SpecError(f"layer {entry.layer} out of range")
        if not 0 <= entry.source < cfg.n_experts:
            raise SpecError(f"source expert {entry.source} out of range")
        if entry.clones < 0 or entry.sigma < 0:
            raise SpecError("clone count and sigma must be non-negative")
        taken = used.setdefault(entry.layer, set())
        if entry.source in taken:
            raise SpecError(f"expert {entry.source} in layer {entry.layer} already planted")
        taken.add(entry.source)
        if entry.targets is not None:
            targets = list(entry.targets)
            if len(targets) != entry.clones:
                raise SpecError("targets length must equal clone count")
        else:
            free = [i for i in range(cfg.n_experts) if i not in taken]
            if len(free) < entry.clones:
                raise SpecError(
                    f"layer {entry.layer} has {cfg.n_experts} experts; cannot fit {entry.clones} more clones"
                )
            targets = free[:entry.clones]
        for tgt in targets:
            if tgt in taken or not 0 <= tgt < cfg.n_experts:
                raise SpecError(f"clone target {tgt} in layer {entry.layer} unavailable")
            taken.add(tgt)
            src = out.layers[entry.layer].experts[entry.source]
            out.layers[entry.layer].experts[tgt] = type(src)(*(
                a.copy() if entry.sigma == 0 else a + entry.sigma * rng.normal(size=a.shape)
                for a in src.arrays().values()
            ))
        groups.append(CloneGroup(entry.layer, entry.source, tuple(targets), entry.sigma))
    out.clone_groups = tuple(groups)
    return out


def redundant_pruned_count(groups, pruned) -> int:
    """Pruned experts that were redundant: per clone group, all but the last survivor."""
    pruned = set(map(tuple, pruned))
    total = 0
    for g in groups:
        hit = sum((g.layer, m) in pruned for m in g.members)
        total += min(hit, len(g.members) - 1)
    return total


# -- external text ---------------------------------------------------------

def ingest_text(
    path, vocab: int, n_samples: int = 128, seq_len: int = 16, seed: int = 0
) -> CalibrationSet:
    """Byte-level tokens folded into ``vocab``; targets are the next token."""
    data = Path(path).read_bytes()
    if not data:
        raise OSError(f"{path} is empty")
    ids = np.frombuffer(data, dtype=np.uint8).astype(np.int64) % vocab
    window = seq_len + 1
    need = n_samples * window
    if need > ids.size:
        warnings.warn(
            f"{path}: {ids.size} bytes cannot fill {n_samples} windows of {window}; wrapping around",
            stacklevel=2,
        )
    start = int(np.random.default_rng(seed).integers(0, ids.size))
    pos = (start + np.arange(need)) % ids.size
    chunks = ids[pos].reshape(n_samples, window)
    return CalibrationSet(chunks[:, :-1], chunks[:, 1:])


def save_jsonl(dataset: TokenSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok, tgt in zip(dataset.tokens, dataset.targets):
            fh.write(json.dumps({"tokens": tok.tolist(), "targets": tgt.tolist()}) + "\n")


def load_jsonl(path, cls=TokenSet) -> TokenSet:
    tokens, targets = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                tokens.append(rec["tokens"])
                targets.append(rec["targets"])
    return cls(np.array(tokens, dtype=np.int64), np.array(targets, dtype=np.int64))
