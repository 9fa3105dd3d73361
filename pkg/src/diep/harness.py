"""Experiment configuration, orchestration and reporting.

Every command takes an :class:`ExperimentConfig` and returns a report dict
that embeds the full config, so :func:`reproduce` can regenerate it.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import autodiff as ad
from . import io
from .cka import expert_similarity, adjacent_layer_similarity
from .data import (
    CALIBRATION_SIZE_GRID,
    CalibrationSet,
    RedundancySpec,
    TaskSpec,
    TokenSet,
    accuracy,
    gen_task,
    ingest_text,
    init_model,
    plant_redundancy,
    pretrain_toy,
    redundant_pruned_count,
    save_jsonl,
)
from .exceptions import CompatibilityError, ConfigError, DiEPError, SchemaError, SpecError, TrainingError
from .moe import ModelConfig, MoEModel, PruneMask, PruneParams, run_forward
from .pruning import (
    PruneDecision,
    activation_counts,
    exhaustive_layer_search,
    frequency_prune,
    global_scores,
    merge_pruned,
    n_to_prune,
    random_prune,
    select_bottom_k,
)
from .search import SearchConfig, run_search
from .skipping import SkipThresholds, calibrate, skip_forward, throughput_report

logger = logging.getLogger(__name__)

__all__ = [
    "EvalMetrics",
    "ExperimentConfig",
    "cmd_analyze",
    "cmd_eval",
    "cmd_pretrain",
    "cmd_prune",
    "cmd_skip_calibrate",
    "cmd_sweep",
    "evaluate",
    "load_config",
    "reproduce",
]

METHODS = ("diep", "random", "frequency", "exhaustive")


# -- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class Seeds:
    task: int = 0
    init: int = 0
    search: int = 0
    baseline: int = 0


@dataclass(frozen=True)
class PretrainSettings:
    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 32


@dataclass(frozen=True)
class PruneSettings:
    method: str = "diep"
    r: float = 0.25
    variant: str = "normalized"
    keep: int | None = None
    merge: bool = False
    kernel: str = "linear"


@dataclass(frozen=True)
class SkipSettings:
    enabled: bool = False
    kernel: str = "linear"
    mode: str = "routed"
    post_skip_weight: str = "one"


@dataclass(frozen=True)
class IngestSettings:
    path: str
    n_samples: int = 128
    seq_len: int = 16


@dataclass(frozen=True)
class ModelShape:
    n_layers: int = 4
    n_experts: int = 6
    top_k: int = 2
    d_model: int = 16
    d_hidden: int | None = None
    renormalize: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelShape = ModelShape()
    task: TaskSpec = TaskSpec()
    ingest: IngestSettings | None = None
    redundancy: RedundancySpec = RedundancySpec()
    pretrain: PretrainSettings = PretrainSettings()
    search: SearchConfig = SearchConfig()
    pruning: PruneSettings = PruneSettings()
    skipping: SkipSettings = SkipSettings()
    seeds: Seeds = Seeds()
    output_dir: str = "runs"

    def __post_init__(self):
        p = self.pruning
        if not 0.0 <= p.r <= 1.0:
            raise ConfigError("pruning.r", f"must lie in [0, 1], got {p.r}")
        if p.method not in METHODS:
            raise ConfigError("pruning.method", f"unknown method {p.method!r}; expected one of {METHODS}")
        if p.variant not in ("normalized", "raw"):
            raise ConfigError("pruning.variant", f"unknown score variant {p.variant!r}")
        if self.ingest is not None and not Path(self.ingest.path).is_file():
            raise ConfigError("ingest.path", f"{self.ingest.path} does not exist")
        if self.skipping.mode not in ("routed", "batch"):
            raise ConfigError("skipping.mode", f"unknown mode {self.skipping.mode!r}")
        if self.skipping.post_skip_weight not in ("one", "renormalized"):
            raise ConfigError("skipping.post_skip_weight", f"unknown value {self.skipping.post_skip_weight!r}")
        self.model_config()

    def model_config(self) -> ModelConfig:
        if self.ingest is not None:
            vocab = classes = self.task.vocab
        else:
            vocab, classes = self.task.vocab, self.task.classes
        try:
            return ModelConfig(vocab=vocab, classes=classes, **dataclasses.asdict(self.model))
        except ConfigError as exc:
            raise ConfigError(f"model.{exc.field}", str(exc).split(": ", 1)[-1]) from None

    def to_dict(self) -> dict:
        out = {
            "model": dataclasses.asdict(self.model),
            "task": self.task.to_dict(),
            "ingest": None if self.ingest is None else dataclasses.asdict(self.ingest),
            "redundancy": self.redundancy.to_dict(),
            "pretrain": dataclasses.asdict(self.pretrain),
            "search": self.search.to_dict(),
            "pruning": dataclasses.asdict(self.pruning),
            "skipping": dataclasses.asdict(self.skipping),
            "seeds": dataclasses.asdict(self.seeds),
            "output_dir": self.output_dir,
        }
        return out

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        data = dict(data or {})
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown config section")

        def section(name, typ, allow_none=False):
            raw = data.get(name)
            if raw is None:
                return None if allow_none else typ()
            if not isinstance(raw, dict):
                raise ConfigError(name, "must be a mapping")
            names = {f.name for f in dataclasses.fields(typ)}
            for key in raw:
                if key not in names:
                    raise ConfigError(f"{name}.{key}", "unknown field")
            try:
                return typ(**raw)
            except ConfigError as exc:
                if exc.field.startswith(f"{name}."):
                    raise
                raise ConfigError(f"{name}.{exc.field}", str(exc).split(": ", 1)[-1]) from None
            except (SpecError, TypeError, ValueError) as exc:
                raise ConfigError(name, str(exc)) from None

        red = data.get("redundancy")
        try:
            redundancy = RedundancySpec() if red is None else RedundancySpec.from_dict(red)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("redundancy", f"malformed entry: {exc}") from None
        return cls(
            model=section("model", ModelShape),
            task=section("task", TaskSpec),
            ingest=section("ingest", IngestSettings, allow_none=True),
            redundancy=redundancy,
            pretrain=section("pretrain", PretrainSettings),
            search=section("search", SearchConfig),
            pruning=section("pruning", PruneSettings),
            skipping=section("skipping", SkipSettings),
            seeds=section("seeds", Seeds),
            output_dir=str(data.get("output_dir", "runs")),
        )

    def with_search_seed(self) -> SearchConfig:
        return replace(self.search, seed=self.seeds.search)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"{path}: invalid YAML: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("<file>", f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(data)


def dump_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), encoding="utf-8")


# -- data and models -------------------------------------------------------

def build_data(config: ExperimentConfig) -> tuple[TokenSet, TokenSet, CalibrationSet]:
    """Train, eval and calibration splits from the ``task`` seed stream."""
    if config.ingest is None:
        return gen_task(config.task, config.seeds.task)
    ing, vocab = config.ingest, config.task.vocab
    seeds = np.random.SeedSequence(config.seeds.task).generate_state(3)
    n_train = max(config.task.n_train, ing.n_samples)
    train = ingest_text(ing.path, vocab, n_train, ing.seq_len, int(seeds[0]))
    evaluation = ingest_text(ing.path, vocab, config.task.n_eval, ing.seq_len, int(seeds[1]))
    calib = ingest_text(ing.path, vocab, ing.n_samples, ing.seq_len, int(seeds[2]))
    return TokenSet(train.tokens, train.targets), TokenSet(evaluation.tokens, evaluation.targets), calib


def build_model(config: ExperimentConfig, train: TokenSet, evaluation: TokenSet | None = None):
    cfg = config.model_config()
    spec = None if config.ingest is not None else config.task
    model = init_model(cfg, spec, config.seeds.init)
    if config.redundancy.entries:
        model = plant_redundancy(model, config.redundancy, config.seeds.init)
    p = config.pretrain
    return pretrain_toy(model, train, p.epochs, p.lr, batch_size=p.batch_size,
                        seed=config.seeds.init, eval_set=evaluation)


def _model_for(config: ExperimentConfig, model_path, train, evaluation) -> tuple[MoEModel, dict]:
    if model_path is not None:
        model = io.load_model(model_path)
        check_compatible(model, config)
        return model, {"source": "artifact", "digest": io.model_digest(model)}
    result = build_model(config, train, evaluation)
    return result.model, {"source": "pretrained", "digest": io.model_digest(result.model)}


def check_compatible(model: MoEModel, config: ExperimentConfig, mask: PruneMask | None = None) -> None:
    want = config.model_config()
    if (model.config.vocab, model.config.classes) != (want.vocab, want.classes):
        raise CompatibilityError(
            f"model vocab/classes {model.config.vocab}/{model.config.classes} "
            f"do not match config {want.vocab}/{want.classes}"
        )
    if mask is not None and mask.mask.shape != (model.config.n_layers, model.config.n_experts):
        raise CompatibilityError(
            f"mask shape {mask.mask.shape} does not match model "
            f"({model.config.n_layers}, {model.config.n_experts})"
        )


# -- evaluation ------------------------------------------------------------

@dataclass
class EvalMetrics:
    accuracy: float
    perplexity: float
    fidelity: float
    frequency: np.ndarray
    skip: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "accuracy": self.accuracy,
            "perplexity": self.perplexity,
            "fidelity": self.fidelity,
            "frequency": self.frequency.tolist(),
        }
        if self.skip is not None:
            out["skip"] = self.skip
        return out


def _cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(targets)), targets]))


def evaluate(model: MoEModel, data: TokenSet, mask: PruneMask | None = None,
             thresholds: SkipThresholds | None = None, post_skip_weight: str = "one") -> EvalMetrics:
    """Accuracy, perplexity, fidelity to the unpruned model and routing frequencies."""
    cfg = model.config
    if mask is None:
        mask = PruneMask.full(cfg.n_layers, cfg.n_experts)
    if mask.mask.shape != (cfg.n_layers, cfg.n_experts):
        raise CompatibilityError(f"mask shape {mask.mask.shape} does not match model")
    tokens = data.tokens.reshape(-1)
    targets = data.targets.reshape(-1)
    if targets.size and (targets.min() < 0 or targets.max() >= cfg.classes):
        raise CompatibilityError(f"targets outside [0, {cfg.classes})")
    full = np.array(run_forward(ad.Tape(), model, tokens, "full").data)
    trace: list = []
    logits = np.array(run_forward(ad.Tape(), model, tokens, "masked", mask=mask, trace=trace).data)
    frequency = np.array([rec.selected.sum(axis=0) for rec in trace], dtype=np.int64)
    skip = None
    if thresholds is not None:
        skipped_logits, stats = skip_forward(tokens, model, mask, thresholds,
                                             post_skip_weight=post_skip_weight)
        _, base = skip_forward(tokens, model, mask, SkipThresholds.fixed(0.0, cfg.n_layers))
        skip = {"thresholds": thresholds.to_dict(), "stats": stats.to_dict(),
                "comparison": throughput_report(stats, base, targets)}
        logits = skipped_logits
    return EvalMetrics(
        accuracy=accuracy(logits, targets),
        perplexity=math.exp(_cross_entropy(logits, targets)),
        fidelity=float(np.mean(np.linalg.norm(logits - full, axis=1))),
        frequency=frequency,
        skip=skip,
    )


# -- reports ---------------------------------------------------------------

def _report(kind: str, config: ExperimentConfig, started: float, **sections) -> dict:
    report = {"schema_version": io.REPORT_SCHEMA, "kind": kind, "config": config.to_dict()}
    report.update(sections)
    report["timing"] = {"wall_clock_s": time.perf_counter() - started}
    return report


def _out_dir(config: ExperimentConfig, out_dir) -> Path:
    path = Path(out_dir if out_dir is not None else config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(report: dict, out: Path | None, name: str) -> dict:
    if out is not None:
        io.save_report(report, out / name)
    return report


# -- commands --------------------------------------------------------------

def cmd_pretrain(config: ExperimentConfig, out_dir=None, write: bool = True) -> dict:
    """Generate data, pretrain (with planted redundancy) and persist model + fixtures."""
    started = time.perf_counter()
    out = _out_dir(config, out_dir) if write else None
    train, evaluation, calib = build_data(config)
    try:
        result = build_model(config, train, evaluation)
    except TrainingError as exc:
        partial = _report("pretrain", config, started, pretrain={"losses": exc.history, "error": str(exc)})
        _write(partial, out, "pretrain_report.json")
        raise
    digests = {"model": io.model_digest(result.model)}
    if out is not None:
        io.save_model(result.model, out / "model.diep")
        save_jsonl(calib, out / "calibration.jsonl")
        save_jsonl(evaluation, out / "eval.jsonl")
    report = _report(
        "pretrain", config, started,
        pretrain=result.to_dict(),
        planted=[g.to_dict() for g in result.model.clone_groups],
        digests=digests,
    )
    return _write(report, out, "pretrain_report.json")


def run_method(config: ExperimentConfig, model: MoEModel, calib: CalibrationSet,
               r: float | None = None) -> tuple[PruneDecision, dict]:
    """Apply the configured pruning method; returns the decision and search extras."""
    p = config.pruning
    r = p.r if r is None else r
    cfg = model.config
    K = n_to_prune(cfg.n_layers, cfg.n_experts, r)
    extras: dict = {}
    if p.method == "diep":
        params, state, conv = run_search(model, calib, config.with_search_seed())
        scores = global_scores(params, p.variant)
        decision = select_bottom_k(scores, r, cfg.top_k)
        extras = {
            "scores": {"alpha": params.alpha, "beta": params.beta, "global": scores.scores},
            "history": state.to_dict(),
            "convergence": conv.to_dict(),
        }
    elif p.method == "random":
        decision = random_prune(cfg.n_layers, cfg.n_experts, K, cfg.top_k, config.seeds.baseline)
    elif p.method == "frequency":
        decision = frequency_prune(model, calib, K)
    else:
        keep = p.keep if p.keep is not None else cfg.n_experts - int(round(cfg.n_experts * r))
        decision = exhaustive_layer_search(model, calib, keep)
    return decision, extras


def _prune_and_eval(config, model, calib, evaluation, r=None) -> dict:
    decision, extras = run_method(config, model, calib, r)
    pruned_model = model
    merge_groups = None
    if config.pruning.merge:
        pruned_model, groups = merge_pruned(model, decision, calibration=calib, kernel=config.pruning.kernel)
        merge_groups = [{"layer": l, "target": t, **g} for (l, t), g in groups.items()]
    metrics = evaluate(pruned_model, evaluation, decision.mask)
    out = {
        "decision": decision.to_dict(),
        "eval": metrics.to_dict(),
        "redundant_pruned": redundant_pruned_count(model.clone_groups, decision.pruned),
        **extras,
    }
    if merge_groups is not None:
        out["merge"] = merge_groups
    return out


def cmd_prune(config: ExperimentConfig, model_path=None, out_dir=None, write: bool = True) -> dict:
    """Run the configured pruning method and evaluate the pruned model."""
    started = time.perf_counter()
    out = _out_dir(config, out_dir) if write else None
    train, evaluation, calib = build_data(config)
    model, source = _model_for(config, model_path, train, evaluation)
    body = _prune_and_eval(config, model, calib, evaluation)
    if config.skipping.enabled:
        mask = PruneMask(np.array(body["decision"]["mask"], dtype=bool))
        th = calibrate(model, mask, calib, kernel=config.skipping.kernel, mode=config.skipping.mode)
        body["skip"] = evaluate(model, evaluation, mask, th, config.skipping.post_skip_weight).skip
    report = _report("prune", config, started, model=source, **body)
    return _write(report, out, "prune_report.json")


def load_mask(path) -> PruneMask:
    report = io.load_report(path)
    try:
        return PruneMask(np.array(report["decision"]["mask"], dtype=bool))
    except KeyError:
        raise SchemaError(f"{path}: report has no pruning decision") from None


def cmd_eval(config: ExperimentConfig, model_path=None, mask_path=None, skip: bool | None = None,
             out_dir=None, write: bool = True, mask: PruneMask | None = None) -> dict:
    """Held-out metrics for a (possibly pruned, possibly skipping) model."""
    started = time.perf_counter()
    out = _out_dir(config, out_dir) if write else None
    train, evaluation, calib = build_data(config)
    model, source = _model_for(config, model_path, train, evaluation)
    if mask_path is not None:
        mask = load_mask(mask_path)
    check_compatible(model, config, mask)
    skip = config.skipping.enabled if skip is None else skip
    thresholds = None
    if skip:
        thresholds = calibrate(model, mask, calib, kernel=config.skipping.kernel, mode=config.skipping.mode)
    metrics = evaluate(model, evaluation, mask, thresholds, config.skipping.post_skip_weight)
    report = _report("eval", config, started, model=source, eval=metrics.to_dict(), skip_requested=skip,
                     mask=None if mask is None else mask.to_grid())
    return _write(report, out, "eval_report.json")


def cmd_analyze(config: ExperimentConfig, model_path=None, out_dir=None, kernel: str = "rbf",
                scores_from=None, write: bool = True, scores: dict | None = None) -> dict:
    """CSV bundle: intra-layer CKA per layer, adjacent-layer CKA, alpha and beta dumps.

    ``scores`` (a dict with ``alpha`` and ``beta``) takes precedence over
    ``scores_from``; reproduction passes the scores embedded in the report.
    """
    started = time.perf_counter()
    out = _out_dir(config, out_dir) if write else None
    train, evaluation, calib = build_data(config)
    model, source = _model_for(config, model_path, train, evaluation)
    L = model.config.n_layers
    tables = []
    for l in range(L):
        tables.append((f"intra_layer_{l}.csv", expert_similarity(model, l, calib, kernel=kernel).matrix,
                       "expert", "expert"))
    for l in range(L - 1):
        tables.append((f"cross_layer_{l}_{l + 1}.csv", adjacent_layer_similarity(model, l, calib, kernel=kernel),
                       f"layer{l}_expert", f"layer{l + 1}_expert"))
    external = scores is not None or scores_from is not None
    if scores is None and scores_from is not None:
        scores = io.load_report(scores_from).get("scores")
        if scores is None:
            raise SchemaError(f"{scores_from}: report has no alpha/beta scores")
    if scores is not None:
        params = PruneParams(scores["alpha"], scores["beta"])
    else:
        params, _, _ = run_search(model, calib, config.with_search_seed())
    tables.append(("alpha.csv", params.alpha, "layer", "expert"))
    tables.append(("beta.csv", params.beta[:, None], "layer", "beta"))
    if write:
        for name, matrix, rows, cols in tables:
            io.write_csv_matrix(matrix, out / name, rows, cols)
    report = _report("analyze", config, started, model=source, kernel=kernel,
                     files=[t[0] for t in tables], external_scores=external,
                     similarity={t[0]: t[1] for t in tables[:-2]},
                     scores={"alpha": params.alpha, "beta": params.beta})
    return _write(report, out, "analyze_report.json")


def cmd_skip_calibrate(config: ExperimentConfig, model_path=None, mask_path=None, out_dir=None,
                       write: bool = True) -> dict:
    """Calibrate per-layer gamma, export the table and report skip statistics."""
    started = time.perf_counter()
    out = _out_dir(config, out_dir) if write else None
    train, evaluation, calib = build_data(config)
    model, source = _model_for(config, model_path, train, evaluation)
    mask = load_mask(mask_path) if mask_path is not None else None
    check_compatible(model, config, mask)
    s = config.skipping
    th = calibrate(model, mask, calib, kernel=s.kernel, mode=s.mode)
    metrics = evaluate(model, evaluation, mask, th, s.post_skip_weight)
    if out is not None:
        rows = [{"layer": l, "gamma1": float(th.gamma1[l]), "gamma2": float(th.gamma2[l]),
                 "gamma": float(th.gamma[l])} for l in range(model.config.n_layers)]
        io.write_csv_rows(rows, out / "gamma.csv")
    report = _report("skip-calibrate", config, started, model=source, thresholds=th.to_dict(),
                     eval=metrics.to_dict())
    return _write(report, out, "skip_report.json")


def expand_grid(grid: dict) -> list[dict]:
    """Cross product over r, lam, calibration size and method."""
    axes = {
        "r": grid.get("r", [None]),
        "lam": grid.get("lam", [None]),
        "calibration": grid.get("calibration", [None]),
        "method": grid.get("method", [None]),
    }
    if axes["calibration"] == "preset":
        axes["calibration"] = list(CALIBRATION_SIZE_GRID)
    for key, values in axes.items():
        if not isinstance(values, (list, tuple)) or not values:
            raise ConfigError(f"grid.{key}", "must be a non-empty list")
    unknown = set(grid) - set(axes)
    if unknown:
        raise ConfigError(f"grid.{sorted(unknown)[0]}", "unknown sweep axis")
    return [dict(zip(axes, combo)) for combo in itertools.product(*axes.values())]


def cmd_sweep(config: ExperimentConfig, grid: dict, model_path=None, out_dir=None,
              write: bool = True) -> list[dict]:
    """One CSV row per grid cell; failing cells are recorded and the sweep continues."""
    out = _out_dir(config, out_dir) if write else None
    cells = expand_grid(grid)
    train, evaluation, _ = build_data(config)
    model, _source = _model_for(config, model_path, train, evaluation)
    rows = []
    for cell in cells:
        cfg = config
        if cell["lam"] is not None:
            cfg = replace(cfg, search=replace(cfg.search, lam=float(cell["lam"])))
        if cell["method"] is not None:
            cfg = replace(cfg, pruning=replace(cfg.pruning, method=cell["method"]))
        if cell["r"] is not None:
            cfg = replace(cfg, pruning=replace(cfg.pruning, r=float(cell["r"])))
        if cell["calibration"] is not None:
            cfg = replace(cfg, task=replace(cfg.task, n_calibration=int(cell["calibration"])))
        row = {
            "method": cfg.pruning.method, "r": cfg.pruning.r, "lam": cfg.search.lam,
            "calibration": cfg.task.n_calibration if cfg.ingest is None else cfg.ingest.n_samples,
        }
        try:
            _, _, calib = build_data(cfg)
            body = _prune_and_eval(cfg, model, calib, evaluation)
            row.update(
                K=body["decision"]["K"],
                accuracy=body["eval"]["accuracy"],
                perplexity=body["eval"]["perplexity"],
                fidelity=body["eval"]["fidelity"],
                redundant_pruned=body["redundant_pruned"],
                error="",
            )
        except (DiEPError, ValueError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
            logger.warning("sweep cell %s failed: %s", cell, exc)
        rows.append(row)
    if out is not None:
        fields = ["method", "r", "lam", "calibration", "K", "accuracy", "perplexity", "fidelity",
                  "redundant_pruned", "error"]
        io.write_csv_rows(rows, out / "sweep.csv", fields)
    return rows


_COMMANDS = {
    "pretrain": lambda cfg: cmd_pretrain(cfg, write=False),
    "prune": lambda cfg: cmd_prune(cfg, write=False),
    "skip-calibrate": lambda cfg: cmd_skip_calibrate(cfg, write=False),
}


def reproduce(report: dict) -> dict:
    """Regenerate a report from its embedded config and seeds (model rebuilt by pretraining)."""
    kind = report.get("kind")
    if kind not in _COMMANDS and kind not in ("eval", "analyze"):
        raise SchemaError(f"cannot reproduce report of kind {kind!r}")
    config = ExperimentConfig.from_dict(report["config"])
    if kind == "eval":
        mask = report.get("mask")
        return cmd_eval(config, skip=report.get("skip_requested"), write=False,
                        mask=None if mask is None else PruneMask(np.array(mask, dtype=bool)))
    if kind == "analyze":
        return cmd_analyze(config, kernel=report.get("kernel", "rbf"), write=False,
                           scores=report["scores"] if report.get("external_scores") else None)
    return _COMMANDS[kind](config)
