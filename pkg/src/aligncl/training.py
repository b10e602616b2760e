"""Multi-exit training regimes.

``2st`` trains the backbone with the last exit first, then each shallower exit
on the frozen backbone. ``jt`` minimises the sum of every exit's CE loss.
``alt`` switches between those two objectives from one epoch to the next.
``single_exit`` is stage 1 on its own.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Batch, EncodedData, make_batches
from .grad_align import DEFAULT_GAMMA_THRES, gated_step_grads
from .inference import EVAL_BATCH, exit_accuracies
from .losses import (DEFAULT_LAMBDA, DEFAULT_TEMPERATURE, DegenerateBatchWarning,
                     acl_cl_loss, acl_embed_loss, ce_loss, kd_loss, scl_loss,
                     ContrastiveBatch)
from .model import ModelConfig, MultiExitModel
from .optim import AdamW, LinearSchedule
from .tensor import NonFiniteError, Tape, Tensor, no_grad

REGIMES = ("jt", "2st", "alt", "single_exit")
OBJECTIVES = ("ce", "ce_scl", "acl_embed", "acl_cl")
STAGE1_OBJECTIVES = ("ce", "ce_scl", "acl_embed")


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite. ``diagnostic`` says where."""

    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


@dataclass
class RegimeConfig:
    """Training recipe.

    ``objective`` is what the trained exits optimise: the only stage for
    ``single_exit``, stage 2 for ``2st``. ``stage1_objective`` applies to stage 1
    of ``2st``; ``stage1_acl_grad`` defaults to ``use_acl_grad``.
    """

    regime: str = "2st"
    objective: str = "ce"
    stage1_objective: str = "ce"
    use_acl_grad: bool = False
    stage1_acl_grad: bool | None = None
    lam: float = DEFAULT_LAMBDA
    temperature: float = DEFAULT_TEMPERATURE
    gamma_thres: float = DEFAULT_GAMMA_THRES
    kd: bool = False
    kd_temperature: float = 2.0
    kd_weight: float = 1.0
    epochs: int = 15
    batch_size: int = 32
    peak_lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_frac: float = 0.1
    seed: int = 0

    def validate(self) -> "RegimeConfig":
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.stage1_objective not in STAGE1_OBJECTIVES:
            raise ValueError(f"stage-1 objective must be one of {STAGE1_OBJECTIVES}")
        if self.objective == "acl_cl" and self.regime != "2st":
            raise ValueError("acl_cl needs a trained last exit, so only the 2st regime allows it")
        if self.kd and self.regime != "2st":
            raise ValueError("kd is only defined for stage 2 of the 2st regime")
        if self.regime in ("jt", "alt") and (self.objective != "ce" or self.use_acl_grad):
            raise ValueError(f"{self.regime} trains with cross-entropy only")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not self.temperature > 0 or not self.kd_temperature > 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.gamma_thres <= 180.0:
            raise ValueError("gamma_thres must lie in [0, 180] degrees")
        if self.kd_weight < 0:
            raise ValueError("kd_weight must be non-negative")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")
        if not self.peak_lr > 0 or self.weight_decay < 0 or not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("invalid optimizer settings")
        return self

    def stage1_plan(self) -> tuple[str, bool]:
        if self.regime == "single_exit":
            return self.objective, self.use_acl_grad
        grad = self.use_acl_grad if self.stage1_acl_grad is None else self.stage1_acl_grad
        return self.stage1_objective, grad

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RegimeConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown regime config keys: {sorted(extra)}")
        return cls(**d).validate()

    def run_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return f"{self.regime}-{self.objective}-s{self.seed}-{hashlib.sha1(blob).hexdigest()[:8]}"


@dataclass
class RunLog:
    """Streaming metrics and per-step angle records of one run."""

    run_id: str
    metrics: list[dict] = field(default_factory=list)
    angles: list[dict] = field(default_factory=list)
    step: int = 0

    @property
    def gated_fraction(self) -> float | None:
        if not self.angles:
            return None
        return sum(bool(a["gated"]) for a in self.angles) / len(self.angles)

    @staticmethod
    def _jsonl(rows: list[dict]) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)

    def metrics_jsonl(self) -> str:
        return self._jsonl(self.metrics)

    def angles_jsonl(self) -> str:
        return self._jsonl(self.angles)


@dataclass
class _Phase:
    """One epoch's objective: what to differentiate, and over which parameters."""

    stage: str
    scope: str
    exits: list[int]
    forward: Callable[[Batch, np.random.Generator], tuple[Tensor, Tensor | None, dict]]
    lam: float = 0.0
    gamma_thres: float | None = None


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def _train_loop(model: MultiExitModel, data: EncodedData, cfg: RegimeConfig, log: RunLog,
                phases: list[_Phase], rng: np.random.Generator,
                evaluate: Callable[[list[int]], dict[int, float]] | None) -> None:
    per_epoch = math.ceil(len(data) / cfg.batch_size)
    schedule = LinearSchedule(cfg.peak_lr, per_epoch * len(phases), cfg.warmup_frac)
    opt = AdamW(model.params, schedule, cfg.weight_decay)

    for epoch, phase in enumerate(phases, start=1):
        names = model.param_names(phase.scope)
        ce_hist = {m: [] for m in phase.exits}
        acl_hist, lam_hist = [], []
        correct = {m: 0 for m in phase.exits}
        lr = 0.0
        for batch in make_batches(data, cfg.batch_size, seed=cfg.seed, epoch=epoch):
            where = {"stage": phase.stage, "epoch": epoch, "step": log.step}
            try:
                with Tape() as tape, warnings.catch_warnings():
                    warnings.simplefilter("ignore", DegenerateBatchWarning)
                    ce, acl, per_exit = phase.forward(batch, rng)
                    if acl is None:
                        model.zero_grad()
                        tape.backward(ce)
                        grads = {n: (model.params[n].grad if model.params[n].grad is not None
                                     else np.zeros_like(model.params[n].data)) for n in names}
                        model.zero_grad()
                    else:
                        report, grads = gated_step_grads(model, tape, ce, acl, phase.lam,
                                                         phase.gamma_thres, phase.scope)
                        acl_hist.append(acl.item())
                        lam_hist.append(report.lambda_prime)
                        log.angles.append({
                            "step": log.step, "stage": phase.stage, "exit_layer": phase.exits[0],
                            "cos_gamma": report.cos_gamma, "gamma_deg": report.gamma_deg,
                            "gated": report.gated, "lambda_prime": report.lambda_prime,
                            "loss_ce": ce.item(), "loss_acl": acl.item(),
                        })
                lr = opt.step(grads)
            except NonFiniteError as err:
                raise TrainingDiverged(f"training diverged: {err}", {**where, "error": str(err)}) from err
            for m, (logits, ce_m) in per_exit.items():
                ce_hist[m].append(ce_m)
                correct[m] += int((logits.argmax(axis=-1) == batch.labels).sum())
            log.step += 1

        scores = evaluate(phase.exits) if evaluate is not None else {}
        for m in phase.exits:
            log.metrics.append({
                "run_id": log.run_id, "stage": phase.stage, "epoch": epoch, "step": log.step,
                "exit_layer": m, "loss_ce": _mean(ce_hist[m]), "loss_contrastive": _mean(acl_hist),
                "lambda_prime": _mean(lam_hist), "lr": lr, "train_acc": correct[m] / len(data),
                "eval_acc": scores.get(m),
            })


def _contrastive(objective: str, rep: Tensor, labels, label_embeds: Tensor, tau: float,
                 teacher: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor | None:
    if objective == "ce":
        return None
    if objective == "ce_scl":
        return scl_loss(ContrastiveBatch(rep, labels, tau))
    if objective == "acl_embed":
        return acl_embed_loss(rep, labels, label_embeds, tau)
    t_reps, t_labels = teacher
    return acl_cl_loss(rep, label_embeds, Tensor(t_reps), Tensor(t_labels), labels, tau)


def _gate(cfg: RegimeConfig, objective: str, grad: bool) -> tuple[float, float | None]:
    if objective == "ce":
        return 0.0, None
    return cfg.lam, (cfg.gamma_thres if grad else None)


def _new_log(cfg: RegimeConfig, log: RunLog | None) -> RunLog:
    return log if log is not None else RunLog(cfg.run_id())


def train_stage1(model: MultiExitModel, data: EncodedData, cfg: RegimeConfig,
                 eval_data: EncodedData | None = None, log: RunLog | None = None) -> RunLog:
    """Train the backbone and the last exit; the other exits are left untouched."""
    cfg.validate()
    log = _new_log(cfg, log)
    objective, grad = cfg.stage1_plan()
    M = model.n_layers
    lam, thres = _gate(cfg, objective, grad)

    def forward(batch, rng):
        rep, logits = model.forward(batch.ids, exits=[M], train=True, rng=rng)[M]
        ce = ce_loss(logits, batch.labels)
        acl = _contrastive(objective, rep, batch.labels, model.label_embedding_tensor(M),
                           cfg.temperature)
        return ce, acl, {M: (logits.data, ce.item())}

    phase = _Phase("stage1", "stage1", [M], forward, lam, thres)
    evaluate = None if eval_data is None else (lambda ex: exit_accuracies(model, eval_data, ex))
    _train_loop(model, data, cfg, log, [phase] * cfg.epochs,
                np.random.default_rng([cfg.seed, 1]), evaluate)
    model.stage1_complete = True
    return log


def _hidden_cache(model: MultiExitModel, data: EncodedData, layers: list[int]):
    """Frozen eval-mode states after each block in ``layers`` plus last-exit outputs."""
    n, M = len(data), model.n_layers
    width = max(len(s) for s in data.seqs)
    hidden = {m: np.empty((n, width, model.config.d_model)) for m in layers}
    t_rep = np.empty((n, model.rep_dim))
    t_logits = np.empty((n, model.config.n_classes))
    for s in range(0, n, EVAL_BATCH):
        idx = np.arange(s, min(n, s + EVAL_BATCH))
        ids = np.full((idx.size, width), 1, dtype=np.int64)
        for r, i in enumerate(idx):
            ids[r, :len(data.seqs[i])] = data.seqs[i]
        with no_grad():
            hs = model.encode(ids, train=False)
            rep, logits = model.exit_forward(M, hs[M - 1], ids)
        for m in layers:
            hidden[m][idx] = hs[m - 1].data
        t_rep[idx], t_logits[idx] = rep.data, logits.data
    return hidden, t_rep, t_logits


def train_stage2(model: MultiExitModel, data: EncodedData, cfg: RegimeConfig,
                 eval_data: EncodedData | None = None, log: RunLog | None = None) -> RunLog:
    """Train exits 1..M-1 one after another on the frozen backbone.

    The backbone is run once in eval mode; each exit then trains on the cached
    block outputs, with its own optimizer. Teacher outputs come from exit M.
    """
    cfg.validate()
    if not model.stage1_complete:
        raise ValueError("stage 2 needs a model whose stage 1 is complete")
    log = _new_log(cfg, log)
    M = model.n_layers
    layers = list(range(1, M))
    if not layers:
        return log
    hidden, t_rep, t_logits = _hidden_cache(model, data, layers)
    eval_hidden = _hidden_cache(model, eval_data, layers)[0] if eval_data is not None else None
    t_label = model.label_embeddings(M)
    lam, thres = _gate(cfg, cfg.objective, cfg.use_acl_grad)

    for m in layers:
        def forward(batch, rng, m=m):
            h = Tensor(hidden[m][batch.index, :batch.ids.shape[1]])
            rep, logits = model.exit_forward(m, h, batch.ids, train=True, rng=rng)
            ce = ce_loss(logits, batch.labels)
            ce_val = ce.item()
            if cfg.kd:
                ce = T.add(ce, T.scale(kd_loss(logits, t_logits[batch.index], cfg.kd_temperature),
                                       cfg.kd_weight))
            acl = _contrastive(cfg.objective, rep, batch.labels, model.label_embedding_tensor(m),
                               cfg.temperature, (t_rep[batch.index], t_label))
            return ce, acl, {m: (logits.data, ce_val)}

        def evaluate(exits, m=m):
            hits = 0
            for s in range(0, len(eval_data), EVAL_BATCH):
                idx = np.arange(s, min(len(eval_data), s + EVAL_BATCH))
                ids = eval_data.pad(idx)
                with no_grad():
                    _, logits = model.exit_forward(m, Tensor(eval_hidden[m][idx, :ids.shape[1]]), ids)
                hits += int((logits.data.argmax(axis=-1) == eval_data.labels[idx]).sum())
            return {m: hits / len(eval_data)}

        phase = _Phase("stage2", f"exit:{m}", [m], forward, lam, thres)
        _train_loop(model, data, cfg, log, [phase] * cfg.epochs,
                    np.random.default_rng([cfg.seed, 2, m]),
                    evaluate if eval_data is not None else None)
    return log


def _joint_forward(model: MultiExitModel):
    def forward(batch, rng):
        out = model.forward(batch.ids, train=True, rng=rng)
        total, per_exit = None, {}
        for m, (_, logits) in out.items():
            ce = ce_loss(logits, batch.labels)
            total = ce if total is None else T.add(total, ce)
            per_exit[m] = (logits.data, ce.item())
        return total, None, per_exit
    return forward


def _last_exit_forward(model: MultiExitModel):
    M = model.n_layers

    def forward(batch, rng):
        _, logits = model.forward(batch.ids, exits=[M], train=True, rng=rng)[M]
        ce = ce_loss(logits, batch.labels)
        return ce, None, {M: (logits.data, ce.item())}
    return forward


def _all_exits_eval(model, eval_data):
    return None if eval_data is None else (lambda ex: exit_accuracies(model, eval_data, ex))


def train_jt(model: MultiExitModel, data: EncodedData, cfg: RegimeConfig,
             eval_data: EncodedData | None = None, log: RunLog | None = None) -> RunLog:
    """Minimise the sum of every exit's cross-entropy over all parameters."""
    cfg.validate()
    log = _new_log(cfg, log)
    exits = list(range(1, model.n_layers + 1))
    phase = _Phase("jt", "all", exits, _joint_forward(model))
    _train_loop(model, data, cfg, log, [phase] * cfg.epochs,
                np.random.default_rng([cfg.seed, 1]), _all_exits_eval(model, eval_data))
    model.stage1_complete = True
    return log


def train_alt(model: MultiExitModel, data: EncodedData, cfg: RegimeConfig,
              eval_data: EncodedData | None = None, log: RunLog | None = None) -> RunLog:
    """Odd epochs train the last exit with the backbone, even epochs train all exits jointly."""
    cfg.validate()
    log = _new_log(cfg, log)
    M = model.n_layers
    odd = _Phase("alt_odd", "stage1", [M], _last_exit_forward(model))
    even = _Phase("alt_even", "all", list(range(1, M + 1)), _joint_forward(model))
    phases = [odd if e % 2 == 1 else even for e in range(1, cfg.epochs + 1)]
    _train_loop(model, data, cfg, log, phases, np.random.default_rng([cfg.seed, 1]),
                _all_exits_eval(model, eval_data))
    model.stage1_complete = True
    return log


def train_model(model: MultiExitModel, data: EncodedData, cfg: RegimeConfig,
                eval_data: EncodedData | None = None, log: RunLog | None = None) -> RunLog:
    """Run the full recipe named by ``cfg.regime``."""
    cfg.validate()
    log = _new_log(cfg, log)
    if cfg.regime == "jt":
        return train_jt(model, data, cfg, eval_data, log)
    if cfg.regime == "alt":
        return train_alt(model, data, cfg, eval_data, log)
    train_stage1(model, data, cfg, eval_data, log)
    if cfg.regime == "2st":
        train_stage2(model, data, cfg, eval_data, log)
    return log


def ablation_presets(base: RegimeConfig | None = None) -> dict[str, RegimeConfig]:
    """The component ladder: full method, then one piece removed at a time (cumulatively)."""
    base = RegimeConfig() if base is None else base
    r = lambda **kw: dataclasses.replace(base, regime="2st", **kw)  # noqa: E731
    return {
        "acl": r(stage1_objective="acl_embed", objective="acl_cl", use_acl_grad=True,
                 stage1_acl_grad=True, kd=False),
        "ce_backbone": r(stage1_objective="ce", objective="acl_cl", use_acl_grad=True,
                         stage1_acl_grad=False, kd=False),
        "no_acl_cl": r(stage1_objective="ce", objective="acl_embed", use_acl_grad=True,
                       stage1_acl_grad=False, kd=True),
        "no_acl_grad": r(stage1_objective="ce", objective="acl_embed", use_acl_grad=False,
                         stage1_acl_grad=False, kd=True),
        "ce_scl": r(stage1_objective="ce", objective="ce_scl", use_acl_grad=False,
                    stage1_acl_grad=False, kd=True),
        "2st": r(stage1_objective="ce", objective="ce", use_acl_grad=False,
                 stage1_acl_grad=False, kd=True),
    }


@dataclass
class ExperimentResult:
    rows: list[tuple[int, int, float]]
    cross_layer: dict[int, float]
    logs: dict[int, RunLog]
    models: dict[int, MultiExitModel]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.cross_layer.values())))

    @property
    def std(self) -> float:
        return float(np.std(list(self.cross_layer.values())))

    def table_csv(self) -> str:
        lines = ["seed,exit_layer,score"]
        lines += [f"{s},{m},{score!r}" for s, m, score in self.rows]
        return "\n".join(lines) + "\n"


def cross_layer_average(scores: dict[int, float]) -> float:
    """Mean score over all exits."""
    return float(np.mean(list(scores.values())))


def run_experiment(cfg: RegimeConfig, model_config: ModelConfig, train: EncodedData,
                   eval_data: EncodedData, seeds) -> ExperimentResult:
    """Train one model per seed and score every exit on ``eval_data``."""
    rows, avg, logs, models = [], {}, {}, {}
    for s in seeds:
        c = dataclasses.replace(cfg, seed=int(s)).validate()
        model = MultiExitModel(model_config, seed=int(s))
        logs[s] = train_model(model, train, c, eval_data)
        scores = exit_accuracies(model, eval_data)
        rows.extend((int(s), m, float(scores[m])) for m in sorted(scores))
        avg[s] = cross_layer_average(scores)
        models[s] = model
    return ExperimentResult(rows, avg, logs, models)
