"""Variational training loop: reconstruction plus KL to the edge prior.

Each batch draws one relaxed sample per edge of its local graph, decodes
the gold expressions under teacher forcing, and regularizes the posterior
of exactly those edges toward the Bernoulli prior.  The relaxation
temperature anneals linearly per epoch; early stopping watches validation
answer accuracy with a fixed patience.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .corpus import (Problem, Vocabulary, answers_match, build_vocabulary,
                     evaluate_expression)
from .diffcore import Adam, NonFiniteError, RunRng, Tape, Tensor, backward, \
    dtype_scope, recording, zero_grads
from .knowledge import KnowledgePrior, build_prior, kl_to_prior
from .solver import Batch, Solver, SolverConfig, bucket_problems, \
    parse_decode_output
from .synthgen import PlantedKG

CHECKPOINT_VERSION = 1
METRICS_HEADER = ("epoch", "loss", "nll", "kl", "tau", "val_acc")


class TrainingAborted(RuntimeError):
    """Training hit a non-finite value; the message names the operation."""


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 32
    learning_rate: float = 1e-3
    d: int = 64
    lambda_kl: float = 1.0
    alpha: float = 0.2
    delta_base: float = 0.1
    delta_known: float = 0.5
    tau_start: float = 0.5
    tau_end: float = 0.1
    dropout: float = 0.5
    seed: int = 1
    backbone: str = "birnn"
    use_se: bool = True
    use_re: bool = True
    knowledge_mode: str = "learned"   # "learned" | "external" | "none"
    relaxation: str = "logistic"
    patience: int = 20
    precision: str = "float32"
    min_count: int = 5

    def __post_init__(self):
        if not self.tau_start >= self.tau_end > 0:
            raise ValueError("need tau_start >= tau_end > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def solver_config(self) -> SolverConfig:
        return SolverConfig(d=self.d, backbone=self.backbone,
                            use_se=self.use_se, use_re=self.use_re,
                            knowledge_mode=self.knowledge_mode,
                            relaxation=self.relaxation, dropout=self.dropout)


def temperature_at(step: int, total_steps: int, tau_start: float,
                   tau_end: float) -> float:
    """Linear interpolation from tau_start to tau_end."""
    if total_steps <= 0:
        return tau_end
    frac = min(max(step / total_steps, 0.0), 1.0)
    return tau_start + (tau_end - tau_start) * frac


def elbo_loss(batch: Batch, solver: Solver, prior: KnowledgePrior | None,
              tau: float, lambda_kl: float, gumbel_rng, dropout_rng
              ) -> tuple[Tensor, Tensor, Tensor]:
    """(loss, reconstruction NLL, KL) for one batch.

    One relaxed sample per batch-local edge, shared across the batch's
    problems.  With ``lambda_kl`` zero or no prior the loss is the plain
    supervised NLL.
    """
    want_kl = prior is not None and solver.config.knowledge_mode == "learned"
    graph = solver.edge_matrices(batch, train=True, tau=tau,
                                 noise_rng=gumbel_rng,
                                 prior=prior if want_kl else None)
    nll = solver.teacher_forced_nll(batch, graph, train=True,
                                    dropout_rng=dropout_rng)
    if want_kl and graph.kl_probs is not None:
        kl = kl_to_prior(graph.kl_probs, graph.kl_priors)
    else:
        kl = Tensor(np.zeros(()))
    loss = dc.add(nll, dc.scalar_mul(kl, lambda_kl)) if lambda_kl != 0.0 else nll
    return loss, nll, kl


def evaluate_answer_accuracy(solver: Solver, problems: list[Problem],
                             batch_size: int = 64) -> float:
    """Greedy-decode accuracy; unparseable or non-evaluating output counts
    as wrong."""
    if not problems:
        return float("nan")
    batches = bucket_problems(problems, solver.vocab, batch_size,
                              solver.config.max_slots, with_gold=False)
    correct = 0
    for batch in batches:
        graph = solver.edge_matrices(batch, train=False)
        outputs = solver.decode_batch(batch, graph)
        for problem, tokens in zip(batch.problems, outputs):
            tree = parse_decode_output(tokens, problem.slot_count())
            if tree is None:
                continue
            try:
                value = float(evaluate_expression(tree, problem.number_values))
            except Exception:
                continue
            if answers_match(value, problem.gold_answer):
                correct += 1
    return correct / len(problems)


# ---------------------------------------------------------------------------
# Trained model bundle and checkpointing
# ---------------------------------------------------------------------------

@dataclass
class TrainedModel:
    """Everything a run produced: live solver, best snapshot, bookkeeping."""

    solver: Solver
    vocab: Vocabulary
    config: TrainConfig
    metrics: list[dict]
    epoch: int
    best_epoch: int
    best_val_acc: float
    best_params: dict[str, np.ndarray]
    adam_state: dict
    rng_state: dict
    known_ww: set[tuple[int, int]] = field(default_factory=set)

    def best_solver(self) -> Solver:
        """A solver loaded with the best-validation parameters."""
        clone = Solver(self.vocab, self.solver.config,
                       np.random.default_rng(0),
                       external_ww=self.solver.external_ww,
                       external_wo=self.solver.external_wo)
        clone.load_param_arrays(self.best_params)
        return clone

    def save(self, path) -> None:
        save_checkpoint(self, path)


def _arrays_to_json(arrays: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "data": np.asarray(v, dtype=np.float64).reshape(-1).tolist()}
            for k, v in arrays.items()}


def _arrays_from_json(payload: dict) -> dict[str, np.ndarray]:
    out = {}
    for k, spec in payload.items():
        arr = np.asarray(spec["data"], dtype=np.float64)
        out[k] = arr.reshape(spec["shape"])
    return out


def save_checkpoint(model: TrainedModel, path) -> None:
    """Self-describing JSON: version, config, vocab, tensors with shapes,
    optimizer and rng state, schedule position."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocab": model.vocab.to_dict(),
        "epoch": model.epoch,
        "best_epoch": model.best_epoch,
        "best_val_acc": model.best_val_acc,
        "params": _arrays_to_json(model.solver.param_arrays()),
        "best_params": _arrays_to_json(model.best_params),
        "adam": {
            "step_count": model.adam_state["step_count"],
            "lr": model.adam_state["lr"],
            "beta1": model.adam_state["beta1"],
            "beta2": model.adam_state["beta2"],
            "eps": model.adam_state["eps"],
            "m": _arrays_to_json(model.adam_state["m"]),
            "v": _arrays_to_json(model.adam_state["v"]),
        },
        "rng": model.rng_state,
        "known_ww": sorted([list(e) for e in model.known_ww]),
        "external_ww": sorted([list(e) for e in model.solver.external_ww]),
        "external_wo": sorted([list(e) for e in model.solver.external_wo]),
        "metrics": model.metrics,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> TrainedModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('version')!r} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    config = TrainConfig(**payload["config"])
    vocab = Vocabulary.from_dict(payload["vocab"])
    with dtype_scope(config.precision):
        solver = Solver(vocab, config.solver_config(), np.random.default_rng(0),
                        external_ww={tuple(e) for e in payload["external_ww"]},
                        external_wo={tuple(e) for e in payload["external_wo"]})
        try:
            solver.load_param_arrays(_arrays_from_json(payload["params"]))
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"parameter mismatch in {path}: {exc}")
        best = {k: np.asarray(v, dtype=solver.params[k].data.dtype)
                for k, v in _arrays_from_json(payload["best_params"]).items()}
    adam_raw = payload["adam"]
    adam_state = {
        "step_count": adam_raw["step_count"], "lr": adam_raw["lr"],
        "beta1": adam_raw["beta1"], "beta2": adam_raw["beta2"],
        "eps": adam_raw["eps"],
        "m": _arrays_from_json(adam_raw["m"]),
        "v": _arrays_from_json(adam_raw["v"]),
    }
    return TrainedModel(
        solver=solver, vocab=vocab, config=config,
        metrics=[dict(r) for r in payload["metrics"]],
        epoch=payload["epoch"], best_epoch=payload["best_epoch"],
        best_val_acc=payload["best_val_acc"], best_params=best,
        adam_state=adam_state, rng_state=payload["rng"],
        known_ww={tuple(e) for e in payload["known_ww"]})


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([row["epoch"], repr(row["loss"]), repr(row["nll"]),
                             repr(row["kl"]), repr(row["tau"]),
                             repr(row["val_acc"])])


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------

def planted_edge_ids(kg: PlantedKG, vocab: Vocabulary
                     ) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Planted edges as vocabulary-index pairs (word-word, word-operator)."""
    ww = []
    for a, b in sorted(kg.ww_edges):
        if a in vocab and b in vocab:
            i, j = vocab.index(a), vocab.index(b)
            ww.append((min(i, j), max(i, j)))
    wo = []
    for w, op in sorted(kg.wo_edges):
        if w in vocab and op in kg.operators:
            wo.append((vocab.index(w), kg.operators.index(op)))
    return ww, wo


def train(config: TrainConfig, train_problems: list[Problem],
          val_problems: list[Problem], planted: PlantedKG | None = None,
          stop_after_epoch: int | None = None,
          resume: TrainedModel | None = None) -> TrainedModel:
    """Run the training loop and return the trained bundle.

    ``planted`` supplies the true edges behind the prior's revealed subset
    (and the clamped graph of "external" mode).  ``stop_after_epoch``
    pauses a run early so it can be checkpointed and resumed; a resumed
    run continues the original schedule and rng streams exactly.
    """
    with dtype_scope(config.precision):
        return _train_inner(config, train_problems, val_problems, planted,
                            stop_after_epoch, resume)


def _train_inner(config, train_problems, val_problems, planted,
                 stop_after_epoch, resume):
    if resume is not None:
        vocab = resume.vocab
        solver = resume.solver
        run_rng = RunRng(config.seed)
        for name in ("init", "data-shuffle", "gumbel", "dropout"):
            run_rng.stream(name)
        run_rng.load_state_dict(resume.rng_state)
        optimizer = Adam(solver.params, lr=config.learning_rate)
        optimizer.load_state_dict(resume.adam_state)
        metrics = list(resume.metrics)
        best_epoch = resume.best_epoch
        best_val = resume.best_val_acc
        best_params = dict(resume.best_params)
        known_ww = set(resume.known_ww)
        prior = KnowledgePrior(config.delta_base, config.delta_known, known_ww)
        start_epoch = resume.epoch + 1
    else:
        vocab = build_vocabulary(train_problems, min_count=config.min_count)
        run_rng = RunRng(config.seed)
        external_ww: set = set()
        external_wo: set = set()
        known_ww: set = set()
        if planted is not None:
            ww_ids, wo_ids = planted_edge_ids(planted, vocab)
            if config.knowledge_mode == "external":
                external_ww, external_wo = set(ww_ids), set(wo_ids)
            prior = build_prior(ww_ids, config.alpha, config.seed,
                                config.delta_base, config.delta_known)
            known_ww = prior.known_ww
        else:
            prior = KnowledgePrior(config.delta_base, config.delta_known, set())
        solver = Solver(vocab, config.solver_config(), run_rng.stream("init"),
                        external_ww=external_ww, external_wo=external_wo)
        optimizer = Adam(solver.params, lr=config.learning_rate)
        metrics = []
        best_epoch = -1
        best_val = -1.0
        best_params = {k: v.copy() for k, v in solver.param_arrays().items()}
        start_epoch = 0

    shuffle_rng = run_rng.stream("data-shuffle")
    gumbel_rng = run_rng.stream("gumbel")
    dropout_rng = run_rng.stream("dropout")
    n_train = len(train_problems)

    last_epoch = config.epochs - 1
    for epoch in range(start_epoch, config.epochs):
        tau = temperature_at(epoch, config.epochs - 1, config.tau_start,
                             config.tau_end)
        batches = bucket_problems(train_problems, vocab, config.batch_size,
                                  solver.config.max_slots, rng=shuffle_rng)
        total_loss = total_nll = total_kl = 0.0
        try:
            for batch in batches:
                tape = Tape()
                zero_grads(solver.params.values())
                with recording(tape):
                    loss, nll, kl = elbo_loss(batch, solver, prior, tau,
                                              config.lambda_kl, gumbel_rng,
                                              dropout_rng)
                backward(tape, loss)
                optimizer.step()
                total_loss += float(loss.data)
                total_nll += float(nll.data)
                total_kl += float(kl.data)
        except NonFiniteError as exc:
            raise TrainingAborted(
                f"epoch {epoch}: non-finite value in training step ({exc})")
        val_acc = evaluate_answer_accuracy(solver, val_problems)
        metrics.append({
            "epoch": epoch,
            "loss": total_loss / n_train,
            "nll": total_nll / n_train,
            "kl": total_kl / max(1, len(batches)),
            "tau": tau,
            "val_acc": val_acc,
        })
        if not np.isnan(val_acc) and val_acc > best_val:
            best_val = val_acc
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in solver.param_arrays().items()}
        if not np.isnan(val_acc) and epoch - best_epoch >= config.patience:
            last_epoch = epoch
            break
        last_epoch = epoch
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break

    if best_epoch < 0:  # no validation signal: the final state is the best
        best_params = {k: v.copy() for k, v in solver.param_arrays().items()}
        best_epoch = last_epoch

    return TrainedModel(
        solver=solver, vocab=vocab, config=config, metrics=metrics,
        epoch=last_epoch, best_epoch=best_epoch, best_val_acc=best_val,
        best_params=best_params, adam_state=optimizer.state_dict(),
        rng_state=run_rng.state_dict(), known_ww=known_ww)
