"""Initialization, exact gradients, Adam and the training loop."""

from __future__ import annotations

import contextlib
import json
import logging
import math
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .config import TrainConfig
from .dataset import InteractionDataset, NormalizedGraph, build_graph, sample_batch
from .encoder import backpropagate, encode, load_matrix, save_matrix
from .evaluation import evaluate
from .mixing import MixBatch, assemble_views, sample_coefficients
from .objective import LossConfig, LossError, loss_and_grad, total_loss

logger = logging.getLogger(__name__)


def xavier_init(rows: int, cols: int, seed, dtype=np.float64) -> np.ndarray:
    """Glorot-uniform table on ``[-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))]``."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be positive")
    bound = math.sqrt(6.0 / (rows + cols))
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    @classmethod
    def like(cls, table, config: TrainConfig | None = None):
        config = config or TrainConfig()
        return cls(np.zeros_like(table), np.zeros_like(table), 0, config.learning_rate,
                   config.adam_beta1, config.adam_beta2, config.adam_eps)


def adam_step(state: OptimizerState, table: np.ndarray, grad: np.ndarray):
    """Bias-corrected Adam update, in place. Returns ``(table, state)``."""
    if grad.shape != table.shape or state.m.shape != table.shape:
        raise ValueError(f"shape mismatch: table {table.shape}, grad {grad.shape}, moments {state.m.shape}")
    state.step += 1
    b1, b2 = state.adam_beta1, state.adam_beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * (grad * grad)
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    table -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.adam_eps)
    return table, state


def compute_gradients(mix: MixBatch, graph: NormalizedGraph, table: np.ndarray, config: TrainConfig, counter=None,
                      with_report=False):
    """Gradient of the joint objective w.r.t. the input table.

    ``mix`` must have been assembled from the readout of ``table``; its
    sampled coefficients are constants of the step.
    """
    report, grad_final, grad_table = loss_and_grad(mix, table, config.loss_config())
    grad = backpropagate(graph, grad_final, config.layers, config.include_layer0, counter) + grad_table
    if not np.all(np.isfinite(grad)):
        raise LossError("non-finite gradient")
    return (grad, report) if with_report else grad


def objective_at(table, graph, triplets, coeffs, num_users, layers, loss_cfg: LossConfig, include_layer0=False):
    """Joint objective as a function of the table with all random draws frozen."""
    final = encode(graph, table, layers, include_layer0)
    mix = assemble_views(triplets, coeffs, final, num_users)
    return total_loss(mix, table, loss_cfg)


@dataclass
class TrainResult:
    table: np.ndarray
    log: list
    best_metrics: dict
    best_epoch: int
    steps: int
    phase_seconds: dict = field(default_factory=dict)
    edge_visits: Counter = field(default_factory=Counter)
    mix_ops: int = 0


def _batch_sizes(num_train: int, batch_size: int) -> list[int]:
    full, rem = divmod(num_train, batch_size)
    return [batch_size] * full + ([rem] if rem else [])


def train(ds: InteractionDataset, config: TrainConfig, graph: NormalizedGraph | None = None,
          step_log=None, epoch_log=None) -> TrainResult:
    """Mini-batch training with periodic evaluation and early stopping.

    ``step_log`` receives one loss dict per step and ``epoch_log`` one record
    per epoch. The returned table is the best one seen by Recall@topn (the
    last one if no evaluation ran).
    """
    graph = graph or build_graph(ds)
    init_seq, sample_seq = np.random.SeedSequence(config.seed).spawn(2)
    table = xavier_init(ds.num_nodes, config.embed_dim, init_seq, config.dtype)
    rng = np.random.default_rng(sample_seq)
    state = OptimizerState.like(table, config)
    mix_params = config.mix_params()
    train_keys = ds.train_keys()
    phases = defaultdict(float)
    visits = Counter()
    mix_ops = 0

    log = []
    best_table, best_metrics, best_epoch = table.copy(), {}, 0
    best_recall, stale = -1.0, 0
    start = time.perf_counter()
    limiter = _single_thread() if config.deterministic else contextlib.nullcontext()

    with limiter:
        for epoch in range(1, config.max_epochs + 1):
            losses = []
            for size in _batch_sizes(len(ds.train), config.batch_size):
                t0 = time.perf_counter()
                triplets = sample_batch(ds, size, rng, train_keys)
                t1 = time.perf_counter()
                final = encode(graph, table, config.layers, config.include_layer0, visits)
                t2 = time.perf_counter()
                coeffs = sample_coefficients(size, mix_params, rng)
                mix = assemble_views(triplets, coeffs, final, ds.num_users)
                t3 = time.perf_counter()
                grad, report = compute_gradients(mix, graph, table, config, visits, with_report=True)
                t4 = time.perf_counter()
                adam_step(state, table, grad)
                t5 = time.perf_counter()
                for name, dt in zip(("sample", "encode", "mix", "gradient", "update"),
                                    (t1 - t0, t2 - t1, t3 - t2, t4 - t3, t5 - t4)):
                    phases[name] += dt
                mix_ops += mix.op_count
                losses.append(report.l_total)
                if step_log is not None:
                    step_log(report.as_log(state.step))

            record = {"epoch": epoch, "total_loss": math.fsum(losses) / len(losses),
                      f"recall{config.topn}": None, f"ndcg{config.topn}": None}
            improved = False
            if epoch % config.eval_every == 0:
                res = evaluate(table, graph, ds, config.topn, config.layers, config.include_layer0)
                record[f"recall{config.topn}"] = res.mean_recall
                record[f"ndcg{config.topn}"] = res.mean_ndcg
                if res.mean_recall > best_recall:
                    best_recall, stale, improved = res.mean_recall, 0, True
                    best_table, best_epoch = table.copy(), epoch
                    best_metrics = {"recall": res.mean_recall, "ndcg": res.mean_ndcg, "users": res.num_users}
                else:
                    stale += 1
            record["elapsed_s"] = 0.0 if config.deterministic else round(time.perf_counter() - start, 6)
            record["best_so_far"] = best_recall if best_recall >= 0 else None
            log.append(record)
            if epoch_log is not None:
                epoch_log(record)
            logger.info("epoch %d loss %.6f recall %s%s", epoch, record["total_loss"],
                        record[f"recall{config.topn}"], " *" if improved else "")
            if config.patience and stale >= config.patience:
                break

    if not best_metrics:
        best_table, best_epoch = table.copy(), len(log)
    return TrainResult(best_table, log, best_metrics, best_epoch, state.step, dict(phases), visits, mix_ops)


def _single_thread():
    return threadpool_limits(limits=1)


def save_checkpoint(path, table: np.ndarray, config: TrainConfig, steps: int, extra=None) -> None:
    """MXEMB table plus a ``.json`` sidecar holding the config and step count."""
    save_matrix(path, table)
    sidecar = {"config": config.to_dict(), "steps": steps}
    sidecar.update(extra or {})
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Returns ``(table, sidecar dict or None)``."""
    table = load_matrix(path)
    try:
        with open(f"{path}.json", "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
    except FileNotFoundError:
        sidecar = None
    return table, sidecar
