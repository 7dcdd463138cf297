"""Round loop, baselines, evaluation and communication accounting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .client import (
    ClientState,
    ClientUpdate,
    TrainConfig,
    local_round,
    new_client,
)
from .config import RunConfig
from .data import LabeledDataset, generate_from_spec, make_test_sets, partition
from .errors import NumericalError
from .io import LEDGER_HEADER, METRICS_HEADER, save_model, write_manifest, write_rows
from .losses import LossSpec, compute_gradients, cross_entropy_grad
from .nn import ModelParams, init_model, param_count, predict, sgd_step
from .seeding import child_rng
from .server import (
    CftSchedule,
    GlobalState,
    cft_schedule,
    initial_state,
    make_broadcast,
    server_round,
    weighted_sum,
)

logger = logging.getLogger(__name__)


@dataclass
class Setup:
    train: list[LabeledDataset]
    balanced_test: LabeledDataset
    matched_tests: list[LabeledDataset]
    init_model: ModelParams


@dataclass
class RunResult:
    config: RunConfig
    metrics: list[dict] = field(default_factory=list)
    ledger: list[dict] = field(default_factory=list)
    models: list[ModelParams] = field(default_factory=list)
    global_model: Optional[ModelParams] = None
    schedule: Optional[CftSchedule] = None
    # fedavg_ft only: evaluation of the shared model before local fine-tuning
    pre_finetune: Optional[dict] = None
    global_state: Optional[GlobalState] = None
    trace: list = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.metrics[-1]

    @property
    def final_balanced_acc(self) -> float:
        return self.final["mean_balanced_acc"]

    @property
    def final_matched_acc(self) -> float:
        return self.final["mean_matched_acc"]


def build_setup(cfg: RunConfig) -> Setup:
    data = generate_from_spec(cfg.mixture)
    train = partition(data, cfg.partition_spec)
    balanced, matched = make_test_sets(cfg.mixture, train, per_class=cfg.test_per_class)
    model = init_model(cfg.input_dim, cfg.hidden_dims, cfg.feature_dim, cfg.num_classes,
                       child_rng(cfg.seed, "global_init"))
    return Setup(train, balanced, matched, model)


def select_clients(N: int, fraction: float, rng: np.random.Generator) -> list[int]:
    """ceil(fraction * N) distinct client ids, uniformly without replacement, sorted."""
    m = min(N, math.ceil(fraction * N - 1e-12))
    if m >= N:
        return list(range(N))
    return sorted(int(i) for i in rng.choice(N, size=m, replace=False))


def accuracy(model: ModelParams, data: LabeledDataset) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(predict(model, data.X).argmax(axis=1) == data.y))


def mean_ce(model: ModelParams, data: LabeledDataset) -> float:
    if len(data) == 0:
        return 0.0
    return cross_entropy_grad(predict(model, data.X), data.y)[0]


def evaluate(models: Sequence[ModelParams], balanced: LabeledDataset,
             matched: Sequence[LabeledDataset], train: Sequence[LabeledDataset]) -> dict:
    """Per-client and mean accuracies, plus the sample-weighted system loss
    sum_i |D_i|/|D| * mean CE of model i on its own training data."""
    bal = [accuracy(m, balanced) for m in models]
    mat = [accuracy(m, t) for m, t in zip(models, matched)]
    sizes = np.array([len(d) for d in train], dtype=np.float64)
    alpha = sizes / sizes.sum()
    loss = float(sum(a * mean_ce(m, d) for a, m, d in zip(alpha, models, train)))
    return {
        "balanced_acc": bal,
        "matched_acc": mat,
        "mean_balanced_acc": float(np.mean(bal)),
        "mean_matched_acc": float(np.nanmean(mat)),
        "system_loss": loss,
    }


def _metrics_row(r: int, method: str, ev: dict, up: int, down: int) -> dict:
    return {
        "round": r, "method": method,
        "mean_balanced_acc": ev["mean_balanced_acc"],
        "mean_matched_acc": ev["mean_matched_acc"],
        "system_loss": ev["system_loss"],
        "upload_params": up, "download_params": down,
    }


def _ledger_row(r: int, participants, up: dict, down: dict, before=float("nan"), after=float("nan")) -> dict:
    row = {"round": r, "participants": " ".join(map(str, participants))}
    for prefix, d in (("up", up), ("down", down)):
        for kind in ("extractor", "classifier", "prototypes", "model"):
            row[f"{prefix}_{kind}"] = int(d.get(kind, 0))
        row[f"{prefix}_total"] = sum(int(d.get(k, 0)) for k in ("extractor", "classifier", "prototypes", "model"))
    row["train_loss_before"] = before
    row["train_loss_after"] = after
    return row


def comm_ledger_totals(ledger: Sequence[dict], model_params: int = 0) -> dict:
    """Per-kind and total parameter counts moved over a run.

    ``upload_ratio`` compares total uploads with every participant uploading
    a full model of ``model_params`` parameters each round.
    """
    out = {}
    for prefix in ("up", "down"):
        for kind in ("extractor", "classifier", "prototypes", "model", "total"):
            out[f"{prefix}_{kind}"] = int(sum(int(r[f"{prefix}_{kind}"]) for r in ledger))
    uploads = sum(len(str(r["participants"]).split()) for r in ledger)
    ref = uploads * model_params
    out["reference_full_model"] = ref
    out["upload_ratio"] = out["up_total"] / ref if ref else 0.0
    return out


def _train_plain(model: ModelParams, data: LabeledDataset, epochs: int, lr: float,
                 batch_size: int, rng: np.random.Generator) -> ModelParams:
    spec = LossSpec()
    n = len(data)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            _, g = compute_gradients(model, (data.X[idx], data.y[idx]), spec)
            model = sgd_step(model, g, lr)
    return model


def _extractor_params(model: ModelParams) -> int:
    return param_count(model.extractor)


def run_fedmate(cfg: RunConfig, setup: Optional[Setup] = None, keep_trace: bool = False) -> RunResult:
    setup = setup or build_setup(cfg)
    init = setup.init_model
    K, C = cfg.feature_dim, cfg.num_classes
    schedule = cft_schedule(_extractor_params(init), C * K, cfg.cft_x, cfg.rounds)
    tcfg = TrainConfig(
        epochs=cfg.local_epochs, batch_size=cfg.batch_size, lr=cfg.local_lr,
        lambda_c=cfg.lambda_c, lambda_e=cfg.lambda_e, t_max=max(cfg.rounds, 1),
        upload_rounds=schedule.upload_rounds,
    )
    clients: list[ClientState] = [new_client(i, init, d, cfg.seed) for i, d in enumerate(setup.train)]
    state: GlobalState = initial_state(init.extractor, init.classifier)
    result = RunResult(cfg, schedule=schedule)
    ev = evaluate([c.model for c in clients], setup.balanced_test, setup.matched_tests, setup.train)
    result.metrics.append(_metrics_row(0, "fedmate", ev, 0, 0))
    up_cum = down_cum = 0
    clf_params = param_count(init.classifier)
    ext_params = _extractor_params(init)
    for t in range(cfg.rounds):
        b = make_broadcast(state)
        selected = select_clients(cfg.num_clients, cfg.fraction, child_rng(cfg.seed, "select", t))
        updates: list[ClientUpdate] = []
        for i in selected:
            try:
                clients[i], u = local_round(clients[i], b, tcfg)
            except NumericalError as exc:
                logger.warning("client %d excluded from round %d: %s", i, t, exc)
                continue
            updates.append(u)
        n = len(selected)
        down = {
            "classifier": n * clf_params,
            "prototypes": n * (K * len(b.global_prototypes) if b.global_prototypes else 0),
            "extractor": n * ext_params if b.global_extractor is not None else 0,
        }
        up = {
            "classifier": len(updates) * clf_params,
            "prototypes": sum(K * len(u.prototypes) for u in updates),
            "extractor": sum(ext_params for u in updates if u.extractor is not None),
        }
        if keep_trace:
            result.trace.append((b, list(updates)))
        state = server_round(state, updates, cfg.server_lr, cfg.finetune_steps)
        before = float(np.mean([u.loss_before for u in updates])) if updates else float("nan")
        after = float(np.mean([u.loss_after for u in updates])) if updates else float("nan")
        row = _ledger_row(t + 1, [u.client_id for u in updates], up, down, before, after)
        result.ledger.append(row)
        up_cum += row["up_total"]
        down_cum += row["down_total"]
        ev = evaluate([c.model for c in clients], setup.balanced_test, setup.matched_tests, setup.train)
        result.metrics.append(_metrics_row(t + 1, "fedmate", ev, up_cum, down_cum))
    result.models = [c.model for c in clients]
    result.global_model = ModelParams(state.extractor, state.classifier)
    result.global_state = state
    return result


def run_baseline_fedavg_ft(cfg: RunConfig, setup: Optional[Setup] = None, finetune_epochs=None) -> RunResult:
    """FedAvg on the whole model, then every client fine-tunes the final
    global model locally for ``finetune_epochs`` (default E) epochs."""
    setup = setup or build_setup(cfg)
    model = setup.init_model
    full = param_count(model)
    sizes = [len(d) for d in setup.train]
    result = RunResult(cfg)
    ev = evaluate([model] * cfg.num_clients, setup.balanced_test, setup.matched_tests, setup.train)
    result.metrics.append(_metrics_row(0, "fedavg_ft", ev, 0, 0))
    up_cum = down_cum = 0
    for t in range(cfg.rounds):
        selected = select_clients(cfg.num_clients, cfg.fraction, child_rng(cfg.seed, "select", t))
        local, used, losses_before, losses_after = [], [], [], []
        for i in selected:
            rng = child_rng(cfg.seed, "client", i, t)
            losses_before.append(mean_ce(model, setup.train[i]))
            try:
                m = _train_plain(model, setup.train[i], cfg.local_epochs, cfg.local_lr, cfg.batch_size, rng)
            except NumericalError as exc:
                logger.warning("client %d excluded from round %d: %s", i, t, exc)
                continue
            losses_after.append(mean_ce(m, setup.train[i]))
            local.append(m)
            used.append(i)
        if local:
            a = np.array([sizes[i] for i in used], dtype=np.float64)
            a = a / a.sum()
            arrays = [weighted_sum(a, [m.arrays()[j] for m in local]) for j in range(len(model.arrays()))]
            nl = len(model.extractor)
            model = ModelParams(
                tuple((arrays[2 * j], arrays[2 * j + 1]) for j in range(nl)),
                (arrays[2 * nl], arrays[2 * nl + 1]),
            )
        row = _ledger_row(t + 1, used, {"model": full * len(used)}, {"model": full * len(selected)},
                          float(np.mean(losses_before)) if losses_before else float("nan"),
                          float(np.mean(losses_after)) if losses_after else float("nan"))
        result.ledger.append(row)
        up_cum += row["up_total"]
        down_cum += row["down_total"]
        ev = evaluate([model] * cfg.num_clients, setup.balanced_test, setup.matched_tests, setup.train)
        result.metrics.append(_metrics_row(t + 1, "fedavg_ft", ev, up_cum, down_cum))
    result.pre_finetune = dict(result.metrics[-1])
    result.global_model = model
    epochs = cfg.local_epochs if finetune_epochs is None else finetune_epochs
    tuned = [
        _train_plain(model, d, epochs, cfg.local_lr, cfg.batch_size, child_rng(cfg.seed, "finetune", i))
        for i, d in enumerate(setup.train)
    ]
    ev = evaluate(tuned, setup.balanced_test, setup.matched_tests, setup.train)
    result.metrics.append(_metrics_row(cfg.rounds, "fedavg_ft:finetuned", ev, up_cum, down_cum))
    result.models = tuned
    return result


def run_baseline_local(cfg: RunConfig, setup: Optional[Setup] = None) -> RunResult:
    """Every client trains alone for E epochs per round; nothing is sent."""
    setup = setup or build_setup(cfg)
    models = [setup.init_model] * cfg.num_clients
    result = RunResult(cfg)
    ev = evaluate(models, setup.balanced_test, setup.matched_tests, setup.train)
    result.metrics.append(_metrics_row(0, "local_only", ev, 0, 0))
    for t in range(cfg.rounds):
        before = [mean_ce(m, d) for m, d in zip(models, setup.train)]
        models = [
            _train_plain(m, d, cfg.local_epochs, cfg.local_lr, cfg.batch_size, child_rng(cfg.seed, "client", i, t))
            for i, (m, d) in enumerate(zip(models, setup.train))
        ]
        after = [mean_ce(m, d) for m, d in zip(models, setup.train)]
        result.ledger.append(_ledger_row(t + 1, [], {}, {}, float(np.mean(before)), float(np.mean(after))))
        ev = evaluate(models, setup.balanced_test, setup.matched_tests, setup.train)
        result.metrics.append(_metrics_row(t + 1, "local_only", ev, 0, 0))
    result.models = models
    return result


RUNNERS = {
    "fedmate": run_fedmate,
    "fedavg_ft": run_baseline_fedavg_ft,
    "local_only": run_baseline_local,
}


def run_simulation(cfg: RunConfig, setup: Optional[Setup] = None) -> RunResult:
    """Run ``cfg.method`` and, if ``cfg.out_dir`` is set, write its outputs."""
    result = RUNNERS[cfg.method](cfg, setup)
    if cfg.out_dir:
        write_outputs(result, cfg.out_dir)
    return result


def write_outputs(result: RunResult, out_dir) -> None:
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    cfg = result.config
    extra = {}
    if result.schedule is not None:
        extra["cft"] = {
            "q": result.schedule.q,
            "x": result.schedule.x,
            "skip_stride": result.schedule.skip_stride,
        }
    write_manifest(out / "manifest.json", cfg.to_dict(), cfg.seed, __version__, extra)
    write_rows(out / "metrics.csv", METRICS_HEADER, result.metrics)
    write_rows(out / "ledger.csv", LEDGER_HEADER, result.ledger)
    for i, m in enumerate(result.models):
        save_model(m, out / "models" / f"client_{i:03d}.fmat")
    if result.global_model is not None:
        save_model(result.global_model, out / "models" / "global.fmat")
