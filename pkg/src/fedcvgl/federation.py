"""Simulated federated orchestration: N clients, T rounds, weighted fusion.

Two exchange strategies: full-model sharing and encoder-only sharing, where
clients keep their decoder (and projection heads) private and only the coarse
feature extractors are fused. The server holds a running global model; model
exchange goes through an in-process transport that really serializes every
tensor to the wire format, so the communication ledger counts true bytes.

Scenario drivers for the four experiment setups (centralized, single-client,
and the two federated variants) live here too, emitting per-round metrics and
communication CSVs.
"""

from __future__ import annotations

import csv
import json
import multiprocessing
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .features import ModelParams, count_params, group_of, init_params, param_partition
from .metrics import compute_metrics
from .training import Adam, TrainConfig, evaluate_pose_errors, train_epoch
from .solver import SolverConfig
from .world import ClientDataset, load_client_dataset, load_manifest, load_test_dataset

STRATEGY_FULL = "full_model"
STRATEGY_ENCODER = "encoder_only"
STRATEGIES = (STRATEGY_FULL, STRATEGY_ENCODER)

SCENARIOS = ("centralized", "single-client", "fl-full", "fl-encoder")


def group_for_strategy(strategy: str) -> str:
    if strategy == STRATEGY_FULL:
        return "all"
    if strategy == STRATEGY_ENCODER:
        return "encoder"
    raise ValueError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")


@dataclass(frozen=True)
class AggregationStrategy:
    kind: str

    def __post_init__(self):
        group_for_strategy(self.kind)

    @property
    def group(self) -> str:
        return group_for_strategy(self.kind)


@dataclass
class FLConfig:
    n_clients: int = 4
    rounds: int = 7
    strategy: str = STRATEGY_FULL
    weights_mode: str = "dataset_size"  # or "uniform"
    local_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1 or self.rounds < 1:
            raise ValueError("n_clients and rounds must be >= 1")
        group_for_strategy(self.strategy)
        if self.weights_mode not in ("uniform", "dataset_size"):
            raise ValueError(f"unknown weights mode {self.weights_mode!r}")


# ---------------------------------------------------------------------------
# wire format and transport
# ---------------------------------------------------------------------------


def serialize_group(params: ModelParams, group: str):
    """Tensor-file-format blobs for one parameter group plus a JSON manifest.

    Returns (blobs name->bytes, manifest_bytes, payload_bytes, overhead_bytes):
    payload is exactly 4 bytes per scalar; headers and the manifest are the
    separately-reported overhead.
    """
    blobs = {}
    payload = 0
    header = 0
    listing = {}
    for name, t in param_partition(params, group):
        buf = T.tensor_to_bytes(t.data)
        blobs[name] = buf
        payload += 4 * t.numel
        header += T.header_nbytes(t.data.ndim)
        listing[name] = list(t.shape)
    manifest = json.dumps({"group": group, "tensors": listing}, sort_keys=True).encode()
    return blobs, manifest, payload, header + len(manifest)


def deserialize_blobs(blobs: dict) -> dict:
    return {name: T.tensor_from_bytes(buf) for name, buf in blobs.items()}


class InProcessTransport:
    """Message channel seam: counts real serialized bytes and hands the blobs
    over in process. A socket transport would subclass send/recv."""

    def __init__(self, ledger: "CommLedger"):
        self.ledger = ledger

    def send(self, round_idx: int, client: int, direction: str, params: ModelParams, group: str):
        blobs, manifest, payload, overhead = serialize_group(params, group)
        scalars = payload // 4
        self.ledger.add(round_idx, client, direction, scalars, payload, overhead)
        return {"blobs": blobs, "manifest": manifest}

    @staticmethod
    def recv(message: dict) -> dict:
        return deserialize_blobs(message["blobs"])


@dataclass
class CommRecord:
    round: int
    client: int
    direction: str  # "up" | "down"
    scalars: int
    payload_bytes: int
    overhead_bytes: int


class CommLedger:
    """Per-round, per-client uplink/downlink accounting."""

    def __init__(self):
        self.records: list = []

    def add(self, round_idx, client, direction, scalars, payload_bytes, overhead_bytes):
        if direction not in ("up", "down"):
            raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
        self.records.append(CommRecord(round_idx, client, direction, scalars,
                                       payload_bytes, overhead_bytes))

    def total(self, direction: str = None, client: int = None) -> dict:
        sel = [r for r in self.records
               if (direction is None or r.direction == direction)
               and (client is None or r.client == client)]
        return {
            "scalars": sum(r.scalars for r in sel),
            "payload_bytes": sum(r.payload_bytes for r in sel),
            "overhead_bytes": sum(r.overhead_bytes for r in sel),
            "messages": len(sel),
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["round", "client", "direction", "scalars", "payload_bytes", "overhead_bytes"])
            for r in self.records:
                w.writerow([r.round, r.client, r.direction, r.scalars, r.payload_bytes, r.overhead_bytes])


def comm_report(ledger: CommLedger) -> dict:
    """Totals per client and per round plus grand totals."""
    rounds = sorted({r.round for r in ledger.records})
    clients = sorted({r.client for r in ledger.records})
    return {
        "total": ledger.total(),
        "uplink": ledger.total("up"),
        "downlink": ledger.total("down"),
        "per_client": {c: ledger.total(client=c) for c in clients},
        "per_round": {
            rd: {
                "scalars": sum(r.scalars for r in ledger.records if r.round == rd),
                "payload_bytes": sum(r.payload_bytes for r in ledger.records if r.round == rd),
            }
            for rd in rounds
        },
    }


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def aggregate(models: list, weights: list, strategy, client_ids: list = None,
              reference: ModelParams = None) -> ModelParams:
    """Weighted-mean fusion of the strategy's parameter group.

    Weights are normalized; summation runs in float64 in ascending client-id
    order, so the result is exactly permutation-invariant. Parameters outside
    the group come unchanged from ``reference`` (default: the first model in
    canonical order).
    """
    if not models:
        raise ValueError("aggregate: empty model list")
    if len(weights) != len(models):
        raise ValueError(f"aggregate: {len(models)} models vs {len(weights)} weights")
    kind = strategy.kind if isinstance(strategy, AggregationStrategy) else strategy
    group = group_for_strategy(kind)
    if client_ids is not None:
        order = np.argsort(np.asarray(client_ids, dtype=np.int64), kind="stable")
        models = [models[i] for i in order]
        weights = [weights[i] for i in order]
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("aggregate: weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("aggregate: weights sum to zero")
    w = w / total

    names0 = models[0].names()
    for m in models[1:]:
        if m.names() != names0:
            raise T.ShapeError("aggregate: models have different parameter sets")
    group_names = {n for n, _ in param_partition(models[0], group)}
    reference = reference if reference is not None else models[0]
    out = {}
    for name in names0:
        if name in group_names:
            acc = np.zeros(models[0][name].shape, dtype=np.float64)
            for wj, m in zip(w, models):
                if m[name].shape != models[0][name].shape:
                    raise T.ShapeError(f"aggregate: {name} shape mismatch")
                acc += wj * m[name].data.astype(np.float64)
            out[name] = T.Tensor(acc.astype(np.float32), requires_grad=True)
        else:
            out[name] = T.Tensor(reference[name].data.copy(), requires_grad=True)
    return ModelParams(out)


def client_weights(mode: str, datasets: list) -> list:
    if mode == "uniform":
        return [1.0] * len(datasets)
    return [float(len(ds)) for ds in datasets]


# ---------------------------------------------------------------------------
# client worker (usable in a process pool)
# ---------------------------------------------------------------------------

_WORKER_DATASETS: dict = {}


def _get_dataset(data_dir: str, client_id) -> ClientDataset:
    key = (str(data_dir), client_id)
    if key not in _WORKER_DATASETS:
        if client_id == "test":
            _WORKER_DATASETS[key] = load_test_dataset(data_dir)
        elif client_id == "pooled":
            manifest = load_manifest(data_dir)
            samples = []
            for entry in manifest["clients"]:
                samples.extend(load_client_dataset(data_dir, entry["id"]).samples)
            _WORKER_DATASETS[key] = ClientDataset(samples, "pooled")
        else:
            _WORKER_DATASETS[key] = load_client_dataset(data_dir, client_id)
    return _WORKER_DATASETS[key]


def _train_client_job(payload: dict) -> dict:
    T.set_blas_threads(payload.get("blas_threads", 1))
    ds = _get_dataset(payload["data_dir"], payload["client_id"])
    params = ModelParams({n: T.Tensor(a, requires_grad=True)
                          for n, a in deserialize_blobs(payload["blobs"]).items()})
    cfg = payload["train_cfg"]
    opt = Adam(cfg)
    if payload.get("opt_state") is not None:
        opt.load_state_dict(payload["opt_state"])
    stats = []
    for epoch in range(payload["epochs"]):
        _, st = train_epoch(params, ds, cfg, seed=payload["seed"] + epoch, optimizer=opt)
        stats.append(st)
    blobs = {n: T.tensor_to_bytes(params[n].data) for n in params.names()}
    return {"blobs": blobs, "opt_state": opt.state_dict(), "stats": stats,
            "client_id": payload["client_id"]}


def _eval_job(payload: dict) -> list:
    T.set_blas_threads(payload.get("blas_threads", 1))
    ds = _get_dataset(payload["data_dir"], payload.get("dataset_id", "test"))
    params = ModelParams({n: T.Tensor(a, requires_grad=True)
                          for n, a in deserialize_blobs(payload["blobs"]).items()})
    return evaluate_pose_errors(params, ds, payload["train_cfg"])


def run_jobs(fn, payloads: list, workers: int = 1) -> list:
    """Order-preserving map over payloads, optionally on a fork pool."""
    if workers <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(min(workers, len(payloads))) as pool:
        return pool.map(fn, payloads)


# ---------------------------------------------------------------------------
# federated rounds
# ---------------------------------------------------------------------------


@dataclass
class FLState:
    global_params: ModelParams
    client_params: list
    opt_states: list
    ledger: CommLedger = field(default_factory=CommLedger)
    round_idx: int = 0


def init_state(fl: FLConfig) -> FLState:
    global_params = init_params(fl.seed)
    return FLState(
        global_params=global_params,
        client_params=[global_params.clone() for _ in range(fl.n_clients)],
        opt_states=[None] * fl.n_clients,
    )


def run_round(state: FLState, fl: FLConfig, train_cfg: TrainConfig, data_dir,
              datasets: list, workers: int = 1, log=None) -> FLState:
    """One communication round: distribute shared params, train locally,
    upload, aggregate, redistribute. Mutates and returns ``state``."""
    group = group_for_strategy(fl.strategy)
    transport = InProcessTransport(state.ledger)
    rnd = state.round_idx + 1

    payloads = []
    for j in range(fl.n_clients):
        # download the current shared parameters into the client's model
        message = transport.send(rnd, j, "down", state.global_params, group)
        shared = InProcessTransport.recv(message)
        state.client_params[j].replace(shared)
        blobs = {n: T.tensor_to_bytes(state.client_params[j][n].data)
                 for n in state.client_params[j].names()}
        payloads.append(
            {
                "data_dir": str(data_dir),
                "client_id": datasets[j].client_id,
                "blobs": blobs,
                "opt_state": state.opt_states[j],
                "train_cfg": train_cfg,
                "epochs": fl.local_epochs,
                "seed": fl.seed * 100_000 + rnd * 1_000 + j,
            }
        )

    try:
        results = run_jobs(_train_client_job, payloads, workers)
    except Exception as exc:
        raise RuntimeError(f"round {rnd}: client training failed: {exc}") from exc

    uploads = []
    for j, res in enumerate(results):
        arrays = deserialize_blobs(res["blobs"])
        state.client_params[j] = ModelParams(
            {n: T.Tensor(a, requires_grad=True) for n, a in arrays.items()}
        )
        state.opt_states[j] = res["opt_state"]
        transport.send(rnd, j, "up", state.client_params[j], group)
        uploads.append(state.client_params[j])
        if log is not None:
            for epoch, st in enumerate(res["stats"]):
                log.append({"round": rnd, "client": j, "epoch": epoch,
                            "mean_loss": st["mean_loss"], "wall_time_s": st["wall_time_s"]})

    weights = client_weights(fl.weights_mode, datasets)
    state.global_params = aggregate(uploads, weights, fl.strategy,
                                    client_ids=list(range(fl.n_clients)),
                                    reference=state.global_params)
    # redistribute: every client adopts the new shared group immediately
    for j in range(fl.n_clients):
        shared = {n: state.global_params[n].data.copy()
                  for n, _ in param_partition(state.global_params, group)}
        state.client_params[j].replace(shared)
    state.round_idx = rnd
    return state


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    scenario: str
    data_dir: str
    out_dir: str
    n_clients: int = 4
    rounds: int = 7
    tau: int = 5
    local_epochs: int = 1
    strategy: str = ""
    weights_mode: str = "dataset_size"
    seed: int = 0
    thresholds_m: tuple = (1.0, 3.0, 5.0)
    thresholds_deg: tuple = (1.0, 3.0, 5.0)
    batch_size: int = 4
    lr: float = 1e-3
    workers: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}, expected one of {SCENARIOS}")
        if not self.strategy:
            self.strategy = STRATEGY_ENCODER if self.scenario == "fl-encoder" else STRATEGY_FULL
        if self.scenario == "fl-full" and self.strategy != STRATEGY_FULL:
            raise ValueError("scenario fl-full requires strategy full_model")
        if self.scenario == "fl-encoder" and self.strategy != STRATEGY_ENCODER:
            raise ValueError("scenario fl-encoder requires strategy encoder_only")

    @staticmethod
    def from_json(path) -> "ExperimentConfig":
        with open(path) as f:
            raw = json.load(f)
        known = {f.name for f in ExperimentConfig.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("thresholds_m", "thresholds_deg"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return ExperimentConfig(**raw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size,
                           local_epochs=self.local_epochs,
                           solver=SolverConfig(max_iters_per_level=self.tau))


@dataclass
class ResultsBundle:
    metrics_rows: list  # (scenario, round, family, threshold, value_percent)
    comm: CommLedger
    out_dir: Path
    final_recall: dict


def _metric_rows(scenario, rnd, errors, cfg: ExperimentConfig):
    report = compute_metrics(errors, cfg.thresholds_m, cfg.thresholds_deg)
    report.validate()
    return [(scenario, rnd, fam, th, val) for fam, th, val in report.rows()], report


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scenario", "round", "metric_family", "threshold", "value_percent"])
        for row in rows:
            w.writerow([row[0], row[1], row[2], f"{row[3]:g}", repr(float(row[4]))])


def _eval_models(models: list, data_dir, train_cfg, workers: int) -> list:
    payloads = [
        {"data_dir": str(data_dir), "dataset_id": "test", "train_cfg": train_cfg,
         "blobs": {n: T.tensor_to_bytes(m[n].data) for n in m.names()}}
        for m in models
    ]
    results = run_jobs(_eval_job, payloads, workers)
    errors = []
    for res in results:
        errors.extend(res)
    return errors


def run_experiment(cfg: ExperimentConfig) -> ResultsBundle:
    """Dispatch one scenario end to end and write the results bundle."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(cfg.data_dir)
    client_ids = [e["id"] for e in manifest["clients"]][: cfg.n_clients]
    if len(client_ids) < cfg.n_clients:
        raise ValueError(
            f"dataset has {len(client_ids)} clients, config wants {cfg.n_clients}"
        )
    datasets = [load_client_dataset(cfg.data_dir, cid) for cid in client_ids]
    train_cfg = cfg.train_config()
    rows = []
    log = []
    ledger = CommLedger()
    t0 = time.monotonic()

    if cfg.scenario == "centralized":
        params = init_params(cfg.seed)
        opt_state = None
        for rnd in range(1, cfg.rounds + 1):
            res = run_jobs(_train_client_job, [{
                "data_dir": str(cfg.data_dir), "client_id": "pooled",
                "blobs": {n: T.tensor_to_bytes(params[n].data) for n in params.names()},
                "opt_state": opt_state, "train_cfg": train_cfg, "epochs": cfg.local_epochs,
                "seed": cfg.seed * 100_000 + rnd * 1_000,
            }], workers=1)[0]
            params = ModelParams({n: T.Tensor(a, requires_grad=True)
                                  for n, a in deserialize_blobs(res["blobs"]).items()})
            opt_state = res["opt_state"]
            for epoch, st in enumerate(res["stats"]):
                log.append({"round": rnd, "client": "pooled", "epoch": epoch,
                            "mean_loss": st["mean_loss"], "wall_time_s": st["wall_time_s"]})
            errors = _eval_models([params], cfg.data_dir, train_cfg, cfg.workers)
            new_rows, _ = _metric_rows(cfg.scenario, rnd, errors, cfg)
            rows.extend(new_rows)
        final_models = [params]

    elif cfg.scenario == "single-client":
        models = [init_params(cfg.seed) for _ in client_ids]
        opt_states = [None] * len(client_ids)
        for rnd in range(1, cfg.rounds + 1):
            payloads = [{
                "data_dir": str(cfg.data_dir), "client_id": cid,
                "blobs": {n: T.tensor_to_bytes(models[j][n].data) for n in models[j].names()},
                "opt_state": opt_states[j], "train_cfg": train_cfg, "epochs": cfg.local_epochs,
                "seed": cfg.seed * 100_000 + rnd * 1_000 + j,
            } for j, cid in enumerate(client_ids)]
            results = run_jobs(_train_client_job, payloads, cfg.workers)
            for j, res in enumerate(results):
                models[j] = ModelParams({n: T.Tensor(a, requires_grad=True)
                                         for n, a in deserialize_blobs(res["blobs"]).items()})
                opt_states[j] = res["opt_state"]
                for epoch, st in enumerate(res["stats"]):
                    log.append({"round": rnd, "client": client_ids[j], "epoch": epoch,
                                "mean_loss": st["mean_loss"], "wall_time_s": st["wall_time_s"]})
            errors = _eval_models(models, cfg.data_dir, train_cfg, cfg.workers)
            new_rows, _ = _metric_rows(cfg.scenario, rnd, errors, cfg)
            rows.extend(new_rows)
        final_models = models

    else:  # fl-full / fl-encoder
        fl = FLConfig(n_clients=cfg.n_clients, rounds=cfg.rounds, strategy=cfg.strategy,
                      weights_mode=cfg.weights_mode, local_epochs=cfg.local_epochs,
                      seed=cfg.seed)
        state = init_state(fl)
        ledger = state.ledger
        for _ in range(cfg.rounds):
            state = run_round(state, fl, train_cfg, cfg.data_dir, datasets,
                              workers=cfg.workers, log=log)
            if cfg.strategy == STRATEGY_FULL:
                eval_models = [state.global_params]
            else:
                eval_models = state.client_params
            errors = _eval_models(eval_models, cfg.data_dir, train_cfg, cfg.workers)
            new_rows, _ = _metric_rows(cfg.scenario, state.round_idx, errors, cfg)
            rows.extend(new_rows)
        final_models = [state.global_params] if cfg.strategy == STRATEGY_FULL else state.client_params

    write_metrics_csv(out_dir / "metrics.csv", rows)
    ledger.write_csv(out_dir / "comm.csv")
    echo = asdict(cfg)
    echo.update({
        "eval_timing": "after local training, aggregation and redistribution",
        "encoder_param_fraction": count_params(init_params(0), "encoder") / count_params(init_params(0), "all"),
        "wall_time_s": time.monotonic() - t0,
    })
    with open(out_dir / "config.echo.json", "w") as f:
        json.dump(echo, f, indent=1, sort_keys=True)
    with open(out_dir / "train_log.jsonl", "w") as f:
        for entry in log:
            f.write(json.dumps(entry) + "\n")

    final = {}
    for scenario, rnd, fam, th, val in rows:
        if rnd == cfg.rounds:
            final[(fam, th)] = val
    from .features import save_params

    for i, m in enumerate(final_models):
        save_params(out_dir / (f"checkpoint" if len(final_models) == 1 else f"checkpoint_{i}"), m)
    return ResultsBundle(rows, ledger, out_dir, final)


def _experiment_job(payload: dict) -> dict:
    T.set_blas_threads(payload.pop("blas_threads", 1))
    cfg = ExperimentConfig(**payload)
    bundle = run_experiment(cfg)
    return {
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "out_dir": str(bundle.out_dir),
        "final": {f"{fam}|{th:g}": v for (fam, th), v in bundle.final_recall.items()},
        "uplink_scalars": bundle.comm.total("up")["scalars"],
    }


def run_many(configs: list, workers: int = 1) -> list:
    """Execute independent experiment configs, optionally two at a time.

    Each config dict feeds ExperimentConfig; runs are self-contained, so this
    parallelizes whole (scenario, seed) cells rather than clients within one.
    """
    return run_jobs(_experiment_job, [dict(c) for c in configs], workers)
