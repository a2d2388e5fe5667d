"""World building, strategy execution, result records and summaries."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import costmodel, data, protocol, transport, wire
from .config import ExperimentConfig, TaskSettings
from .costmodel import CostModelInput, closed_form_cost, ledger_vs_model_multi
from .data import DEFAULT_NONIID_6, BatchStream, PartitionPlan, Sample, generate
from .ledger import CLIENT_TO_SERVER, SERVER_TO_CLIENT, CostLedger
from .nets import TASK_INPUT_DIMS, TransformerBody, build_head, build_tail
from .optim import Schedule
from .protocol import (CentralizedTrainer, ClientHandle, FlServer,
                       FullModelClientWorker, RoundReport, SplitClientWorker,
                       SplitServer, TaskGlobals, TaskTrainConfig, TrainPlan,
                       evaluate_model, evaluate_split_clients)
from .transport import MeteredConnection, TcpListener, inproc_pair, tcp_connect


def seed_for(seed: int, *tags) -> int:
    """Stable named sub-seed (platform-independent)."""
    text = "/".join(str(t) for t in tags) + f"#{seed}"
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(seed_for(seed, *tags))


@dataclass
class TaskWorld:
    index: int
    settings: TaskSettings
    shards: list[list[Sample]]
    val: list[Sample]
    test: list[Sample]
    head: object
    tail: object
    train_cfg: TaskTrainConfig


def task_train_cfg(cfg: ExperimentConfig, t: TaskSettings) -> TaskTrainConfig:
    sched = Schedule(t.schedule, t.max_lr, cfg.warmup, cfg.rounds,
                     t.anneal_period)
    if cfg.lambda_everywhere:
        return TaskTrainConfig(t.kind, t.optimizer, sched,
                               loss_weight=1.0, loss_scale=t.loss_weight)
    return TaskTrainConfig(t.kind, t.optimizer, sched, loss_weight=t.loss_weight)


def body_schedule(cfg: ExperimentConfig) -> Schedule:
    return Schedule(cfg.body_schedule, cfg.body_lr, cfg.warmup, cfg.rounds)


def build_worlds(cfg: ExperimentConfig, seed: int):
    """Seeded body + per-task data/partitions/global modules, identical
    across strategies for a given (config, seed)."""
    body = TransformerBody(cfg.body, rng_for(seed, "init", "body"))
    worlds = []
    for ti, t in enumerate(cfg.tasks):
        n_total = t.n_train + t.n_val + t.n_test
        samples = generate(t.kind, n_total, seed_for(seed, "data", t.kind))
        train = samples[:t.n_train]
        val = samples[t.n_train:t.n_train + t.n_val]
        test = samples[t.n_train + t.n_val:]
        if t.clients == 1:
            plan = PartitionPlan({0: list(range(len(train)))})
        elif t.partition == "noniid":
            plan = data.partition_noniid(train, DEFAULT_NONIID_6,
                                         seed_for(seed, "part", t.kind))
        else:
            plan = data.partition_iid(train, t.clients,
                                      seed_for(seed, "part", t.kind))
        shards = [plan.shard(train, c) for c in range(t.clients)]
        head = build_head(t.kind, cfg.body, TASK_INPUT_DIMS[t.kind],
                          rng_for(seed, "init", "head", t.kind), ti)
        tail = build_tail(t.kind, cfg.body, rng_for(seed, "init", "tail", t.kind), ti)
        worlds.append(TaskWorld(ti, t, shards, val, test, head, tail,
                                task_train_cfg(cfg, t)))
    return body, worlds


def make_plan(cfg: ExperimentConfig) -> TrainPlan:
    return TrainPlan(rounds=cfg.rounds,
                     avg_period=cfg.avg_period or None,
                     scheme=cfg.scheme,
                     joint_rounds=cfg.joint_rounds,
                     alt_block=cfg.alt_block,
                     clip_norm=cfg.clip_norm)


def make_split_worker(cfg: ExperimentConfig, seed: int, worlds, cid: int, conn):
    ti, local = cfg.client_map()[cid]
    w = worlds[ti]
    stream = BatchStream(w.shards[local], cfg.batch, seed_for(seed, "batch", cid))
    return SplitClientWorker(cid, ti, w.train_cfg,
                             copy.deepcopy(w.head), copy.deepcopy(w.tail),
                             stream, conn, cfg.clip_norm, cfg.timeout)


def make_fl_worker(cfg: ExperimentConfig, seed: int, body, worlds, cid: int, conn):
    ti, local = cfg.client_map()[cid]
    w = worlds[ti]
    stream = BatchStream(w.shards[local], cfg.batch, seed_for(seed, "batch", cid))
    return FullModelClientWorker(cid, ti, w.train_cfg,
                                 copy.deepcopy(w.head), copy.deepcopy(body),
                                 copy.deepcopy(w.tail), body_schedule(cfg),
                                 stream, conn, cfg.clip_norm, cfg.body_optimizer,
                                 cfg.timeout)


def centralized_streams(cfg: ExperimentConfig, seed: int, world: TaskWorld):
    """The pooled stream: per-client batches concatenated in client order,
    so the batch stream matches the distributed runs sample for sample."""
    return [BatchStream(world.shards[local], cfg.batch, seed_for(seed, "batch", cid))
            for cid, (ti, local) in sorted(cfg.client_map().items())
            if ti == world.index]


@dataclass
class RunOutcome:
    record: "ResultRecord"
    reports: list[RoundReport]
    ledger: CostLedger | None
    client_ledgers: dict[int, CostLedger]
    body: object
    worlds: list[TaskWorld]
    sl_client_weights: dict | None = None


@dataclass
class ResultRecord:
    config_hash: str
    label: str
    strategy: str
    seed: int
    rounds: int
    metrics: dict
    best: dict | None
    cost: dict
    wall_time: float
    curve_file: str | None = None

    def to_json(self) -> str:
        return json.dumps({
            "config_hash": self.config_hash, "label": self.label,
            "strategy": self.strategy, "seed": self.seed, "rounds": self.rounds,
            "metrics": self.metrics, "best": self.best, "cost": self.cost,
            "wall_time": self.wall_time, "curve_file": self.curve_file,
        }, sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "ResultRecord":
        return ResultRecord(d["config_hash"], d.get("label", ""), d["strategy"],
                            d["seed"], d["rounds"], d["metrics"], d.get("best"),
                            d["cost"], d["wall_time"], d.get("curve_file"))


class _ClientPool:
    """Spawns client workers on their transport and joins them afterwards."""

    def __init__(self, cfg: ExperimentConfig, seed: int, make_worker):
        self.cfg = cfg
        self.workers = []
        self.threads = []
        self.client_ledgers: dict[int, CostLedger] = {}
        self.server_ledger = CostLedger()
        self._listener = None
        self._server_ends = []
        cmap = cfg.client_map()
        if cfg.transport == "inproc":
            for cid in sorted(cmap):
                server_end, client_end = inproc_pair()
                self._start_worker(make_worker, cid, client_end)
                self._server_ends.append(MeteredConnection(
                    server_end, self.server_ledger, SERVER_TO_CLIENT,
                    CLIENT_TO_SERVER))
        else:
            self._listener = TcpListener(cfg.tcp_host, cfg.tcp_port)
            for cid in sorted(cmap):
                conn = tcp_connect(self._listener.host, self._listener.port,
                                   cfg.timeout)
                self._start_worker(make_worker, cid, conn)
            for _ in cmap:
                self._server_ends.append(MeteredConnection(
                    self._listener.accept(cfg.timeout), self.server_ledger,
                    SERVER_TO_CLIENT, CLIENT_TO_SERVER))

    def _start_worker(self, make_worker, cid, raw_conn):
        ledger = CostLedger()
        self.client_ledgers[cid] = ledger
        conn = MeteredConnection(raw_conn, ledger, CLIENT_TO_SERVER,
                                 SERVER_TO_CLIENT)
        worker = make_worker(cid, conn)
        self.workers.append(worker)
        thread = threading.Thread(target=worker.run, daemon=True,
                                  name=f"client-{cid}")
        self.threads.append(thread)
        thread.start()

    def accept_clients(self, timeout: float) -> dict[int, ClientHandle]:
        """Read the hello from every connection and key it by client id."""
        clients = {}
        for conn in self._server_ends:
            msg = wire.parse_control(conn.recv(timeout))
            if msg["k"] != "hello":
                raise protocol.ProtocolError(f"expected hello, got {msg['k']!r}")
            clients[msg["client"]] = ClientHandle(msg["client"], msg["task"], conn,
                                                  msg.get("samples", 0))
        return clients

    def join(self, timeout: float = 30.0) -> None:
        for t in self.threads:
            t.join(timeout)
        if self._listener is not None:
            self._listener.close()
        for w in self.workers:
            if w.error is not None:
                raise RuntimeError(f"client {w.client_id} failed: {w.error}") \
                    from w.error


def run_split(cfg: ExperimentConfig, seed: int, *, averaging: bool,
              eval_hook=None, server_probe=None, client_probe=None,
              prebuilt=None):
    """Drive a federated-split or split-learning run over the configured
    transport; returns (server, reports, pool, worlds, body, sl_weights)."""
    body, worlds = prebuilt if prebuilt is not None else build_worlds(cfg, seed)

    def make_worker(cid, conn):
        worker = make_split_worker(cfg, seed, worlds, cid, conn)
        if client_probe is not None:
            worker.probe = (lambda r, hg, tg, _cid=cid:
                            client_probe(_cid, r, hg, tg))
        return worker

    pool = _ClientPool(cfg, seed, make_worker)
    clients = pool.accept_clients(cfg.timeout)
    tasks = {w.index: TaskGlobals(w.index, w.train_cfg, w.head.params,
                                  w.tail.params) for w in worlds}
    server = SplitServer(body, tasks, clients, make_plan(cfg),
                         body_schedule(cfg), pool.server_ledger,
                         averaging=averaging, body_optimizer=cfg.body_optimizer,
                         timeout=cfg.timeout,
                         track_body_hash=cfg.track_body_hash,
                         weighted_avg=cfg.weighted_avg)
    if server_probe is not None:
        server.probe = server_probe
    reports = []
    sl_weights = None
    try:
        server.initial_sync()
        for i in range(1, cfg.rounds + 1):
            reports.append(server.run_round(i))
            if eval_hook is not None:
                eval_hook(i, server)
        if not averaging:
            sl_weights = server.collect_client_weights()
    finally:
        try:
            server.finish()
        except transport.TransportError:
            pass
        pool.join(cfg.timeout)
    return server, reports, pool, worlds, body, sl_weights


def run_fl(cfg: ExperimentConfig, seed: int, *, prebuilt=None):
    body, worlds = prebuilt if prebuilt is not None else build_worlds(cfg, seed)
    w = worlds[0]

    def make_worker(cid, conn):
        return make_fl_worker(cfg, seed, body, worlds, cid, conn)

    pool = _ClientPool(cfg, seed, make_worker)
    clients = pool.accept_clients(cfg.timeout)
    parts = {"head": w.head.params, "body": body.params, "tail": w.tail.params}
    server = FlServer(parts, clients, make_plan(cfg), pool.server_ledger,
                      timeout=cfg.timeout)
    try:
        reports = server.run()
    finally:
        pool.join(cfg.timeout)
    return server, reports, pool, worlds, body


def run_centralized(cfg: ExperimentConfig, seed: int, *, prebuilt=None):
    body, worlds = prebuilt if prebuilt is not None else build_worlds(cfg, seed)
    w = worlds[0]
    trainer = CentralizedTrainer(w.head, body, w.tail, w.train_cfg,
                                 body_schedule(cfg),
                                 centralized_streams(cfg, seed, w),
                                 cfg.rounds, cfg.clip_norm, cfg.body_optimizer)
    reports = []
    for i in range(1, cfg.rounds + 1):
        t0 = time.perf_counter()
        loss = trainer.run_round(i)
        reports.append(RoundReport(
            round=i, losses={0: loss},
            bytes_by_category={c: 0 for c in ("feature", "gradient", "parameter",
                                              "setup", "overhead")},
            avg_fired=False, wall_time=time.perf_counter() - t0,
            body_hash=body.params.value_hash() if cfg.track_body_hash else None))
    return trainer, reports, worlds, body


def toy_cost_input(cfg: ExperimentConfig, world: TaskWorld, body) -> CostModelInput:
    """Cost-model input for one task in raw elements at the toy dimensions."""
    per_round = cfg.batch * (cfg.body.tokens + 1) * cfg.body.dim
    return CostModelInput(
        head_params=world.head.params.n_elements,
        body_params=body.params.n_elements,
        tail_params=world.tail.params.n_elements,
        feat_elems=per_round, grad_elems=per_round,
        avg_period=max(cfg.avg_period, 1))


def _metric_primary(kind: str) -> str:
    return {"classification": "auc", "segmentation": "dice", "detection": "map"}[kind]


def run_single(cfg: ExperimentConfig, seed: int, outdir: str | None = None,
               keep_outcome: bool = False) -> tuple[ResultRecord, RunOutcome | None]:
    """Execute one (config, seed) run end to end and build its record."""
    t0 = time.perf_counter()
    best_tracker: dict[str, dict] = {}
    ledger = None
    client_ledgers: dict[int, CostLedger] = {}
    sl_weights = None

    if cfg.strategy == "centralized":
        _trainer, reports, worlds, body = run_centralized(cfg, seed)
        metrics = {w.settings.kind: evaluate_model(w.head, body, w.tail, w.test,
                                                   w.settings.kind)
                   for w in worlds}
    elif cfg.strategy == "fl":
        _server, reports, pool, worlds, body = run_fl(cfg, seed)
        ledger = pool.server_ledger
        client_ledgers = pool.client_ledgers
        metrics = {w.settings.kind: evaluate_model(w.head, body, w.tail, w.test,
                                                   w.settings.kind)
                   for w in worlds}
    else:
        averaging = cfg.strategy != "sl" and cfg.avg_period > 0
        eval_hook = None
        if cfg.strategy == "festa-mtl" and cfg.scheme == "two-step":
            body_ref_holder = {}

            def eval_hook(i, server):
                # best-checkpoint selection during fine-tuning, evaluated on
                # the validation split at the averaging cadence
                if server.plan.phase(i) != "finetune" or not server.plan.is_unifying(i):
                    return
                for w in body_ref_holder["worlds"]:
                    kind = w.settings.kind
                    m = evaluate_model(w.head, body_ref_holder["body"], w.tail,
                                       w.val, kind)
                    primary = m[_metric_primary(kind)]
                    entry = best_tracker.get(kind)
                    if entry is None or primary > entry["value"]:
                        best_tracker[kind] = {
                            "value": primary, "round": i, "metrics": m,
                            "head": w.head.params.copy_values(),
                            "tail": w.tail.params.copy_values()}

            prebuilt = build_worlds(cfg, seed)
            body_ref_holder["body"] = prebuilt[0]
            body_ref_holder["worlds"] = prebuilt[1]
            _s, reports, pool, worlds, body, sl_weights = run_split(
                cfg, seed, averaging=averaging, eval_hook=eval_hook,
                prebuilt=prebuilt)
        else:
            _s, reports, pool, worlds, body, sl_weights = run_split(
                cfg, seed, averaging=averaging)
        ledger = pool.server_ledger
        client_ledgers = pool.client_ledgers
        if sl_weights is not None:
            # no averaging ever fired (split learning, or a federated-split
            # run with averaging disabled): the global registries were never
            # written, so evaluate the clients' own weights and average
            metrics = {}
            for w in worlds:
                members = {cid: sl_weights[cid] for cid in sl_weights
                           if cfg.client_map()[cid][0] == w.index}
                metrics[w.settings.kind] = evaluate_split_clients(
                    members, w.head, body, w.tail, w.test, w.settings.kind)
        else:
            metrics = {w.settings.kind: evaluate_model(
                w.head, body, w.tail, w.test, w.settings.kind) for w in worlds}

    best = None
    if best_tracker:
        best = {kind: {"round": e["round"], **e["metrics"]}
                for kind, e in best_tracker.items()}

    cost: dict = {"model": {}}
    if ledger is not None:
        cost["ledger"] = ledger.totals()
        specs = []
        for w in worlds:
            inp = toy_cost_input(cfg, w, body)
            breakdown = closed_form_cost(cfg.strategy, inp)
            cost["model"][w.settings.kind] = {
                "feature_gradient": breakdown.feature_gradient,
                "parameter": breakdown.parameter,
                "total": breakdown.total,
                "per_clients": w.settings.clients,
            }
            specs.append((cfg.strategy, inp, cfg.rounds, w.settings.clients))
        recon = ledger_vs_model_multi(ledger, specs)
        cost["reconciliation_ok"] = recon.ok
        cost["reconciliation"] = [
            {"direction": r.direction, "category": r.category,
             "expected": r.expected, "actual": r.actual} for r in recon.rows]

    curve_file = None
    if outdir:
        os.makedirs(outdir, exist_ok=True)
        curve_file = os.path.join(
            outdir, f"curve-{cfg.config_hash()}-s{seed}-{cfg.strategy}.csv")
        with open(curve_file, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["round", "client", "loss", "avg_fired"])
            for rep in reports:
                for cid, loss in sorted(rep.losses.items()):
                    w.writerow([rep.round, cid, f"{loss:.8f}", int(rep.avg_fired)])
        if ledger is not None:
            ledger.write_csv(os.path.join(
                outdir, f"ledger-{cfg.config_hash()}-s{seed}-{cfg.strategy}.csv"))

    record = ResultRecord(
        config_hash=cfg.config_hash(), label=cfg.label, strategy=cfg.strategy,
        seed=seed, rounds=cfg.rounds, metrics=metrics, best=best, cost=cost,
        wall_time=time.perf_counter() - t0, curve_file=curve_file)
    outcome = None
    if keep_outcome:
        outcome = RunOutcome(record, reports, ledger, client_ledgers, body,
                             worlds, sl_weights)
    return record, outcome


def run_config(cfg: ExperimentConfig, outdir: str | None = None) -> list[ResultRecord]:
    """All seeds of one config; records are flushed as they complete."""
    outdir = outdir or cfg.outdir
    records = []
    for seed in cfg.seeds:
        record, _ = run_single(cfg, seed, outdir=outdir)
        records.append(record)
        if outdir:
            append_record(os.path.join(outdir, "records.jsonl"), record)
    if outdir:
        write_results_csv(os.path.join(outdir, "results.csv"),
                          read_records(os.path.join(outdir, "records.jsonl")))
    return records


# -- record files (length-prefixed JSON lines) -------------------------------


def append_record(path: str, record: ResultRecord) -> None:
    payload = record.to_json()
    with open(path, "a") as f:
        f.write(f"{len(payload.encode())}\t{payload}\n")


def read_records(path: str) -> list[ResultRecord]:
    records = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            length, _, payload = line.rstrip("\n").partition("\t")
            if not length.isdigit() or len(payload.encode()) != int(length):
                continue  # torn tail record from an interrupted run
            records.append(ResultRecord.from_dict(json.loads(payload)))
    return records


def write_results_csv(path: str, records: list[ResultRecord]) -> None:
    metric_keys = sorted({f"{task}.{k}" for r in records
                          for task, m in r.metrics.items() for k in m})
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config_hash", "label", "strategy", "seed", "rounds",
                    "wall_time"] + metric_keys)
        for r in records:
            flat = {f"{task}.{k}": v for task, m in r.metrics.items()
                    for k, v in m.items()}
            w.writerow([r.config_hash, r.label, r.strategy, r.seed, r.rounds,
                        f"{r.wall_time:.3f}"]
                       + [f"{flat[k]:.6f}" if k in flat else "" for k in metric_keys])


def summarize(records: list[ResultRecord]) -> list[dict]:
    """Aggregate per (config, strategy): mean and standard deviation of every
    metric over seeds, straight from the stored records."""
    groups: dict[tuple[str, str, str], list[ResultRecord]] = {}
    for r in records:
        groups.setdefault((r.config_hash, r.label, r.strategy), []).append(r)
    rows = []
    for (chash, label, strategy), rs in sorted(groups.items()):
        row = {"config_hash": chash, "label": label, "strategy": strategy,
               "seeds": len(rs), "metrics": {}}
        for task in sorted({t for r in rs for t in r.metrics}):
            for key in sorted({k for r in rs for k in r.metrics.get(task, {})}):
                values = [r.metrics[task][key] for r in rs if task in r.metrics]
                row["metrics"][f"{task}.{key}"] = (
                    float(np.mean(values)), float(np.std(values)))
        rows.append(row)
    return rows


# -- TCP endpoints for cross-process runs ------------------------------------


def serve_forever(cfg: ExperimentConfig, seed: int, host: str, port: int,
                  outdir: str | None = None) -> ResultRecord:
    """`serve`: accept the configured number of remote clients over TCP, run
    the full strategy, and emit the record like a local run."""
    if cfg.strategy in ("centralized",):
        raise ValueError("centralized runs have no server role")
    listener = TcpListener(host, port)
    print(f"listening on {listener.host}:{listener.port} "
          f"for {cfg.total_clients} client(s)")
    ledger = CostLedger()
    conns = [MeteredConnection(listener.accept(cfg.timeout), ledger,
                               SERVER_TO_CLIENT, CLIENT_TO_SERVER)
             for _ in range(cfg.total_clients)]
    clients = {}
    for conn in conns:
        msg = wire.parse_control(conn.recv(cfg.timeout))
        clients[msg["client"]] = ClientHandle(msg["client"], msg["task"], conn,
                                              msg.get("samples", 0))
    body, worlds = build_worlds(cfg, seed)
    t0 = time.perf_counter()
    if cfg.strategy == "fl":
        parts = {"head": worlds[0].head.params, "body": body.params,
                 "tail": worlds[0].tail.params}
        server = FlServer(parts, clients, make_plan(cfg), ledger,
                          timeout=cfg.timeout)
        reports = server.run()
        sl_weights = None
    else:
        averaging = cfg.strategy != "sl" and cfg.avg_period > 0
        tasks = {w.index: TaskGlobals(w.index, w.train_cfg, w.head.params,
                                      w.tail.params) for w in worlds}
        server = SplitServer(body, tasks, clients, make_plan(cfg),
                             body_schedule(cfg), ledger, averaging=averaging,
                             body_optimizer=cfg.body_optimizer,
                             timeout=cfg.timeout,
                             track_body_hash=cfg.track_body_hash,
                             weighted_avg=cfg.weighted_avg)
        server.initial_sync()
        reports = [server.run_round(i) for i in range(1, cfg.rounds + 1)]
        sl_weights = (server.collect_client_weights()
                      if cfg.strategy == "sl" else None)
        server.finish()
    listener.close()
    if cfg.strategy == "sl":
        metrics = {}
        for w in worlds:
            members = {cid: sl_weights[cid] for cid in sl_weights
                       if cfg.client_map()[cid][0] == w.index}
            metrics[w.settings.kind] = evaluate_split_clients(
                members, w.head, body, w.tail, w.test, w.settings.kind)
    else:
        metrics = {w.settings.kind: evaluate_model(w.head, body, w.tail, w.test,
                                                   w.settings.kind)
                   for w in worlds}
    record = ResultRecord(cfg.config_hash(), cfg.label, cfg.strategy, seed,
                          cfg.rounds, metrics, None,
                          {"ledger": ledger.totals(), "model": {}},
                          time.perf_counter() - t0)
    if outdir:
        os.makedirs(outdir, exist_ok=True)
        append_record(os.path.join(outdir, "records.jsonl"), record)
    return record


def client_forever(cfg: ExperimentConfig, seed: int, client_id: int,
                   host: str, port: int) -> None:
    """`client`: rebuild this client's shard and models from (config, seed)
    and serve the protocol until the server says done."""
    if client_id not in cfg.client_map():
        raise ValueError(f"client id {client_id} outside 0..{cfg.total_clients - 1}")
    body, worlds = build_worlds(cfg, seed)
    conn = tcp_connect(host, port, cfg.timeout)
    if cfg.strategy == "fl":
        worker = make_fl_worker(cfg, seed, body, worlds, client_id, conn)
    else:
        worker = make_split_worker(cfg, seed, worlds, client_id, conn)
    worker.run()
    if worker.error is not None:
        raise RuntimeError(f"client {client_id} failed: {worker.error}")
