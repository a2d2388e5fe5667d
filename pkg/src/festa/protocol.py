"""The four training strategies over explicit wire message flows.

The split strategies (federated-split and plain split learning) run one
server actor owning the shared body plus per-task global head/tail
registries, and one actor per client owning its head and tail. A round is:
weight sync when due, features up, body outputs down, tail gradients up,
head gradients down, local update; after the per-client barrier the server
steps the body on the accumulated gradient and, on unifying rounds,
averages and redistributes the client-side parts. Plain split learning is
the same machine with averaging disabled. Federated learning keeps whole
models on clients and only exchanges weights; the centralized reference
trains one composed model on the pooled batch stream.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses, optim, tensor as T, wire
from .data import BatchStream, Sample
from .ledger import CATEGORIES, CostLedger
from .optim import Schedule, clip_gradients, lr_at, make_optimizer
from .params import ParamSet
from .transport import TransportError
from .wire import Frame, MsgType


class ProtocolError(Exception):
    pass


class RoundAborted(ProtocolError):
    """A transport failure aborted the round; state was rolled back."""


class _RoundAbortSignal(Exception):
    """Internal: server told this client to abandon the round in flight."""


SCHEMES = ("one-step", "two-step", "alternating")


@dataclass(frozen=True)
class TrainPlan:
    rounds: int
    avg_period: int | None = None  # None: never average
    scheme: str = "one-step"
    joint_rounds: int | None = None  # two-step switch point
    alt_block: int | None = None  # alternating block length
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "two-step":
            j = self.joint_rounds
            if j is None or not 0 <= j <= self.rounds:
                raise ValueError(f"invalid joint/finetune split {j}/{self.rounds}")
        if self.scheme == "alternating" and not self.alt_block:
            raise ValueError("alternating scheme needs a block length")

    def is_unifying(self, round_: int) -> bool:
        return bool(self.avg_period) and round_ % self.avg_period == 0

    def phase(self, round_: int) -> str:
        if self.scheme == "two-step" and round_ > self.joint_rounds:
            return "finetune"
        return "joint"

    def body_trainable(self, round_: int) -> bool:
        if self.scheme == "two-step":
            return round_ <= self.joint_rounds
        if self.scheme == "alternating":
            # 1-indexed blocks: body frozen on odd blocks, trained on even
            return ((round_ - 1) // self.alt_block) % 2 == 1
        return True

    def head_tail_trainable(self, round_: int) -> bool:
        if self.scheme == "alternating":
            return ((round_ - 1) // self.alt_block) % 2 == 0
        return True


@dataclass(frozen=True)
class TaskTrainConfig:
    kind: str
    optimizer: str
    schedule: Schedule
    loss_weight: float = 1.0  # lambda_k, applied to body-gradient accumulation
    loss_scale: float = 1.0  # optional client-side loss scaling (flag)


@dataclass
class RoundReport:
    round: int
    losses: dict[int, float]
    bytes_by_category: dict[str, int]
    avg_fired: bool
    wall_time: float
    body_hash: str | None = None

    def key(self):
        """Everything that must be reproducible across runs and transports."""
        return (self.round, tuple(sorted(self.losses.items())),
                tuple(sorted(self.bytes_by_category.items())),
                self.avg_fired, self.body_hash)


def fedavg(sets: list[ParamSet]) -> ParamSet:
    """Unweighted elementwise mean of same-shaped parameter sets.

    Summands are sorted per element before a float64 accumulation, so the
    result is independent of client order by construction.
    """
    if not sets:
        raise ValueError("fedavg of an empty set")
    first = sets[0]
    names = first.names()
    for ps in sets[1:]:
        if ps.names() != names:
            raise ValueError("mismatched parameter registries")
    out = ParamSet(first.role, first.task_id)
    n = len(sets)
    for name in names:
        stack = np.stack([ps.value(name) for ps in sets]).astype(np.float64)
        if any(ps.value(name).shape != first.value(name).shape for ps in sets):
            raise T.DimensionError(f"shape mismatch for {name!r}")
        stack.sort(axis=0)
        out.add(name, (stack.sum(axis=0) / n).astype(np.float32))
    return out


def fedavg_weighted(sets: list[ParamSet], weights: list[float]) -> ParamSet:
    """Dataset-size-weighted variant (off by default in the engine)."""
    if len(sets) != len(weights):
        raise ValueError("one weight per set required")
    total = float(sum(weights))
    out = ParamSet(sets[0].role, sets[0].task_id)
    for name in sets[0].names():
        acc = np.zeros(sets[0].value(name).shape, dtype=np.float64)
        for ps, w in zip(sets, weights):
            acc += (w / total) * ps.value(name).astype(np.float64)
        out.add(name, acc.astype(np.float32))
    return out


def _expect(frame: Frame, msg_type: MsgType, round_: int, client_id: int | None = None):
    if frame.msg_type != msg_type:
        raise ProtocolError(f"expected {msg_type.name}, got {frame.msg_type.name}")
    if frame.round != round_:
        raise ProtocolError(f"expected round {round_}, got {frame.round}")
    if client_id is not None and frame.client_id != client_id:
        raise ProtocolError(f"expected client {client_id}, got {frame.client_id}")
    return frame


def _forward_block(g: T.Graph, head, sample: Sample) -> T.Var:
    return head.forward(g, sample.features)


def _tail_losses(g: T.Graph, tail, block_vars, samples, loss_scale: float):
    preds = [tail.forward(g, bv) for bv in block_vars]
    per_sample = [losses.sample_loss(g, p, s) for p, s in zip(preds, samples)]
    loss = losses.batch_mean(per_sample)
    if loss_scale != 1.0:
        loss = T.scale(loss, loss_scale)
    return loss


class SplitClientWorker:
    """Client actor for the split strategies: owns head + tail, answers the
    server's frame sequence until a done control arrives."""

    def __init__(self, client_id: int, task_id: int, cfg: TaskTrainConfig,
                 head, tail, stream: BatchStream, conn,
                 clip_norm: float | None = 1.0, timeout: float = 30.0):
        self.client_id = client_id
        self.task_id = task_id
        self.cfg = cfg
        self.head = head
        self.tail = tail
        self.stream = stream
        self.conn = conn
        self.clip_norm = clip_norm
        self.timeout = timeout
        self.opt_head = make_optimizer(cfg.optimizer, head.params)
        self.opt_tail = make_optimizer(cfg.optimizer, tail.params)
        self._snapshot = None
        self.probe = None  # test hook: probe(round, head_grads, tail_grads)
        self.error: Exception | None = None

    def run(self) -> None:
        try:
            self.conn.send(wire.control_frame(
                "hello", 0, self.client_id, self.task_id,
                client=self.client_id, task=self.task_id,
                samples=len(self.stream.samples)))
            while True:
                frame = self.conn.recv(self.timeout)
                if frame.msg_type == MsgType.WEIGHTS:
                    self._apply_weights(frame)
                    continue
                msg = wire.parse_control(frame)
                kind = msg["k"]
                if kind == "round":
                    try:
                        self._train_round(msg["i"], msg["train_ht"])
                    except _RoundAbortSignal:
                        self._rollback(msg["i"])
                elif kind == "need_weights":
                    self.conn.send(wire.weights_frame(
                        msg["i"], self.client_id, self.task_id,
                        {"head": self.head.params, "tail": self.tail.params}))
                elif kind == "abort":
                    self._rollback(msg["i"])
                elif kind == "done":
                    return
                else:
                    raise ProtocolError(f"unexpected control {kind!r}")
        except TransportError as e:
            self.error = e
        except Exception as e:  # surfaced by the runner after join
            self.error = e
            raise

    def _apply_weights(self, frame: Frame) -> None:
        parts = wire.split_weight_blob(frame.payload)
        self.head.params.set_values(parts["head"])
        self.tail.params.set_values(parts["tail"])

    def _rollback(self, round_: int) -> None:
        """Undo a round's local effects; a stale abort (for a round this
        client never started or already survived) is ignored."""
        if self._snapshot is None or self._snapshot[0] != round_:
            return
        _r, head_v, tail_v, oh, ot, stream_state = self._snapshot
        self.head.params.set_values(head_v)
        self.tail.params.set_values(tail_v)
        optim_restore(self.opt_head, oh)
        optim_restore(self.opt_tail, ot)
        self.stream.rng, self.stream._order, self.stream._pos = stream_state
        self._snapshot = None

    def _recv_in_round(self, msg_type: MsgType, round_: int) -> Frame:
        frame = self.conn.recv(self.timeout)
        if frame.msg_type == MsgType.CONTROL:
            msg = wire.parse_control(frame)
            if msg["k"] == "abort" and msg["i"] == round_:
                raise _RoundAbortSignal()
        return _expect(frame, msg_type, round_)

    def _train_round(self, round_: int, train_ht: bool) -> None:
        self._snapshot = (round_, self.head.params.copy_values(),
                          self.tail.params.copy_values(),
                          optim_snapshot(self.opt_head),
                          optim_snapshot(self.opt_tail),
                          self.stream.snapshot())
        self.head.params.zero_grads()
        self.tail.params.zero_grads()
        samples = self.stream.next_batch()

        gh = T.Graph()
        blocks = [_forward_block(gh, self.head, s) for s in samples]
        feats = np.stack([b.value for b in blocks])
        self.conn.send(wire.tensor_frame(MsgType.FEAT, round_, self.client_id,
                                         self.task_id, feats))

        frame = self._recv_in_round(MsgType.BODY_OUT, round_)
        body_out = wire.decode_tensor(frame.payload)

        gt = T.Graph()
        bvars = [gt.leaf(body_out[i], keep_grad=True) for i in range(len(samples))]
        loss = _tail_losses(gt, self.tail, bvars, samples, self.cfg.loss_scale)
        gt.backward(loss)
        db = np.stack([bv.grad for bv in bvars])
        self.conn.send(wire.tensor_frame(MsgType.BODY_OUT_GRAD, round_, self.client_id,
                                         self.task_id, db))

        frame = self._recv_in_round(MsgType.FEAT_GRAD, round_)
        dh = wire.decode_tensor(frame.payload)
        gh.backward_seeded([(b, dh[i]) for i, b in enumerate(blocks)])

        if self.probe is not None:
            self.probe(round_, self.head.params.copy_grads(),
                       self.tail.params.copy_grads())
        if train_ht:
            lr = lr_at(self.cfg.schedule, round_)
            if self.clip_norm:
                clip_gradients(self.head.params, self.clip_norm)
                clip_gradients(self.tail.params, self.clip_norm)
            self.opt_head.step(lr)
            self.opt_tail.step(lr)
        self.conn.send(wire.control_frame("done_round", round_, self.client_id,
                                          self.task_id, i=round_,
                                          loss=float(loss.value[0])))


def optim_snapshot(opt):
    if isinstance(opt, optim.Adam):
        return (opt.t, {k: v.copy() for k, v in opt.m.items()},
                {k: v.copy() for k, v in opt.v.items()})
    return None


def optim_restore(opt, snap):
    if snap is None:
        return
    opt.t = snap[0]
    for k, v in snap[1].items():
        np.copyto(opt.m[k], v)
    for k, v in snap[2].items():
        np.copyto(opt.v[k], v)


@dataclass
class TaskGlobals:
    task_id: int
    cfg: TaskTrainConfig
    head: ParamSet  # global registry copies, not client weights
    tail: ParamSet


@dataclass
class ClientHandle:
    client_id: int
    task_id: int
    conn: object  # metered connection
    samples: int = 0  # shard size, used only by weighted averaging


class SplitServer:
    """Server actor for federated-split (averaging on) or split learning
    (averaging off)."""

    def __init__(self, body_module, tasks: dict[int, TaskGlobals],
                 clients: dict[int, ClientHandle], plan: TrainPlan,
                 body_schedule: Schedule, ledger: CostLedger,
                 averaging: bool = True, body_optimizer: str = "sgd",
                 timeout: float = 30.0, rollback: bool = True,
                 track_body_hash: bool = True, weighted_avg: bool = False):
        self.body = body_module
        self.tasks = tasks
        self.clients = clients
        self.plan = plan
        self.body_schedule = body_schedule
        self.ledger = ledger
        self.averaging = averaging
        self.timeout = timeout
        self.rollback = rollback
        self.track_body_hash = track_body_hash
        self.weighted_avg = weighted_avg
        self.body_opt = make_optimizer(body_optimizer, body_module.params)
        self.n_tasks = len(tasks)
        self.task_members = {
            tid: sorted(c.client_id for c in clients.values() if c.task_id == tid)
            for tid in tasks}
        self.probe = None  # test hook: probe(client_id, round, body_grads, dh)
        self.round = 0

    # -- lifecycle ---------------------------------------------------------

    def initial_sync(self) -> None:
        """Round-1 weight distribution (administrative, round 0 on the wire)."""
        for cid in sorted(self.clients):
            handle = self.clients[cid]
            tg = self.tasks[handle.task_id]
            handle.conn.send(wire.weights_frame(
                0, cid, handle.task_id, {"head": tg.head, "tail": tg.tail}))

    def run(self) -> list[RoundReport]:
        self.initial_sync()
        reports = [self.run_round(i) for i in range(1, self.plan.rounds + 1)]
        self.finish()
        return reports

    def finish(self) -> None:
        for cid in sorted(self.clients):
            self.clients[cid].conn.send(wire.control_frame("done", 0, cid))

    def collect_client_weights(self) -> dict[int, dict[str, dict[str, np.ndarray]]]:
        """Post-run fetch of per-client weights (administrative traffic);
        used to evaluate split learning, whose clients are never unified."""
        out = {}
        for cid in sorted(self.clients):
            conn = self.clients[cid].conn
            conn.send(wire.control_frame("need_weights", 0, cid, i=0))
            frame = _expect(conn.recv(self.timeout), MsgType.WEIGHTS, 0, cid)
            out[cid] = wire.split_weight_blob(frame.payload)
        return out

    # -- one round ---------------------------------------------------------

    def run_round(self, round_: int) -> RoundReport:
        t0 = time.perf_counter()
        snap = self._snapshot() if self.rollback else None
        ledger_before = self.ledger.snapshot()
        accum = {name: np.zeros_like(v) for name, v in self.body.params.items()}
        losses_by_client: dict[int, float] = {}
        try:
            train_ht = self.plan.head_tail_trainable(round_)
            for cid in sorted(self.clients):
                losses_by_client[cid] = self._client_exchange(cid, round_, train_ht,
                                                              accum)
            if self.plan.body_trainable(round_):
                self.body.params.set_grads(accum)
                if self.plan.clip_norm:
                    clip_gradients(self.body.params, self.plan.clip_norm)
                self.body_opt.step(lr_at(self.body_schedule, round_))
            avg_fired = False
            if self.averaging and self.plan.is_unifying(round_):
                self._unify(round_)
                avg_fired = True
        except TransportError as e:
            # protocol state rewinds to the round start (at-most-once round
            # semantics); the ledger stays monotone, so the aborted round's
            # partial traffic remains counted
            if snap is not None:
                self._restore(snap)
            self._broadcast_abort(round_)
            raise RoundAborted(f"round {round_} aborted: {e}") from e
        self.round = round_
        return RoundReport(
            round=round_,
            losses=losses_by_client,
            bytes_by_category=self.ledger.bytes_since(ledger_before),
            avg_fired=avg_fired,
            wall_time=time.perf_counter() - t0,
            body_hash=self.body.params.value_hash() if self.track_body_hash else None,
        )

    def _client_exchange(self, cid: int, round_: int, train_ht: bool,
                         accum: dict[str, np.ndarray]) -> float:
        handle = self.clients[cid]
        conn = handle.conn
        tg = self.tasks[handle.task_id]
        conn.send(wire.control_frame("round", round_, cid, handle.task_id,
                                     i=round_, train_ht=train_ht))
        frame = _expect(conn.recv(self.timeout), MsgType.FEAT, round_, cid)
        feats = wire.decode_tensor(frame.payload)

        self.body.params.zero_grads()
        g = T.Graph()
        hvars = [g.leaf(feats[i], keep_grad=True) for i in range(feats.shape[0])]
        bvars = [self.body.forward(g, hv) for hv in hvars]
        conn.send(wire.tensor_frame(MsgType.BODY_OUT, round_, cid, handle.task_id,
                                    np.stack([bv.value for bv in bvars])))

        frame = _expect(conn.recv(self.timeout), MsgType.BODY_OUT_GRAD, round_, cid)
        db = wire.decode_tensor(frame.payload)
        g.backward_seeded([(bv, db[i]) for i, bv in enumerate(bvars)])

        # Algorithm: body step averages over tasks and over each task's
        # clients, weighted by the task loss weight.
        scale = np.float32(tg.cfg.loss_weight
                           / (self.n_tasks * len(self.task_members[handle.task_id])))
        for name in accum:
            accum[name] += scale * self.body.params.grad(name)
        dh = np.stack([hv.grad for hv in hvars])
        if self.probe is not None:
            self.probe(cid, round_, self.body.params.copy_grads(), dh)
        conn.send(wire.tensor_frame(MsgType.FEAT_GRAD, round_, cid, handle.task_id, dh))

        msg = wire.parse_control(_expect(conn.recv(self.timeout), MsgType.CONTROL,
                                         round_, cid))
        if msg["k"] != "done_round":
            raise ProtocolError(f"expected done_round, got {msg['k']!r}")
        return float(msg["loss"])

    def _unify(self, round_: int) -> None:
        """Collect, average and redistribute head/tail weights per task.
        Clients apply the averaged weights immediately, i.e. they take
        effect at the start of the following round."""
        for tid in sorted(self.tasks):
            tg = self.tasks[tid]
            collected_heads, collected_tails = [], []
            for cid in self.task_members[tid]:
                conn = self.clients[cid].conn
                conn.send(wire.control_frame("need_weights", round_, cid, tid,
                                             i=round_))
                frame = _expect(conn.recv(self.timeout), MsgType.WEIGHTS, round_, cid)
                parts = wire.split_weight_blob(frame.payload)
                collected_heads.append(_as_paramset(parts["head"], "head", tid))
                collected_tails.append(_as_paramset(parts["tail"], "tail", tid))
            if self.weighted_avg:
                sizes = [float(self.clients[cid].samples)
                         for cid in self.task_members[tid]]
                tg.head.set_values(fedavg_weighted(collected_heads, sizes))
                tg.tail.set_values(fedavg_weighted(collected_tails, sizes))
            else:
                tg.head.set_values(fedavg(collected_heads))
                tg.tail.set_values(fedavg(collected_tails))
            for cid in self.task_members[tid]:
                self.clients[cid].conn.send(wire.weights_frame(
                    round_, cid, tid, {"head": tg.head, "tail": tg.tail}))

    # -- rollback ----------------------------------------------------------

    def _snapshot(self):
        return {
            "round": self.round,
            "body": self.body.params.copy_values(),
            "body_opt": optim_snapshot(self.body_opt),
            "heads": {tid: tg.head.copy_values() for tid, tg in self.tasks.items()},
            "tails": {tid: tg.tail.copy_values() for tid, tg in self.tasks.items()},
        }

    def _restore(self, snap) -> None:
        self.round = snap["round"]
        self.body.params.set_values(snap["body"])
        optim_restore(self.body_opt, snap["body_opt"])
        for tid, tg in self.tasks.items():
            tg.head.set_values(snap["heads"][tid])
            tg.tail.set_values(snap["tails"][tid])

    def _broadcast_abort(self, round_: int) -> None:
        for cid in sorted(self.clients):
            try:
                self.clients[cid].conn.send(
                    wire.control_frame("abort", round_, cid, i=round_))
            except TransportError:
                pass


def _as_paramset(entries: dict[str, np.ndarray], role: str, task_id: int) -> ParamSet:
    ps = ParamSet(role, task_id)
    for name, arr in entries.items():
        ps.add(name, arr)
    return ps


class FullModelClientWorker:
    """Client actor for federated learning: trains head+body+tail locally,
    exchanging only weights with the server."""

    def __init__(self, client_id: int, task_id: int, cfg: TaskTrainConfig,
                 head, body, tail, body_schedule: Schedule,
                 stream: BatchStream, conn, clip_norm: float | None = 1.0,
                 body_optimizer: str = "sgd", timeout: float = 30.0):
        self.client_id = client_id
        self.task_id = task_id
        self.cfg = cfg
        self.head = head
        self.body = body
        self.tail = tail
        self.body_schedule = body_schedule
        self.stream = stream
        self.conn = conn
        self.clip_norm = clip_norm
        self.timeout = timeout
        self.opt_head = make_optimizer(cfg.optimizer, head.params)
        self.opt_tail = make_optimizer(cfg.optimizer, tail.params)
        self.opt_body = make_optimizer(body_optimizer, body.params)
        self.error: Exception | None = None

    def run(self) -> None:
        try:
            self.conn.send(wire.control_frame(
                "hello", 0, self.client_id, self.task_id,
                client=self.client_id, task=self.task_id,
                samples=len(self.stream.samples)))
            while True:
                frame = self.conn.recv(self.timeout)
                if frame.msg_type == MsgType.WEIGHTS:
                    parts = wire.split_weight_blob(frame.payload)
                    self.head.params.set_values(parts["head"])
                    self.body.params.set_values(parts["body"])
                    self.tail.params.set_values(parts["tail"])
                    continue
                msg = wire.parse_control(frame)
                if msg["k"] == "round":
                    self._train_round(msg["i"])
                elif msg["k"] == "need_weights":
                    self.conn.send(wire.weights_frame(
                        msg["i"], self.client_id, self.task_id,
                        {"head": self.head.params, "body": self.body.params,
                         "tail": self.tail.params}))
                elif msg["k"] == "done":
                    return
                elif msg["k"] == "abort":
                    continue  # nothing in flight to undo: updates are local
                else:
                    raise ProtocolError(f"unexpected control {msg['k']!r}")
        except TransportError as e:
            self.error = e
        except Exception as e:
            self.error = e
            raise

    def _train_round(self, round_: int) -> None:
        for ps in (self.head.params, self.body.params, self.tail.params):
            ps.zero_grads()
        samples = self.stream.next_batch()
        g = T.Graph()
        blocks = [_forward_block(g, self.head, s) for s in samples]
        outs = [self.body.forward(g, b) for b in blocks]
        loss = _tail_losses(g, self.tail, outs, samples, self.cfg.loss_scale)
        g.backward(loss)
        if self.clip_norm:
            for ps in (self.head.params, self.body.params, self.tail.params):
                clip_gradients(ps, self.clip_norm)
        lr = lr_at(self.cfg.schedule, round_)
        self.opt_head.step(lr)
        self.opt_tail.step(lr)
        self.opt_body.step(lr_at(self.body_schedule, round_))
        self.conn.send(wire.control_frame("done_round", round_, self.client_id,
                                          self.task_id, i=round_,
                                          loss=float(loss.value[0])))


class FlServer:
    """Whole-model averaging server (single task)."""

    def __init__(self, global_parts: dict[str, ParamSet],
                 clients: dict[int, ClientHandle], plan: TrainPlan,
                 ledger: CostLedger, timeout: float = 30.0):
        self.parts = global_parts  # roles: head, body, tail
        self.clients = clients
        self.plan = plan
        self.ledger = ledger
        self.timeout = timeout
        self.round = 0

    def initial_sync(self) -> None:
        for cid in sorted(self.clients):
            self.clients[cid].conn.send(wire.weights_frame(
                0, cid, self.clients[cid].task_id, self.parts))

    def run(self) -> list[RoundReport]:
        self.initial_sync()
        reports = [self.run_round(i) for i in range(1, self.plan.rounds + 1)]
        for cid in sorted(self.clients):
            self.clients[cid].conn.send(wire.control_frame("done", 0, cid))
        return reports

    def run_round(self, round_: int) -> RoundReport:
        t0 = time.perf_counter()
        ledger_before = self.ledger.snapshot()
        losses_by_client: dict[int, float] = {}
        for cid in sorted(self.clients):
            conn = self.clients[cid].conn
            conn.send(wire.control_frame("round", round_, cid, i=round_,
                                         train_ht=True))
            msg = wire.parse_control(_expect(conn.recv(self.timeout),
                                             MsgType.CONTROL, round_, cid))
            if msg["k"] != "done_round":
                raise ProtocolError(f"expected done_round, got {msg['k']!r}")
            losses_by_client[cid] = float(msg["loss"])
        avg_fired = False
        if self.plan.is_unifying(round_):
            self._unify(round_)
            avg_fired = True
        self.round = round_
        return RoundReport(
            round=round_,
            losses=losses_by_client,
            bytes_by_category=self.ledger.bytes_since(ledger_before),
            avg_fired=avg_fired,
            wall_time=time.perf_counter() - t0,
            body_hash=self.parts["body"].value_hash(),
        )

    def _unify(self, round_: int) -> None:
        collected: dict[str, list[ParamSet]] = {r: [] for r in self.parts}
        for cid in sorted(self.clients):
            conn = self.clients[cid].conn
            conn.send(wire.control_frame("need_weights", round_, cid, i=round_))
            frame = _expect(conn.recv(self.timeout), MsgType.WEIGHTS, round_, cid)
            parts = wire.split_weight_blob(frame.payload)
            for role in self.parts:
                collected[role].append(_as_paramset(parts[role], role, None))
        for role, sets in collected.items():
            self.parts[role].set_values(fedavg(sets))
        for cid in sorted(self.clients):
            self.clients[cid].conn.send(wire.weights_frame(
                round_, cid, self.clients[cid].task_id, self.parts))


class CentralizedTrainer:
    """Reference: one composed model on the pooled per-client batch stream
    (batch size = per-client batch x number of simulated clients)."""

    def __init__(self, head, body, tail, cfg: TaskTrainConfig,
                 body_schedule: Schedule, streams: list[BatchStream],
                 rounds: int, clip_norm: float | None = 1.0,
                 body_optimizer: str = "sgd"):
        self.head = head
        self.body = body
        self.tail = tail
        self.cfg = cfg
        self.body_schedule = body_schedule
        self.streams = streams
        self.rounds = rounds
        self.clip_norm = clip_norm
        self.opt_head = make_optimizer(cfg.optimizer, head.params)
        self.opt_tail = make_optimizer(cfg.optimizer, tail.params)
        self.opt_body = make_optimizer(body_optimizer, body.params)

    def run_round(self, round_: int) -> float:
        for ps in (self.head.params, self.body.params, self.tail.params):
            ps.zero_grads()
        samples = [s for stream in self.streams for s in stream.next_batch()]
        g = T.Graph()
        blocks = [_forward_block(g, self.head, s) for s in samples]
        outs = [self.body.forward(g, b) for b in blocks]
        loss = _tail_losses(g, self.tail, outs, samples, self.cfg.loss_scale)
        g.backward(loss)
        if self.clip_norm:
            for ps in (self.head.params, self.body.params, self.tail.params):
                clip_gradients(ps, self.clip_norm)
        lr = lr_at(self.cfg.schedule, round_)
        self.opt_head.step(lr)
        self.opt_tail.step(lr)
        self.opt_body.step(lr_at(self.body_schedule, round_))
        return float(loss.value[0])

    def run(self) -> list[float]:
        return [self.run_round(i) for i in range(1, self.rounds + 1)]


# -- evaluation -------------------------------------------------------------


def predict_sample(head, body, tail, sample: Sample) -> np.ndarray:
    g = T.Graph()
    block = _forward_block(g, head, sample)
    return tail.forward(g, body.forward(g, block)).value


def evaluate_model(head, body, tail, testset: list[Sample], kind: str) -> dict:
    """Task metric(s) of a composed model on a held-out set."""
    if not testset:
        raise ValueError("empty test set")
    from . import metrics as M

    if kind == "classification":
        probs, labels, hits = [], [], 0
        for s in testset:
            logits = predict_sample(head, body, tail, s)
            e = np.exp(logits - logits.max())
            p = e / e.sum()
            probs.append(p)
            labels.append(s.label)
            hits += int(np.argmax(p) == s.label)
        return {"auc": M.macro_auc(np.array(probs), np.array(labels)),
                "accuracy": hits / len(testset)}
    if kind == "segmentation":
        dices = []
        for s in testset:
            logits = predict_sample(head, body, tail, s)
            dices.append(M.dice_coefficient(logits > 0.0, s.label > 0.5))
        return {"dice": float(np.mean(dices))}
    if kind == "detection":
        detections, gt = [], {}
        for img, s in enumerate(testset):
            out = predict_sample(head, body, tail, s)
            box, obj_logit = out[:4], out[4]
            score = 1.0 / (1.0 + np.exp(-float(obj_logit)))
            detections.append((img, box, score))
            gt_box, objness = s.label
            gt[img] = [gt_box] if objness else []
        return {"map": M.mean_average_precision(detections, gt)}
    raise ValueError(f"unknown task kind {kind!r}")


def evaluate_split_clients(client_weights, head_proto, body, tail_proto,
                           testset: list[Sample], kind: str) -> dict:
    """Split-learning evaluation: per-client metrics, averaged."""
    per_client = []
    for cid in sorted(client_weights):
        parts = client_weights[cid]
        head_proto.params.set_values(parts["head"])
        tail_proto.params.set_values(parts["tail"])
        per_client.append(evaluate_model(head_proto, body, tail_proto, testset, kind))
    keys = per_client[0].keys()
    return {k: float(np.mean([m[k] for m in per_client])) for k in keys}
