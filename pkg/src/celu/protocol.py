"""Party state machines and the three training schemes.

``vanilla``  one exchange per update, no cache.
``fedbcd``   after each exchange, R-1 further updates on that same batch.
``celu``     exchanges fill a workset table; a local worker per party draws
             cached batches round-robin and weights instances by the cosine
             between ad hoc and stale statistics.

R is the maximum number of updates a mini-batch contributes, counting the
exchange-round update itself, so R=1 means no local updates.

Party A owns X_A and the bottom model A.  Party B owns X_B, the labels, the
bottom model B and the top model.  Only activations and derivatives cross
the channel.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .dataio import AlignedDataset, BatchPlan, batch_indices
from .errors import ConfigError, ProtocolError, ShapeError
from .metrics import MetricsRecord, evaluate
from .model import (
    AdaGradState,
    MlpModel,
    adagrad_step,
    backward,
    forward,
    init_mlp,
    logistic_loss,
)
from .numerics import row_cosine
from .transport import START, STOP, Channel, ChannelConfig, Message, MessageKind, control, open_channel
from .workset import CacheEntry, WorksetTable

ALGORITHMS = ("vanilla", "fedbcd", "celu")
MODES = ("deterministic", "concurrent")


@dataclass
class TrainConfig:
    algorithm: str = "celu"
    batch_size: int = 256
    local_steps: int = 5  # R
    workset: int = 5  # W
    xi: float | None = 60.0  # degrees; None disables instance weighting
    lr: float = 0.05
    epochs: int = 1
    seed: int = 0
    dz: int = 16
    dz_b: int | None = None
    bottom_hidden: tuple[int, ...] = (32,)
    top_hidden: tuple[int, ...] = ()
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    eval_every: int = 100
    mode: str = "deterministic"
    max_rounds: int | None = None
    diagnostics: bool = False
    compute_time_s: float = 0.0

    @property
    def weighting(self) -> bool:
        return self.xi is not None

    @property
    def local_budget(self) -> int:
        """Local updates allowed per cached batch."""
        return self.local_steps - 1

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        for name in ("batch_size", "local_steps", "workset", "epochs", "dz", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.xi is not None and not 0.0 < self.xi <= 180.0:
            raise ConfigError(f"xi must lie in (0, 180] degrees, got {self.xi}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.algorithm == "vanilla" and self.local_steps != 1:
            raise ConfigError("vanilla training uses R = 1")
        if self.algorithm == "fedbcd" and (self.workset != 1 or self.weighting):
            raise ConfigError("fedbcd uses W = 1 and no instance weighting")
        if self.max_rounds is not None and self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")
        if self.compute_time_s < 0:
            raise ConfigError("compute_time_s must be non-negative")
        return self


# ---------------------------------------------------------------------------
# pure gradient routines


def ins_weight(ad_hoc, stale, xi_degrees: float) -> np.ndarray:
    """Row cosines between ad hoc and stale statistics, zeroed below cos(xi)."""
    if not 0.0 < xi_degrees <= 180.0:
        raise ConfigError(f"xi must lie in (0, 180] degrees, got {xi_degrees}")
    w = row_cosine(ad_hoc, stale)
    w[w < math.cos(math.radians(xi_degrees))] = 0.0
    return w


def bottom_gradients(bottom: MlpModel, x, upstream, weights=None):
    """Forward ``x`` through a bottom model and backprop ``upstream``."""
    z, trace = forward(bottom, x)
    grads, _ = backward(bottom, trace, upstream, weights)
    return grads, z


def party_a_local_gradients(bottom: MlpModel, x, z_stale, dz_stale, xi):
    """Estimated bottom-A gradient from cached statistics.

    Returns (grads, weights); ``weights`` is None when weighting is off.
    """
    z, trace = forward(bottom, x)
    weights = None if xi is None else ins_weight(z, z_stale, xi)
    grads, _ = backward(bottom, trace, dz_stale, weights)
    return grads, weights


@dataclass
class TopResult:
    top_grads: list
    bottom_grads: list
    dz_a: np.ndarray  # unweighted per-instance dloss/dZ_A
    loss: np.ndarray
    weights: np.ndarray | None = None


def party_b_gradients(top: MlpModel, bottom_b: MlpModel, z_a, x_b, y, weights=None) -> TopResult:
    """Top and bottom-B gradients for a batch whose Party A activations are ``z_a``."""
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b, trace_b = forward(bottom_b, x_b)
    if z_a.shape[0] != z_b.shape[0]:
        raise ShapeError(f"Z_A has {z_a.shape[0]} rows, Z_B has {z_b.shape[0]}")
    logits, trace_t = forward(top, np.hstack([z_a, z_b]))
    loss, dlogit = logistic_loss(y, logits[:, 0])
    upstream = dlogit[:, None]
    width = z_a.shape[1]
    top_grads, d_in = backward(top, trace_t, upstream)
    dz_a = d_in[:, :width]
    if weights is not None:
        top_grads, d_in = backward(top, trace_t, upstream, weights)
    bottom_grads, _ = backward(bottom_b, trace_b, d_in[:, width:])
    return TopResult(top_grads, bottom_grads, dz_a, loss, weights)


def party_b_local_gradients(top, bottom_b, z_a_stale, dz_stale, x_b, y, xi) -> TopResult:
    """Estimated top and bottom-B gradients from a cached batch.

    The ad hoc dloss/dZ_A (at the stale Z_A) is compared with the cached one
    to weight instances; weights are constants in the backward pass.
    """
    if xi is None:
        return party_b_gradients(top, bottom_b, z_a_stale, x_b, y)
    z_b, trace_b = forward(bottom_b, x_b)
    width = z_a_stale.shape[1]
    logits, trace_t = forward(top, np.hstack([z_a_stale, z_b]))
    loss, dlogit = logistic_loss(y, logits[:, 0])
    upstream = dlogit[:, None]
    _, d_in = backward(top, trace_t, upstream)
    dz_a = d_in[:, :width]
    weights = ins_weight(dz_a, dz_stale, xi)
    top_grads, d_in_w = backward(top, trace_t, upstream, weights)
    bottom_grads, _ = backward(bottom_b, trace_b, d_in_w[:, width:])
    return TopResult(top_grads, bottom_grads, dz_a, loss, weights)


# ---------------------------------------------------------------------------
# parties


@dataclass
class LocalStat:
    weights: np.ndarray | None


class PartyA:
    """Feature-only party.  Never sees labels, X_B or Party B's models."""

    __slots__ = (
        "x_a", "plan", "bottom", "opt", "workset", "endpoint", "lr", "xi",
        "rounds", "local_steps", "lock", "_pending",
    )

    def __init__(self, x_a, plan: BatchPlan, bottom: MlpModel, endpoint, lr: float, xi, workset: WorksetTable | None):
        self.x_a = x_a
        self.plan = plan
        self.bottom = bottom
        self.opt = AdaGradState.for_model(bottom)
        self.workset = workset
        self.endpoint = endpoint
        self.lr = lr
        self.xi = xi
        self.rounds = 0
        self.local_steps = 0
        self.lock = threading.RLock()
        self._pending = None

    def send_activations(self, step: int, round_id: int):
        idx = batch_indices(self.plan, step)
        with self.lock:
            z, trace = forward(self.bottom, self.x_a[idx])
        self.endpoint.send(Message(MessageKind.FORWARD_ACT, round_id, z))
        self._pending = (round_id, idx, z, trace)

    def finish_exchange(self):
        round_id, idx, z, trace = self._pending
        self._pending = None
        msg = self.endpoint.recv()
        if msg.kind != MessageKind.BACKWARD_DER or msg.batch_id != round_id:
            raise ProtocolError(f"Party A expected BACKWARD_DER {round_id}, got {msg.kind.name} {msg.batch_id}")
        if msg.payload.shape != z.shape:
            raise ProtocolError(f"derivatives shape {msg.payload.shape} does not match activations {z.shape}")
        dz = msg.payload
        with self.lock:
            grads, _ = backward(self.bottom, trace, dz)
            adagrad_step(self.bottom, grads, self.opt, self.lr)
        self.rounds += 1
        if self.workset is not None:
            self.workset.insert(CacheEntry(round_id, z, dz, round_id, idx), now=round_id)

    def local_update(self, entry: CacheEntry) -> LocalStat:
        with self.lock:
            grads, weights = party_a_local_gradients(
                self.bottom, self.x_a[entry.indices], entry.z_stale, entry.dz_stale, self.xi
            )
            adagrad_step(self.bottom, grads, self.opt, self.lr)
        self.workset.mark_used(entry.batch_id)
        self.local_steps += 1
        return LocalStat(weights)

    def handshake(self, batch_id: int):
        self.endpoint.send(control(batch_id))
        msg = self.endpoint.recv()
        if msg.kind != MessageKind.CONTROL or msg.batch_id != batch_id:
            raise ProtocolError(f"Party A expected CONTROL {batch_id}, got {msg.kind.name} {msg.batch_id}")


class PartyB:
    """Label party: owns X_B, y, bottom model B and the top model.  Never sees X_A or bottom model A."""

    __slots__ = (
        "x_b", "labels", "plan", "bottom", "top", "opt_bottom", "opt_top", "workset",
        "endpoint", "lr", "xi", "dz", "rounds", "local_steps", "lock", "last_loss",
    )

    def __init__(self, x_b, labels, plan: BatchPlan, bottom: MlpModel, top: MlpModel, endpoint, lr, xi, dz: int,
                 workset: WorksetTable | None):
        self.x_b = x_b
        self.labels = labels
        self.plan = plan
        self.bottom = bottom
        self.top = top
        self.opt_bottom = AdaGradState.for_model(bottom)
        self.opt_top = AdaGradState.for_model(top)
        self.workset = workset
        self.endpoint = endpoint
        self.lr = lr
        self.xi = xi
        self.dz = dz
        self.rounds = 0
        self.local_steps = 0
        self.lock = threading.RLock()
        self.last_loss = float("nan")

    def exchange(self, step: int, round_id: int, msg: Message | None = None):
        if msg is None:
            msg = self.endpoint.recv()
        if msg.kind != MessageKind.FORWARD_ACT or msg.batch_id != round_id:
            raise ProtocolError(f"Party B expected FORWARD_ACT {round_id}, got {msg.kind.name} {msg.batch_id}")
        idx = batch_indices(self.plan, step)
        if msg.payload.shape != (idx.shape[0], self.dz):
            raise ProtocolError(f"activations shape {msg.payload.shape}, expected {(idx.shape[0], self.dz)}")
        z_a = msg.payload
        with self.lock:
            res = party_b_gradients(self.top, self.bottom, z_a, self.x_b[idx], self.labels[idx])
        self.endpoint.send(Message(MessageKind.BACKWARD_DER, round_id, res.dz_a))
        with self.lock:
            adagrad_step(self.top, res.top_grads, self.opt_top, self.lr)
            adagrad_step(self.bottom, res.bottom_grads, self.opt_bottom, self.lr)
        self.last_loss = float(res.loss.mean())
        self.rounds += 1
        if self.workset is not None:
            self.workset.insert(CacheEntry(round_id, z_a, res.dz_a, round_id, idx), now=round_id)

    def local_update(self, entry: CacheEntry) -> LocalStat:
        with self.lock:
            res = party_b_local_gradients(
                self.top, self.bottom, entry.z_stale, entry.dz_stale,
                self.x_b[entry.indices], self.labels[entry.indices], self.xi,
            )
            adagrad_step(self.top, res.top_grads, self.opt_top, self.lr)
            adagrad_step(self.bottom, res.bottom_grads, self.opt_bottom, self.lr)
        self.workset.mark_used(entry.batch_id)
        self.local_steps += 1
        return LocalStat(res.weights)

    def handshake(self, batch_id: int):
        msg = self.endpoint.recv()
        if msg.kind != MessageKind.CONTROL or msg.batch_id != batch_id:
            raise ProtocolError(f"Party B expected CONTROL {batch_id}, got {msg.kind.name} {msg.batch_id}")
        self.endpoint.send(control(batch_id))


# ---------------------------------------------------------------------------
# orchestration


def model_seeds(seed: int) -> tuple[list[int], list[int], list[int]]:
    return [seed, 1], [seed, 2], [seed, 3]


def build_models(config: TrainConfig, d_a: int, d_b: int):
    s_a, s_b, s_t = model_seeds(config.seed)
    dz_b = config.dz_b or config.dz
    bottom_a = init_mlp([d_a, *config.bottom_hidden, config.dz], seed=s_a)
    bottom_b = init_mlp([d_b, *config.bottom_hidden, dz_b], seed=s_b)
    top = init_mlp([config.dz + dz_b, *config.top_hidden, 1], seed=s_t)
    return bottom_a, bottom_b, top


class Session:
    """One training run: both parties, their channel, and the metrics log.

    ``observer``, when given, is called as ``observer(session, party, entry)``
    right before each local update, and ``on_round(session)`` after every
    deterministic round.  Neither may mutate anything.  ``stop_when(record)``
    ends the run early once it returns true.
    """

    def __init__(self, config: TrainConfig, dataset: AlignedDataset, valid: AlignedDataset | None = None,
                 observer=None, stop_when=None, on_round=None):
        self.config = config.validate()
        self.dataset = dataset
        self.valid = valid
        self.observer = observer
        self.stop_when = stop_when
        self.on_round = on_round
        if config.diagnostics and observer is None:
            from .diagnostics import RhoShadow

            self.observer = observer = RhoShadow()
        if config.mode == "concurrent" and (observer is not None or on_round is not None):
            raise ConfigError("diagnostic observers need deterministic mode")
        bottom_a, bottom_b, top = build_models(config, dataset.d_a, dataset.d_b)
        self.channel: Channel = open_channel(config.channel)
        plan_a = BatchPlan(config.seed, config.batch_size, dataset.n, config.epochs)
        plan_b = BatchPlan(config.seed, config.batch_size, dataset.n, config.epochs)
        use_cache = config.algorithm != "vanilla" and config.local_budget >= 1
        xi = config.xi if config.algorithm == "celu" else None

        def table():
            return WorksetTable(config.workset, config.local_budget) if use_cache else None

        self.party_a = PartyA(dataset.x_a, plan_a, bottom_a, self.channel.a, config.lr, xi, table())
        self.party_b = PartyB(dataset.x_b, dataset.y, plan_b, bottom_b, top, self.channel.b, config.lr, xi,
                              config.dz, table())
        self.total_rounds = plan_a.total_steps
        if config.max_rounds is not None:
            self.total_rounds = min(self.total_rounds, config.max_rounds)
        self.records: list[MetricsRecord] = []
        self.round = 0
        self.stopped_early = False
        self._win_cos: list[float] = []
        self._win_zero = 0
        self._win_weights = 0
        self._stats_lock = threading.Lock()

    # -- bookkeeping ---------------------------------------------------
    def note_cosine(self, value: float | None):
        if value is not None:
            with self._stats_lock:
                self._win_cos.append(value)

    def _note_local(self, stat: LocalStat):
        if stat.weights is not None:
            with self._stats_lock:
                self._win_zero += int(np.count_nonzero(stat.weights == 0.0))
                self._win_weights += stat.weights.size
        if self.config.compute_time_s:
            self.channel.clock.charge(self.config.compute_time_s)

    def _record(self) -> MetricsRecord:
        a, b = self.party_a, self.party_b
        with a.lock, b.lock:
            loss, auc_value = evaluate(a.bottom, b.bottom, b.top, self.dataset, self.valid)
        with self._stats_lock:
            rho = float(np.quantile(self._win_cos, 0.05)) if self._win_cos else None
            zeroed = self._win_zero / self._win_weights if self._win_weights else 0.0
            self._win_cos, self._win_zero, self._win_weights = [], 0, 0
        rec = MetricsRecord(
            round=self.round,
            local_steps=b.local_steps,
            bytes_sent=self.channel.bytes_sent,
            simulated_time_s=self.channel.clock.now,
            train_loss=loss,
            eval_auc=auc_value,
            rho_estimate=rho,
            weights_zeroed_fraction=zeroed,
        )
        self.records.append(rec)
        return rec

    def _should_stop(self, rec: MetricsRecord) -> bool:
        if self.stop_when is not None and self.stop_when(rec):
            self.stopped_early = True
            return True
        return False

    def _local_phase(self, party, name: str):
        for _ in range(self.config.local_budget):
            entry = party.workset.sample_next()
            if entry is None:
                break
            if self.observer is not None:
                self.observer(self, name, entry)
            self._note_local(party.local_update(entry))

    # -- drivers ---------------------------------------------------------
    def run(self) -> list[MetricsRecord]:
        try:
            if self.config.mode == "deterministic":
                self._run_deterministic()
            else:
                self._run_concurrent()
        finally:
            for party in (self.party_a, self.party_b):
                if party.workset is not None:
                    party.workset.drain()
            self.channel.close()
        return self.records

    def _exchange(self, step: int):
        round_id = step + 1
        self.party_a.send_activations(step, round_id)
        self.party_b.exchange(step, round_id)
        self.party_a.finish_exchange()
        if self.config.compute_time_s:
            self.channel.clock.charge(self.config.compute_time_s)

    def _run_deterministic(self):
        a, b = self.party_a, self.party_b
        a.endpoint.send(control(START))
        b.handshake(START)
        msg = a.endpoint.recv()
        if msg.kind != MessageKind.CONTROL or msg.batch_id != START:
            raise ProtocolError("start handshake failed")
        if self._should_stop(self._record()):
            return self._finish()
        for step in range(self.total_rounds):
            self._exchange(step)
            self.round = step + 1
            if a.workset is not None:
                self._local_phase(a, "A")
                self._local_phase(b, "B")
            if self.on_round is not None:
                self.on_round(self)
            if self.round % self.config.eval_every == 0 or self.round == self.total_rounds:
                if self._should_stop(self._record()):
                    break
        self._finish()

    def _finish(self):
        a, b = self.party_a, self.party_b
        a.endpoint.send(control(STOP))
        b.handshake(STOP)
        msg = a.endpoint.recv()
        if msg.kind != MessageKind.CONTROL or msg.batch_id != STOP:
            raise ProtocolError("stop handshake failed")

    def _run_concurrent(self):
        a, b = self.party_a, self.party_b
        stop = threading.Event()
        halt = threading.Event()
        errors: list[BaseException] = []
        total = self.total_rounds

        def guarded(fn):
            def run():
                try:
                    fn()
                except BaseException as exc:  # surfaced after join
                    errors.append(exc)
                    halt.set()
                    stop.set()
                    self.channel.close()
            return run

        def comm_a():
            a.handshake(START)
            for step in range(total):
                if halt.is_set():
                    break
                a.send_activations(step, step + 1)
                a.finish_exchange()
            a.handshake(STOP)

        def comm_b():
            b.handshake(START)
            self._record()
            step = 0
            while True:
                msg = b.endpoint.recv()
                if msg.kind == MessageKind.CONTROL:
                    if msg.batch_id != STOP:
                        raise ProtocolError(f"Party B expected CONTROL STOP, got {msg.batch_id}")
                    b.endpoint.send(control(STOP))
                    return
                b.exchange(step, step + 1, msg)
                step += 1
                self.round = step
                if step % self.config.eval_every == 0 or step == total:
                    if self._should_stop(self._record()):
                        halt.set()

        def local(party):
            def run():
                while True:
                    entry = party.workset.wait_sample(stop)
                    if entry is None:
                        return
                    self._note_local(party.local_update(entry))
            return run

        threads = [threading.Thread(target=guarded(comm_a), name="A-comm"),
                   threading.Thread(target=guarded(comm_b), name="B-comm")]
        if a.workset is not None:
            threads += [threading.Thread(target=guarded(local(a)), name="A-local"),
                        threading.Thread(target=guarded(local(b)), name="B-local")]
        for t in threads:
            t.start()
        threads[0].join()
        threads[1].join()
        stop.set()
        for party in (a, b):
            if party.workset is not None:
                party.workset.wake()
        for t in threads[2:]:
            t.join()
        if errors:
            raise errors[0]


def run_training(config: TrainConfig, dataset: AlignedDataset, valid: AlignedDataset | None = None,
                 **kwargs) -> list[MetricsRecord]:
    return Session(config, dataset, valid, **kwargs).run()
