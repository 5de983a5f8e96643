"""Discrete-event execution of the asynchronous edge-learning protocol.

A run is Phase 0 (core training on its own data) followed by one round per
edge: downlink of a core snapshot, Phase 1 training on the edge, uplink of
the trained model(s), then Phase 2 distillation into the core. Rounds are
driven by an integer-tick event queue, so a lagged uplink simply arrives
after later rounds have completed.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from collections import Counter, deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterator

import numpy as np

from . import data as dp
from . import metrics as mx
from . import nn
from .config import ScenarioConfig, ScheduleSpec
from .distillation import DistillConfig, Provenance, TeacherSet, distill_phase, prepare_teacher
from .errors import EdgeKDError, SimulationError
from .nn import Model, TrainSchedule

log = logging.getLogger(__name__)


def derive_seed(master: int, *keys: int | str) -> int:
    """Independent 32-bit seed for a named purpose under a master seed."""
    words = [int(master)]
    for key in keys:
        if isinstance(key, str):
            words.extend(key.encode())
        else:
            words.append(int(key))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


class EventKind(IntEnum):
    # value is the tie-break priority within one tick
    uplink = 0
    distill_complete = 1
    edge_departure = 2
    edge_arrival = 3
    downlink = 4


@dataclass(frozen=True)
class SimEvent:
    time: int
    kind: EventKind
    edge_id: int
    payload: dict = field(default_factory=dict, compare=False)

    def sort_key(self) -> tuple[int, int, int]:
        return (self.time, int(self.kind), self.edge_id)


class EventQueue:
    """Min-heap of events ordered by (time, kind priority, edge id, insertion)."""

    def __init__(self) -> None:
        self._heap: list = []
        self._counter = itertools.count()
        self.last_time = 0

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, event: SimEvent) -> None:
        if event.time < self.last_time:
            raise ValueError(f"cannot schedule {event.kind.name} at {event.time}, clock is at {self.last_time}")
        heapq.heappush(self._heap, (*event.sort_key(), next(self._counter), event))

    def pop(self) -> SimEvent:
        event = heapq.heappop(self._heap)[-1]
        self.last_time = event.time
        return event

    def peek(self) -> SimEvent | None:
        return self._heap[0][-1] if self._heap else None


@dataclass
class EdgeArtifact:
    models: list[Model]
    round_index: int
    edge_id: int
    mode: str = "cloned"
    noisy: bool = False
    lagged: bool = False

    def __post_init__(self) -> None:
        if not self.models:
            raise ValueError("an edge artifact holds at least one model")
        first = self.models[0]
        if any(not m.compatible_with(first) for m in self.models[1:]):
            raise ValueError("ensemble members must share one architecture")


class TemporalMemory:
    """Bounded FIFO of the most recent artifacts; iteration yields newest first."""

    def __init__(self, capacity: int) -> None:
        if capacity < 0:
            raise ValueError("memory capacity must be non-negative")
        self.capacity = capacity
        self._buffer: deque[EdgeArtifact] = deque()

    def __len__(self) -> int:
        return len(self._buffer)

    def __iter__(self) -> Iterator[EdgeArtifact]:
        return reversed(self._buffer)

    def push(self, artifact: EdgeArtifact) -> EdgeArtifact | None:
        if self.capacity == 0:
            return None
        self._buffer.append(artifact)
        if len(self._buffer) > self.capacity:
            return self._buffer.popleft()
        return None

    def edge_ids(self) -> list[int]:
        """Oldest first."""
        return [a.edge_id for a in self._buffer]


@dataclass
class RoundState:
    round_index: int = 0
    active_edges: int = 0
    core_model_id: int = 0
    pending_uplinks: set[int] = field(default_factory=set)


class DataVault:
    """Hands out partitions by name and logs who read what."""

    def __init__(self, parts: dict[str, dp.LabeledSet]) -> None:
        self._parts = parts
        self.log: list[tuple[str, str]] = []

    def read(self, actor: str, name: str) -> dp.LabeledSet:
        if name not in self._parts:
            raise KeyError(f"no partition named {name!r}")
        self.log.append((actor, name))
        return self._parts[name]

    def audit(self) -> dict:
        reads = Counter(self.log)
        core_edge_reads = sum(n for (actor, name), n in reads.items()
                              if actor == "core" and name.startswith("edge_"))
        edge_reads = {name: n for (actor, name), n in reads.items()
                      if actor == name and name.startswith("edge_")}
        foreign = sum(n for (actor, name), n in reads.items()
                      if actor.startswith("edge_") and actor != name)
        return {"core_reads_of_edge_data": core_edge_reads,
                "edge_self_reads": edge_reads,
                "cross_edge_reads": foreign,
                "reads": {f"{a}->{n}": c for (a, n), c in sorted(reads.items())}}


def schedule_from(spec: ScheduleSpec) -> TrainSchedule:
    return TrainSchedule(epochs=spec.epochs, base_lr=spec.base_lr,
                         decay_milestones=None if spec.decay_milestones is None else list(spec.decay_milestones),
                         decay_factor=spec.decay_factor, batch_size=spec.batch_size, momentum=spec.momentum)


def run_phase0(core_model: Model, core_data: dp.LabeledSet, schedule: TrainSchedule,
               seed: int = 0) -> tuple[Model, nn.TrainHistory]:
    if len(core_data) == 0:
        raise ValueError("core data is empty")
    return nn.train_sgd(core_model, core_data.inputs, core_data.labels, schedule, rng_seed=seed)


def run_phase1(core_model: Model, edge_data: dp.LabeledSet, cfg: DistillConfig, ensemble_size: int,
               seed: int, schedule: TrainSchedule, *, edge_id: int = 0, round_index: int = 0,
               pretrain: Callable[[Model], Model] | None = None,
               member_seeds: list[int] | None = None) -> EdgeArtifact:
    """Train ``ensemble_size`` copies of one initial edge model on the edge data.

    Members differ only in the batch-order seed. For independent teachers the
    caller passes ``pretrain``, the core-side training applied to the fresh
    initialisation before it is dispatched.
    """
    if ensemble_size < 1:
        raise ValueError("ensemble_size must be >= 1")
    start = prepare_teacher(core_model, cfg.mode, derive_seed(seed, "init"))
    if pretrain is not None:
        start = pretrain(start)
    if member_seeds is None:
        member_seeds = [derive_seed(seed, "member", j) for j in range(ensemble_size)]
    members = []
    for j in range(ensemble_size):
        trained, _ = nn.train_sgd(start, edge_data.inputs, edge_data.labels, schedule,
                                  rng_seed=member_seeds[j])
        members.append(trained)
    return EdgeArtifact(members, round_index, edge_id, cfg.mode)


def build_teacher_set(incoming: EdgeArtifact, memory: TemporalMemory) -> TeacherSet:
    teachers, prov, weights = [], [], []
    for m in incoming.models:
        teachers.append(m)
        prov.append(Provenance(incoming.round_index, incoming.edge_id, incoming.mode,
                               incoming.noisy, incoming.lagged))
        weights.append(1.0)
    for art in memory:
        for m in art.models:
            teachers.append(m)
            prov.append(Provenance(art.round_index, art.edge_id, art.mode, art.noisy, art.lagged))
            weights.append(1.0 / len(art.models))
    return TeacherSet(teachers, prov, weights)


def run_phase2(core_model: Model, memory: TemporalMemory, incoming: EdgeArtifact,
               core_data: dp.LabeledSet, cfg: DistillConfig, schedule: TrainSchedule,
               seed: int = 0) -> tuple[Model, nn.TrainHistory, TeacherSet]:
    """Distil the incoming ensemble plus memory into the core, then store the ensemble."""
    teachers = build_teacher_set(incoming, memory)
    student, history = distill_phase(core_model, teachers, core_data.inputs, core_data.labels,
                                     cfg, schedule, rng_seed=seed)
    memory.push(incoming)
    return student, history, teachers


@dataclass
class Benchmark:
    partition: dp.DatasetPartition
    edge_train: list[dp.LabeledSet]
    edge_holdout: list[dp.LabeledSet]
    test: dp.LabeledSet


def build_benchmark(cfg: ScenarioConfig) -> Benchmark:
    """Data for one run; depends only on the dataset, partition and noise sections."""
    ds = cfg.dataset
    data_seed = ds.seed
    per_class = ds.samples_per_class + ds.test_per_class
    full = dp.make_synthetic(ds.class_count, per_class, ds.input_dim, ds.difficulty,
                             derive_seed(data_seed, "dataset"), ds.clusters_per_class)
    train, test = dp.stratified_split(full, ds.test_per_class / per_class, derive_seed(data_seed, "test"))
    ps = cfg.partition
    split_seed = derive_seed(cfg.seed, "split") if ps.seed is None else derive_seed(ps.seed, "split")
    part = dp.partition(train, ps.edges, ps.core_fraction, ps.jitter, derive_seed(split_seed, "partition"))
    edge_train, edge_holdout = [], []
    noise_edges = set(cfg.noise.edges)
    batch = cfg.edge_schedule().batch_size
    for k, edge in enumerate(part.edges, start=1):
        if ps.holdout_fraction > 0:
            rest, hold = dp.stratified_split(edge, ps.holdout_fraction, derive_seed(split_seed, "holdout", k))
        else:
            rest, hold = edge, edge.subset(np.array([], dtype=np.int64))
        if k in noise_edges and cfg.noise.p > 0:
            spec = dp.NoiseSpec(cfg.noise.p, noise_edges, derive_seed(split_seed, "noise", k))
            rest = dp.corrupt_labels(rest, spec, batch)
        edge_train.append(rest)
        edge_holdout.append(hold)
    return Benchmark(part, edge_train, edge_holdout, test)


@dataclass
class SimulationResult:
    records: list[mx.RoundRecord]
    trace: list[tuple[int, str, int]]
    memory_trace: list[list[int]]
    audit: dict
    idle_ticks: int = 0
    dropped_uplinks: list[int] = field(default_factory=list)

    def summary(self, cfg: ScenarioConfig) -> dict:
        final = self.records[-1]
        return {
            "name": cfg.name,
            "variant": cfg.variant,
            "seed": cfg.seed,
            "final_core_test_acc": final.core_test_acc,
            "rounds": len(self.records) - 1,
            "core_test_acc": [r.core_test_acc for r in self.records],
            "consensus_current": [r.to_json()["consensus_current"] for r in self.records],
            "consensus_edge1": [r.to_json()["consensus_edge1"] for r in self.records],
            "memory_size": [r.memory_size for r in self.records],
            "memory_contents": self.memory_trace,
            "spike_rounds": [r.round_index for r in self.records if r.spike_flag],
            "noisy_rounds": [r.round_index for r in self.records if r.noisy_flag],
            "dropped_uplinks": self.dropped_uplinks,
            "idle_ticks": self.idle_ticks,
            "event_trace": [[t, k, e] for t, k, e in self.trace],
            "audit": self.audit,
            "records": [r.to_json() for r in self.records],
            "notes": {"consensus_edge1": "edge-1 model frozen at its uplink"},
        }


class Simulator:
    """One scenario run. Construct, optionally ``schedule_lag``, then ``run``."""

    def __init__(self, cfg: ScenarioConfig, threads: int = 1) -> None:
        self.cfg = cfg
        self.threads = threads
        self.bench = build_benchmark(cfg)
        parts = {"core": self.bench.partition.core, "test": self.bench.test}
        for k, (tr, ho) in enumerate(zip(self.bench.edge_train, self.bench.edge_holdout), start=1):
            parts[f"edge_{k}"] = tr
            parts[f"holdout_{k}"] = ho
        self.vault = DataVault(parts)
        self.K = self.bench.partition.K
        self.lags: dict[int, int] = {int(k): int(v) for k, v in cfg.lag.delays.items()}
        self.distill_cfg = DistillConfig(
            temperature=cfg.distill.temperature, memory_size=cfg.resolved_memory_size,
            core_loss_weight=cfg.distill.core_loss_weight, mode=cfg.mode,  # type: ignore[arg-type]
            asymmetric_softening=cfg.distill.asymmetric_softening,
            min_delta=cfg.distill.min_delta, patience=cfg.distill.patience)
        self.core_schedule = schedule_from(cfg.training.core)
        self.edge_sched = schedule_from(cfg.edge_schedule())
        self.distill_sched = schedule_from(cfg.distill_schedule())

    def schedule_lag(self, edge_id: int, delay_ticks: int) -> None:
        if not 1 <= edge_id <= self.K:
            raise ValueError(f"unknown edge {edge_id} (edges are 1..{self.K})")
        if delay_ticks < 0:
            raise ValueError("delay must be non-negative")
        self.lags[edge_id] = int(delay_ticks)

    def _delay(self, edge_id: int) -> int:
        if self.cfg.lag.policy == "no_lag":
            return 0
        return self.lags.get(edge_id, 0)

    def _arrivals(self) -> list[tuple[int, int]]:
        tl = self.cfg.timeline
        if tl.arrivals is not None:
            return [(a.time, a.edge) for a in tl.arrivals]
        order = tl.order or list(range(1, self.K + 1))
        spacing = tl.phase1_ticks if tl.arrival_spacing is None else tl.arrival_spacing
        return [(i * spacing, k) for i, k in enumerate(order)]

    # core-side: fresh independent models first learn from the core data
    def _core_pretrain(self, edge_id: int) -> Callable[[Model], Model] | None:
        if self.cfg.mode != "independent":
            return None

        def pretrain(model: Model) -> Model:
            core = self.vault.read("core", "core")
            trained, _ = nn.train_sgd(model, core.inputs, core.labels, self.core_schedule,
                                      rng_seed=derive_seed(self.cfg.seed, "indep-core", edge_id))
            return trained
        return pretrain

    def _phase1_job(self, snapshot: Model, edge_id: int, round_hint: int) -> EdgeArtifact:
        edge = self.vault.read(f"edge_{edge_id}", f"edge_{edge_id}")
        art = run_phase1(snapshot, edge, self.distill_cfg, self.cfg.resolved_ensemble_size,
                         derive_seed(self.cfg.seed, "edge", edge_id), self.edge_sched,
                         edge_id=edge_id, round_index=round_hint,
                         pretrain=self._core_pretrain(edge_id))
        art.noisy = edge_id in set(self.cfg.noise.edges) and self.cfg.noise.p > 0
        return art

    def run(self) -> SimulationResult:
        cfg = self.cfg
        dims = [cfg.dataset.input_dim, *cfg.model.hidden, cfg.dataset.class_count]
        core = nn.init_model(dims, derive_seed(cfg.seed, "core-init"), cfg.model.activation)
        core_data = self.vault.read("core", "core")
        try:
            core, _ = run_phase0(core, core_data, self.core_schedule, derive_seed(cfg.seed, "phase0"))
        except EdgeKDError as exc:
            raise SimulationError(0, None, exc) from exc
        test = self.vault.read("evaluator", "test")
        core_eval = self.vault.read("evaluator", "core")
        records = [mx.RoundRecord(
            round_index=0, variant=cfg.variant,
            core_test_acc=nn.accuracy(core, test.inputs, test.labels),
            core_train_acc=nn.accuracy(core, core_eval.inputs, core_eval.labels))]
        memory = TemporalMemory(cfg.resolved_memory_size)
        memory_trace: list[list[int]] = [[]]
        state = RoundState()
        queue = EventQueue()
        for time, edge_id in self._arrivals():
            queue.push(SimEvent(time, EventKind.edge_arrival, edge_id))
        for dep in cfg.timeline.departures:
            queue.push(SimEvent(dep.time, EventKind.edge_departure, dep.edge))

        trace: list[tuple[int, str, int]] = []
        departed: set[int] = set()
        in_flight: dict[int, dict] = {}
        ready: dict[int, dict] = {}
        dropped: list[int] = []
        edge1_teacher: list[Model] | None = None
        pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        idle = 0
        busy_until = 0
        last_time = 0
        try:
            while queue:
                event = queue.pop()
                if event.time < last_time:
                    raise AssertionError("event queue went backwards")
                if not in_flight and not ready and event.kind == EventKind.edge_arrival and event.time > busy_until:
                    idle += event.time - max(busy_until, last_time)
                last_time = event.time
                k = event.edge_id
                trace.append((event.time, event.kind.name, k))

                if event.kind == EventKind.edge_arrival:
                    if k in departed:
                        continue
                    state.active_edges += 1
                    queue.push(SimEvent(event.time, EventKind.downlink, k))

                elif event.kind == EventKind.downlink:
                    if k in departed:
                        continue
                    snapshot = core.clone()
                    try:
                        if pool is not None:
                            job: Future | EdgeArtifact = pool.submit(self._phase1_job, snapshot, k, state.round_index + 1)
                        else:
                            job = self._phase1_job(snapshot, k, state.round_index + 1)
                    except EdgeKDError as exc:
                        raise SimulationError(state.round_index + 1, k, exc) from exc
                    delay = self._delay(k)
                    in_flight[k] = {"job": job, "delay": delay, "downlink_time": event.time}
                    state.pending_uplinks.add(k)
                    queue.push(SimEvent(event.time + cfg.timeline.phase1_ticks + delay, EventKind.uplink, k,
                                        {"delay": delay}))

                elif event.kind == EventKind.uplink:
                    flight = in_flight.pop(k)
                    state.pending_uplinks.discard(k)
                    lagged = flight["delay"] > 0
                    if k in departed or (lagged and cfg.lag.policy == "abort"):
                        dropped.append(k)
                        trace[-1] = (event.time, "uplink_dropped", k)
                        continue
                    job = flight["job"]
                    try:
                        artifact = job.result() if isinstance(job, Future) else job
                    except EdgeKDError as exc:
                        raise SimulationError(state.round_index + 1, k, exc) from exc
                    artifact.lagged = lagged
                    ready[k] = {"artifact": artifact}
                    queue.push(SimEvent(event.time, EventKind.distill_complete, k))

                elif event.kind == EventKind.distill_complete:
                    artifact = ready.pop(k)["artifact"]
                    state.round_index += 1
                    artifact.round_index = state.round_index
                    before = core
                    occupancy_before = len(memory)
                    try:
                        core, hist, _ = run_phase2(
                            core, memory, artifact, self.vault.read("core", "core"), self.distill_cfg,
                            self.distill_sched, derive_seed(cfg.seed, "distill", state.round_index))
                    except EdgeKDError as exc:
                        raise SimulationError(state.round_index, k, exc) from exc
                    state.core_model_id += 1
                    if k == 1:
                        edge1_teacher = artifact.models
                    rec = self._record(state.round_index, k, before, core, artifact, edge1_teacher,
                                       test, core_eval, len(memory))
                    rec.teacher_count = len(artifact.models) + occupancy_before
                    rec.distill_epochs = hist.epochs_run
                    rec.time = event.time
                    records.append(rec)
                    memory_trace.append(memory.edge_ids())
                    busy_until = event.time

                elif event.kind == EventKind.edge_departure:
                    departed.add(k)
                    if k in state.pending_uplinks:
                        log.info("edge %d departed with an uplink outstanding", k)
        finally:
            if pool is not None:
                pool.shutdown(wait=True)

        flags = mx.overfit_spike_detector([r.core_train_acc for r in records],
                                          cfg.metrics.spike_threshold, cfg.metrics.spike_window)
        for rec, flag in zip(records, flags):
            rec.spike_flag = flag
        return SimulationResult(records, trace, memory_trace, self.vault.audit(), idle, dropped)

    def _record(self, round_index, edge_id, before, after, artifact, edge1_models, test,
                core_eval, memory_size) -> mx.RoundRecord:
        holdout = self.vault.read("evaluator", f"holdout_{edge_id}")
        teacher_ps = mx.prediction_set(artifact.models, test)
        before_ps = mx.prediction_set(before, test)
        after_ps = mx.prediction_set(after, test)
        d_mutual, d_exclusive = mx.area_deltas(before_ps, after_ps, teacher_ps)
        rec = mx.RoundRecord(
            round_index=round_index, variant=self.cfg.variant, edge_id=edge_id,
            core_test_acc=after_ps.accuracy,
            edge_test_acc=teacher_ps.accuracy,
            core_train_acc=nn.accuracy(after, core_eval.inputs, core_eval.labels),
            consensus_current=mx.consensus(teacher_ps, after_ps).consensus,
            consensus_at_uplink=mx.consensus(teacher_ps, before_ps).consensus,
            delta_mutual=d_mutual, delta_exclusive=d_exclusive,
            correct_before=len(before_ps), correct_after=len(after_ps),
            transfer_score=mx.edge_transfer_score(before, after, holdout),
            noisy_flag=artifact.noisy, lagged_flag=artifact.lagged,
            memory_size=memory_size,
        )
        if edge1_models is not None:
            rec.consensus_edge1 = mx.consensus(mx.prediction_set(edge1_models, test), after_ps).consensus
        return rec


def run_simulation(cfg: ScenarioConfig, threads: int = 1) -> SimulationResult:
    return Simulator(cfg, threads).run()
