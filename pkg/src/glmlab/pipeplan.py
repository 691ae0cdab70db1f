"""3D-parallel plan search, pipeline schedule simulation and the carbon estimate."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

NAIVE = "naive"
GPIPE = "gpipe"
PIPEDREAM_FLUSH = "pipedream-flush"
POLICIES = (NAIVE, GPIPE, PIPEDREAM_FLUSH)


class PlanError(ValueError):
    pass


def _exact(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


# -- closed forms -----------------------------------------------------------


def bubble_ratio(p: int, m: int) -> Fraction:
    """Idle share of a flushed pipeline: ``(p - 1) / (m + p - 1)``."""
    if p < 1 or m < 1:
        raise PlanError("need p >= 1 and m >= 1")
    return Fraction(p - 1, m + p - 1)


def bubble_ratio_tp(n: int, t: int, m: int) -> Fraction:
    """Bubble ratio when ``n`` GPUs per model replica split as ``t`` tensor x ``n/t`` pipeline."""
    if t < 1 or n % t:
        raise PlanError(f"tensor parallel size {t} does not divide {n}")
    return bubble_ratio(n // t, m)


def balance_layers(k: int, p: int) -> list[int]:
    """``k`` layers per middle stage, one fewer on both embedding-bearing end stages."""
    if k < 2 or p < 2:
        raise PlanError("need k >= 2 and p >= 2")
    return [k - 1] + [k] * (p - 2) + [k - 1]


def partition_layers(num_layers: int, p: int) -> list[int]:
    """Split layers over ``p`` stages, keeping end stages one layer lighter when possible."""
    if p == 1:
        return [num_layers]
    if (num_layers + 2) % p == 0:
        return balance_layers((num_layers + 2) // p, p)
    base, extra = divmod(num_layers + 2, p)
    stages = [base] * p
    for i in range(extra):
        stages[1 + i % max(1, p - 2) if p > 2 else i] += 1
    stages[0] -= 1
    stages[-1] -= 1
    if min(stages) < 0:
        raise PlanError(f"cannot spread {num_layers} layers over {p} stages")
    return stages


def carbon_estimate(energy_mwh: float, grid_kg_per_kwh: float) -> float:
    """Metric tons of CO2 for ``energy_mwh`` at a grid intensity in kg/kWh."""
    if energy_mwh < 0 or grid_kg_per_kwh < 0:
        raise ValueError("energy and grid intensity must be nonnegative")
    return energy_mwh * 1000.0 * grid_kg_per_kwh / 1000.0


# -- specs ------------------------------------------------------------------


@dataclass(frozen=True)
class ClusterSpec:
    nodes: int
    gpus_per_node: int
    gpu_memory_gb: float = 40.0
    t_f: float = 1
    t_b: float = 1
    # fraction of device memory a plan may claim; the rest covers allocator
    # fragmentation, communication buckets and runtime context
    memory_cap_fraction: float = 0.8
    # relative slowdown per extra tensor-parallel rank inside a node
    tp_overhead_per_rank: float = 0.01
    hop_latency: float = 0

    def __post_init__(self):
        if min(self.nodes, self.gpus_per_node) < 1 or self.gpu_memory_gb <= 0:
            raise PlanError("cluster sizes must be positive")
        if self.t_f <= 0 or self.t_b <= 0:
            raise PlanError("forward/backward times must be positive")

    @property
    def gpus(self) -> int:
        return self.nodes * self.gpus_per_node


@dataclass(frozen=True)
class ModelSpec:
    """Transformer shape used for memory accounting (defaults: the 130B configuration)."""

    num_layers: int = 70
    hidden: int = 12288
    ffn_hidden: int = 32768
    vocab: int = 150528
    seq_length: int = 2048
    num_heads: int = 96

    @property
    def layer_params(self) -> int:
        d, f = self.hidden, self.ffn_hidden
        return 4 * d * d + 4 * d + 3 * d * f + 2 * f + d + 4 * d

    @property
    def embedding_params(self) -> int:
        return self.vocab * self.hidden

    @property
    def total_params(self) -> int:
        return self.num_layers * self.layer_params + self.embedding_params


@dataclass(frozen=True)
class BatchSpec:
    global_batch: int
    micro_batch: int = 1


@dataclass
class ParallelPlan:
    t: int
    p: int
    d: int
    m: int
    layers_per_stage: list[int]
    cross_node_tp: bool = False
    peak_memory_gb: float = 0.0
    step_cost: float = 0.0

    def __post_init__(self):
        if min(self.t, self.p, self.d, self.m) < 1:
            raise PlanError("plan sizes must be positive")
        if len(self.layers_per_stage) != self.p:
            raise PlanError("one layer count per pipeline stage is required")

    @property
    def bubble(self) -> Fraction:
        return bubble_ratio(self.p, self.m)

    def as_record(self) -> dict:
        return {
            "t": self.t, "p": self.p, "d": self.d, "m": self.m,
            "layers_per_stage": self.layers_per_stage,
            "bubble": float(self.bubble),
            "cross_node_tp": self.cross_node_tp,
            "peak_memory_gb": round(self.peak_memory_gb, 3),
            "step_cost": round(self.step_cost, 6),
        }


# -- memory -----------------------------------------------------------------

# fp16 weights + fp32 gradient accumulation buffers stay on every
# model-parallel rank; fp32 master weights and both Adam moments are
# sharded across data-parallel ranks
_REPLICATED_BYTES = 6
_SHARDED_BYTES = 12


def memory_estimate(plan: ParallelPlan, model: ModelSpec, policy: str = PIPEDREAM_FLUSH,
                    micro_batch: int = 1) -> list[dict]:
    """Per-stage parameter and activation element counts.

    End stages also hold the word embedding. Activations count the
    checkpointed layer inputs kept alive by in-flight micro-batches.
    """
    inflight = peak_inflight_closed_form(plan.p, plan.m, policy)
    act_per_layer = model.seq_length * micro_batch * model.hidden
    out = []
    for s, layers in enumerate(plan.layers_per_stage):
        params = layers * model.layer_params
        if s == 0 or s == plan.p - 1:
            params += model.embedding_params
        out.append({
            "stage": s,
            "layers": layers,
            "params": params,
            "activations": inflight[s] * layers * act_per_layer,
        })
    return out


def peak_memory_bytes(plan: ParallelPlan, model: ModelSpec, micro_batch: int = 1) -> float:
    """Largest per-GPU footprint over stages under PipeDream-Flush."""
    worst = 0.0
    for row in memory_estimate(plan, model, PIPEDREAM_FLUSH, micro_batch):
        per_gpu = row["params"] / plan.t
        state = per_gpu * (_REPLICATED_BYTES + _SHARDED_BYTES / plan.d)
        acts = 2.0 * row["activations"] / plan.t  # fp16, partitioned across tensor ranks
        worst = max(worst, state + acts)
    return worst


# -- plan search ------------------------------------------------------------


class PlanList(list):
    """Ranked plans; ``rejected`` counts why candidates were dropped."""

    def __init__(self, plans=(), rejected=None):
        super().__init__(plans)
        self.rejected: Counter = Counter(rejected or {})


def _divisors(n: int) -> list[int]:
    return [k for k in range(1, n + 1) if n % k == 0]


def step_cost(plan: ParallelPlan, cluster: ClusterSpec, num_layers: int) -> float:
    """Iteration time relative to a perfectly parallel, bubble-free run.

    With ``d * m`` fixed by the batch, time scales as the heaviest stage's
    layer share times the tensor-parallel overhead over ``1 - bubble``.
    """
    imbalance = max(plan.layers_per_stage) * plan.p / num_layers
    tp = 1.0 + cluster.tp_overhead_per_rank * (plan.t - 1)
    return imbalance * tp / (1.0 - float(plan.bubble))


def enumerate_plans(cluster: ClusterSpec, model: ModelSpec, batch: BatchSpec,
                    allow_cross_node: bool = False) -> PlanList:
    """All feasible ``(t, p, d, m)`` splits, best first.

    Feasible means ``t * p * d`` uses every GPU, ``t`` divides the node
    size (unless ``allow_cross_node``), ``d * m * micro_batch``
    equals the global batch, each stage has a layer, and the PipeDream-Flush
    footprint fits under ``memory_cap_fraction`` of device memory. Plans are
    ordered by cross-node tensor parallelism (never preferred), then
    estimated step cost, then bubble ratio.
    """
    plans, rejected = [], Counter()
    budget = cluster.gpu_memory_gb * 1e9 * cluster.memory_cap_fraction
    for t in _divisors(cluster.gpus):
        # a tensor-parallel group that does not tile a node straddles two
        cross = cluster.gpus_per_node % t != 0
        if cross and not allow_cross_node:
            rejected["tensor parallel exceeds a node"] += 1
            continue
        for p in _divisors(cluster.gpus // t):
            d = cluster.gpus // (t * p)
            per_step = d * batch.micro_batch
            if batch.global_batch % per_step:
                rejected["batch not divisible by data-parallel size"] += 1
                continue
            m = batch.global_batch // per_step
            if p > model.num_layers:
                rejected["more stages than layers"] += 1
                continue
            try:
                layers = partition_layers(model.num_layers, p)
            except PlanError:
                rejected["layers cannot be partitioned"] += 1
                continue
            if min(layers) < 1:
                rejected["empty pipeline stage"] += 1
                continue
            plan = ParallelPlan(t, p, d, m, layers, cross)
            mem = peak_memory_bytes(plan, model, batch.micro_batch)
            plan.peak_memory_gb = mem / 1e9
            if mem > budget:
                rejected["exceeds device memory"] += 1
                continue
            plan.step_cost = step_cost(plan, cluster, model.num_layers)
            plans.append(plan)
    plans.sort(key=lambda pl: (pl.cross_node_tp, pl.step_cost, pl.bubble, pl.t, pl.p))
    return PlanList(plans, rejected)


# -- schedule simulation ----------------------------------------------------


@dataclass(frozen=True)
class Event:
    stage: int
    micro_batch: int
    phase: str  # "F", "B" or "U"
    start: Fraction
    end: Fraction


@dataclass
class PipelineSchedule:
    policy: str
    p: int
    m: int
    events: list[Event]
    makespan: Fraction
    bubble_fraction: Fraction
    peak_inflight: list[int] = field(default_factory=list)

    def trace_table(self) -> list[tuple[int, str, int, float, float]]:
        return [(e.stage, e.phase, e.micro_batch, float(e.start), float(e.end))
                for e in sorted(self.events, key=lambda e: (e.stage, e.start, e.phase))]


def stage_order(policy: str, p: int, m: int, stage: int) -> list[tuple[str, int]]:
    """Fixed per-stage operation order for each policy."""
    if policy == NAIVE:
        return [op for i in range(m) for op in (("F", i), ("B", i))]
    if policy == GPIPE:
        return [("F", i) for i in range(m)] + [("B", i) for i in range(m)]
    if policy == PIPEDREAM_FLUSH:
        warm = min(p - stage - 1, m)
        order = [("F", i) for i in range(warm)]
        for i in range(m - warm):
            order += [("F", warm + i), ("B", i)]
        order += [("B", i) for i in range(m - warm, m)]
        return order
    raise PlanError(f"unknown schedule policy {policy!r}")


def peak_inflight_closed_form(p: int, m: int, policy: str) -> list[int]:
    if policy == PIPEDREAM_FLUSH:
        return [min(p - s, m) for s in range(p)]
    if policy == GPIPE:
        return [m] * p
    return [1] * p


def simulate_schedule(plan: ParallelPlan | tuple[int, int], cluster: ClusterSpec,
                      policy: str = PIPEDREAM_FLUSH) -> PipelineSchedule:
    """Event-level timeline of one training iteration on one pipeline.

    Each stage runs its ops in :func:`stage_order`; an op starts when its
    stage is free and its dependencies are done: F(i, s) after F(i, s-1),
    B(i, s) after F(i, s) and B(i, s+1). ``hop_latency`` is added to every
    cross-stage dependency.
    """
    p, m = (plan.p, plan.m) if isinstance(plan, ParallelPlan) else plan
    dur = {"F": _exact(cluster.t_f), "B": _exact(cluster.t_b)}
    hop = _exact(cluster.hop_latency)
    orders = [stage_order(policy, p, m, s) for s in range(p)]
    cursor = [0] * p
    free = [Fraction(0)] * p
    done: dict[tuple[str, int, int], Fraction] = {}
    events: list[Event] = []
    remaining = sum(len(o) for o in orders)
    while remaining:
        progressed = False
        for s in range(p):
            while cursor[s] < len(orders[s]):
                phase, i = orders[s][cursor[s]]
                deps = []
                if phase == "F" and s > 0:
                    deps.append((("F", i, s - 1), hop))
                if phase == "B":
                    deps.append((("F", i, s), Fraction(0)))
                    if s < p - 1:
                        deps.append((("B", i, s + 1), hop))
                if any(key not in done for key, _ in deps):
                    break
                start = max([free[s]] + [done[key] + lag for key, lag in deps])
                end = start + dur[phase]
                done[(phase, i, s)] = end
                events.append(Event(s, i, phase, start, end))
                free[s] = end
                cursor[s] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise PlanError("schedule deadlocked")
    makespan = max(free)
    events += [Event(s, -1, "U", makespan, makespan) for s in range(p)]
    busy = sum(e.end - e.start for e in events)
    return PipelineSchedule(policy, p, m, events, makespan,
                            1 - busy / (p * makespan), measure_inflight(events, p))


def measure_inflight(events: Iterable[Event], p: int) -> list[int]:
    """Max number of micro-batches whose forward has started and backward not finished."""
    peak = [0] * p
    by_stage: dict[int, list[tuple[Fraction, int]]] = {s: [] for s in range(p)}
    for e in events:
        if e.phase == "F":
            by_stage[e.stage].append((e.start, 1))
        elif e.phase == "B":
            by_stage[e.stage].append((e.end, -1))
    for s, marks in by_stage.items():
        alive = 0
        for _, delta in sorted(marks, key=lambda x: (x[0], x[1])):
            alive += delta
            peak[s] = max(peak[s], alive)
    return peak


def validate_schedule(schedule: PipelineSchedule) -> list[str]:
    """Independent check of the timeline; returns a list of violations."""
    problems = []
    ends: dict[tuple[str, int, int], Fraction] = {}
    starts: dict[tuple[str, int, int], Fraction] = {}
    per_stage: dict[int, list[Event]] = {}
    for e in schedule.events:
        if e.end < e.start:
            problems.append(f"negative duration {e}")
        if e.phase in ("F", "B"):
            key = (e.phase, e.micro_batch, e.stage)
            if key in ends:
                problems.append(f"duplicate op {key}")
            ends[key], starts[key] = e.end, e.start
            per_stage.setdefault(e.stage, []).append(e)
    for s in range(schedule.p):
        for i in range(schedule.m):
            for ph in ("F", "B"):
                if (ph, i, s) not in ends:
                    problems.append(f"missing {ph}({i}, {s})")
    for (ph, i, s), st in starts.items():
        if ph == "F" and s > 0 and ("F", i, s - 1) in ends and st < ends[("F", i, s - 1)]:
            problems.append(f"F({i},{s}) starts before F({i},{s - 1}) ends")
        if ph == "B":
            if ("F", i, s) in ends and st < ends[("F", i, s)]:
                problems.append(f"B({i},{s}) starts before its forward ends")
            if s < schedule.p - 1 and ("B", i, s + 1) in ends and st < ends[("B", i, s + 1)]:
                problems.append(f"B({i},{s}) starts before B({i},{s + 1}) ends")
    for s, evs in per_stage.items():
        evs = sorted(evs, key=lambda e: e.start)
        for a, b in zip(evs, evs[1:]):
            if b.start < a.end:
                problems.append(f"overlap on stage {s}: {a} / {b}")
    return problems


def ideal_makespan(p: int, m: int, t_f, t_b) -> Fraction:
    return (m + p - 1) * (_exact(t_f) + _exact(t_b))


def gpus_needed(plan: ParallelPlan) -> int:
    return plan.t * plan.p * plan.d


def humanize_ratio(r) -> str:
    return f"{100 * float(r):.1f}%"
