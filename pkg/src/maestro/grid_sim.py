"""Point-queue simulator of a signalized k x k grid.

Each intersection has four incoming approaches (N, E, S, W) and four phases.
Phase ``k`` gives green to approach ``k`` only (split phasing). Vehicles are
generated by Poisson processes on the boundary entry lanes, wait in FIFO
queues, discharge at ``saturation_flow`` vehicles per green lane per step, pick
a movement (straight / left / right) from the context's turn probabilities,
and travel ``ceil(link_travel_steps / speed_factor)`` steps to the next
queue or leave the grid.

Timing convention (1 step = 1 s): within a step, link arrivals join queues,
then boundary arrivals are generated, then green lanes discharge. A trip's
travel time is ``exit_step - generation_step + 1``; its free-flow time is the
number of links traversed times the nominal ``link_travel_steps`` (speed factor
1) plus one. Delay is the difference, so both queueing and a slow-traffic
context show up as delay.

Observation layout for one agent (``L = lanes_per_approach``)::

    [0, 4L)          queue length per incoming lane (vehicles)
    4L               inflow this step (vehicles joining the agent's queues)
    4L + 1           outflow this step (vehicles discharged)
    [4L+2, 4L+6)     one-hot current phase
    4L + 6           elapsed phase, min(elapsed / 30, 1)
    [4L+7, 8L+7)     occupancy per lane, queue / lane_capacity
    [8L+7, 8L+10)    total queue at the agent over the last 3 steps, newest first
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

N_PHASES = 4
APPROACHES = ("N", "E", "S", "W")
HISTORY_STEPS = 3
ELAPSED_NORM = 30.0
FEATURE_NAMES = (
    "queue",
    "wait",
    "pressure",
    "outflow",
    "inflow",
    "occupancy",
    "phase_elapsed",
    "throughput",
)

_MAX_ARRIVALS_PER_STEP = 4
_ROUTE_UNIFORMS = 16

# Heading h moves by _MOVES[h]: 0 north-bound, 1 east-bound, 2 south-bound, 3 west-bound.
_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))


class ContextError(ValueError):
    """A TrafficContext field is outside its valid range."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class SimulationStateError(RuntimeError):
    """Raised when stepping a finished (or never reset) episode."""


@dataclass(frozen=True)
class GridNetwork:
    rows: int = 4
    cols: int = 4
    lanes_per_approach: int = 1
    saturation_flow: int = 2
    link_travel_steps: int = 10
    lane_capacity: int = 20
    episode_steps: int = 360
    # Steps without discharge on the newly green approach after a phase change.
    switch_lost_steps: int = 1

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs rows >= 1 and cols >= 1")
        if self.lanes_per_approach < 1:
            raise ValueError("lanes_per_approach must be >= 1")
        if self.saturation_flow < 1 or self.link_travel_steps < 1:
            raise ValueError("saturation_flow and link_travel_steps must be >= 1")
        if self.lane_capacity < 1 or self.episode_steps < 1 or self.switch_lost_steps < 0:
            raise ValueError("invalid lane_capacity / episode_steps / switch_lost_steps")

    @property
    def n_agents(self) -> int:
        return self.rows * self.cols

    @property
    def obs_dim(self) -> int:
        return 8 * self.lanes_per_approach + 7 + HISTORY_STEPS

    @property
    def entry_lanes(self) -> list[tuple[int, int, int]]:
        """Boundary lanes as ``(agent, approach, lane)`` triples."""
        out = []
        for r in range(self.rows):
            for c in range(self.cols):
                for a in range(4):
                    if self.upstream(r, c, a) is None:
                        out.extend((r * self.cols + c, a, k) for k in range(self.lanes_per_approach))
        return out

    def neighbor(self, r: int, c: int, heading: int) -> int | None:
        dr, dc = _MOVES[heading]
        rr, cc = r + dr, c + dc
        if 0 <= rr < self.rows and 0 <= cc < self.cols:
            return rr * self.cols + cc
        return None

    def upstream(self, r: int, c: int, approach: int) -> int | None:
        # Vehicles on approach a travel with heading (a + 2) % 4, so they come
        # from the neighbor lying in direction a.
        return self.neighbor(r, c, approach)


@dataclass(frozen=True)
class TrafficContext:
    base_arrival_rate: float = 0.1
    approach_asymmetry: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    turn_probs: tuple[float, float, float] = (0.6, 0.2, 0.2)  # straight, left, right
    speed_factor: float = 1.0
    difficulty_tag: float = 0.5
    noise_seed: int = 0

    def validate(self) -> None:
        if not math.isfinite(self.base_arrival_rate) or not 0.0 <= self.base_arrival_rate <= 0.5:
            raise ContextError("base_arrival_rate", f"must lie in [0, 0.5], got {self.base_arrival_rate}")
        asym = self.approach_asymmetry
        if len(asym) != 4 or any(not math.isfinite(x) or x < 0 for x in asym):
            raise ContextError("approach_asymmetry", f"needs 4 finite non-negative values, got {asym}")
        if abs(sum(asym) - 4.0) > 1e-6:
            raise ContextError("approach_asymmetry", f"must sum to 4, got {sum(asym)}")
        tp = self.turn_probs
        if len(tp) != 3 or any(not math.isfinite(x) or x < 0 for x in tp):
            raise ContextError("turn_probs", f"needs 3 finite non-negative values, got {tp}")
        if abs(sum(tp) - 1.0) > 1e-9:
            raise ContextError("turn_probs", f"must sum to 1, got {sum(tp)}")
        if not math.isfinite(self.speed_factor) or not 0.5 <= self.speed_factor <= 1.5:
            raise ContextError("speed_factor", f"must lie in [0.5, 1.5], got {self.speed_factor}")
        if not math.isfinite(self.difficulty_tag):
            raise ContextError("difficulty_tag", "must be finite")

    def to_dict(self) -> dict:
        return {
            "base_arrival_rate": self.base_arrival_rate,
            "approach_asymmetry": list(self.approach_asymmetry),
            "turn_probs": list(self.turn_probs),
            "speed_factor": self.speed_factor,
            "difficulty_tag": self.difficulty_tag,
            "noise_seed": self.noise_seed,
        }


@dataclass
class IntersectionState:
    """Snapshot of one intersection after a step."""

    queue: list[int]
    phase: int
    elapsed_phase: int
    inflow_count: int
    outflow_count: int


@dataclass
class StepMetrics:
    throughput: int = 0
    total_queue: int = 0
    delay: float = 0.0  # summed delay of trips completed this step
    wait: float = 0.0  # vehicle-seconds spent waiting this step
    travel_times: list[float] = field(default_factory=list)
    trip_delays: list[float] = field(default_factory=list)
    arrivals: int = 0  # vehicles admitted into entry lanes
    generated: int = 0  # vehicles generated at the boundary, admitted or not
    in_network: int = 0


@dataclass(frozen=True)
class RewardCoefficients:
    flow: float = 1.0
    wait: float = 0.02
    pressure: float = 0.01


@dataclass(frozen=True)
class EpisodeSummary:
    throughput_total: int
    mean_travel_time: float | None
    mean_delay: float | None
    mean_wait: float | None
    mean_queue: float


def env_reward(
    state: IntersectionState,
    wait: float,
    pressure: float,
    coeffs: RewardCoefficients = RewardCoefficients(),
) -> float:
    """Template reward: flow minus weighted wait minus absolute pressure."""
    return coeffs.flow * state.outflow_count - coeffs.wait * wait - coeffs.pressure * abs(pressure)


def fixed_time_phase(step: int, period: int) -> int:
    if period < 1:
        raise ValueError("period must be >= 1")
    return (step // period) % N_PHASES


def fixed_time_policy(period: int, n_agents: int) -> Iterator[np.ndarray]:
    """Yield joint actions cycling 0 -> 1 -> 2 -> 3 every ``period`` steps."""
    if period < 1:
        raise ValueError("period must be >= 1")
    step = 0
    while True:
        yield np.full(n_agents, fixed_time_phase(step, period), dtype=np.int64)
        step += 1


def episode_metrics(records: Sequence[StepMetrics]) -> EpisodeSummary:
    if not records:
        raise ValueError("episode_metrics needs a non-empty StepMetrics stream")
    travel = [t for m in records for t in m.travel_times]
    delays = [t for m in records for t in m.trip_delays]
    generated = sum(m.generated for m in records)
    total_wait = sum(m.wait for m in records)
    return EpisodeSummary(
        throughput_total=sum(m.throughput for m in records),
        mean_travel_time=float(np.mean(travel)) if travel else None,
        mean_delay=float(np.mean(delays)) if delays else None,
        mean_wait=total_wait / generated if generated else None,
        mean_queue=float(np.mean([m.total_queue for m in records])),
    )


def percent_change(baseline: float, value: float) -> float:
    return 100.0 * (value - baseline) / baseline


class _Vehicle:
    __slots__ = ("born", "freeflow", "turns", "crossings")

    def __init__(self, born: int, turns: np.ndarray):
        self.born = born
        self.freeflow = 1
        self.turns = turns
        self.crossings = 0

    def next_turn_u(self) -> float:
        u = self.turns[self.crossings % len(self.turns)]
        self.crossings += 1
        return float(u)


def _poisson_ppf(u: np.ndarray, rate: float) -> np.ndarray:
    """Inverse-CDF Poisson draws; nondecreasing in ``rate`` for fixed ``u``."""
    if rate <= 0:
        return np.zeros_like(u, dtype=np.int64)
    counts = np.zeros(u.shape, dtype=np.int64)
    pmf = math.exp(-rate)
    cdf = pmf
    k = 0
    while True:
        above = u >= cdf
        if not above.any() or k > 60:
            break
        k += 1
        counts += above
        pmf *= rate / k
        cdf += pmf
    return counts


class GridSimulator:
    """Single-threaded simulator instance; create one per run."""

    def __init__(self, network: GridNetwork | None = None, coeffs: RewardCoefficients | None = None):
        self.network = network or GridNetwork()
        self.coeffs = coeffs or RewardCoefficients()
        self._ready = False

    # ----------------------------------------------------------------- reset
    def reset(self, context: TrafficContext, seed: int) -> np.ndarray:
        context.validate()
        net = self.network
        self.context = context
        self.rng = np.random.default_rng(seed)
        n, lanes = net.n_agents, net.lanes_per_approach
        self.queues = [[[deque() for _ in range(lanes)] for _ in range(4)] for _ in range(n)]
        self.backlog = {lane: deque() for lane in net.entry_lanes}
        self.phase = np.zeros(n, dtype=np.int64)
        self.elapsed = np.zeros(n, dtype=np.int64)
        self.lost = np.zeros(n, dtype=np.int64)
        self.inflow = np.zeros(n, dtype=np.int64)
        self.outflow = np.zeros(n, dtype=np.int64)
        self.exits = np.zeros(n, dtype=np.int64)
        self.wait_now = np.zeros(n)
        self.history = np.zeros((n, HISTORY_STEPS))
        # links[t % horizon] holds (vehicle, agent, approach) due at step t
        self.link_steps = math.ceil(net.link_travel_steps / context.speed_factor)
        self.links: dict[int, list] = {}
        self.held: list = []  # link vehicles blocked by a full downstream lane
        self.t = 0
        self.done = False
        self.admitted_total = 0
        self.exited_total = 0
        self._entry_rates = {
            lane: context.base_arrival_rate * context.approach_asymmetry[lane[1]] for lane in net.entry_lanes
        }
        # One independent stream per entry lane: a count uniform per step and a
        # block of route uniforms per potential vehicle. Contexts that differ
        # only in rates therefore see nested arrival realizations.
        ss = np.random.SeedSequence(seed)
        steps = net.episode_steps
        self._arrivals = {}
        for key, child in zip(net.entry_lanes, ss.spawn(len(net.entry_lanes))):
            lane_rng = np.random.default_rng(child)
            u = lane_rng.random(steps)
            routes = lane_rng.random((steps, _MAX_ARRIVALS_PER_STEP, _ROUTE_UNIFORMS))
            self._arrivals[key] = (_poisson_ppf(u, self._entry_rates[key]), routes)
        cum = np.cumsum(context.turn_probs)
        self._turn_cdf = (cum[0], cum[1])
        self._ready = True
        return self.observe()

    # ------------------------------------------------------------------ step
    def step(self, joint_action: Sequence[int]) -> tuple[np.ndarray, np.ndarray, StepMetrics, bool]:
        if not self._ready:
            raise SimulationStateError("reset() must be called before step()")
        if self.done:
            raise SimulationStateError("episode is done; call reset()")
        net = self.network
        actions = np.asarray(joint_action)
        if actions.shape != (net.n_agents,):
            raise ValueError(f"expected {net.n_agents} actions, got shape {actions.shape}")
        if actions.dtype.kind not in "iu" and not np.all(actions == np.round(actions)):
            raise ValueError("actions must be integer phase indices")
        if np.any(actions < 0) or np.any(actions >= N_PHASES):
            raise ValueError(f"actions must lie in [0, {N_PHASES}), got {actions.tolist()}")
        actions = actions.astype(np.int64)

        t = self.t
        cap = net.lane_capacity
        metrics = StepMetrics()
        self.inflow[:] = 0
        self.outflow[:] = 0
        self.exits[:] = 0
        self.wait_now[:] = 0.0

        # 1. link arrivals (blocked vehicles retry first, FIFO)
        due = self.held + self.links.pop(t, [])
        self.held = []
        for item in due:
            veh, agent, approach = item
            lane = self._pick_lane(agent, approach)
            if len(lane) < cap:
                lane.append(veh)
                self.inflow[agent] += 1
            else:
                self.held.append(item)

        # 2. boundary arrivals; a full entry lane sends vehicles to the backlog
        for key, (counts, routes) in self._arrivals.items():
            agent, approach, k = key
            backlog = self.backlog[key]
            count = int(counts[t])
            metrics.generated += count
            for j in range(count):
                turns = routes[t, j] if j < _MAX_ARRIVALS_PER_STEP else self.rng.random(_ROUTE_UNIFORMS)
                backlog.append(_Vehicle(t, turns))
            lane = self.queues[agent][approach][k]
            while backlog and len(lane) < cap:
                lane.append(backlog.popleft())
                self.inflow[agent] += 1
                metrics.arrivals += 1
        self.admitted_total += metrics.arrivals

        # 3. phase update and discharge
        changed = actions != self.phase
        self.elapsed = np.where(changed, 0, self.elapsed + 1)
        self.lost = np.where(changed, net.switch_lost_steps, self.lost)
        self.phase = actions
        r_turn_s, r_turn_l = self._turn_cdf
        for agent in range(net.n_agents):
            if self.lost[agent] > 0:
                self.lost[agent] -= 1
                continue
            approach = int(self.phase[agent])
            row, col = divmod(agent, net.cols)
            heading = (approach + 2) % 4
            for lane in self.queues[agent][approach]:
                served = min(len(lane), net.saturation_flow)
                for _ in range(served):
                    veh = lane.popleft()
                    self.outflow[agent] += 1
                    u = veh.next_turn_u()
                    if u < r_turn_s:
                        out_heading = heading
                    elif u < r_turn_l:
                        out_heading = (heading - 1) % 4
                    else:
                        out_heading = (heading + 1) % 4
                    nxt = net.neighbor(row, col, out_heading)
                    if nxt is None:
                        travel = t - veh.born + 1
                        metrics.travel_times.append(float(travel))
                        metrics.trip_delays.append(float(travel - veh.freeflow))
                        self.exits[agent] += 1
                    else:
                        veh.freeflow += net.link_travel_steps
                        self.links.setdefault(t + self.link_steps, []).append(
                            (veh, nxt, (out_heading + 2) % 4)
                        )
        metrics.throughput = int(self.exits.sum())
        self.exited_total += metrics.throughput
        metrics.delay = float(sum(metrics.trip_delays))

        # 4. waiting: queued vehicles, boundary backlog and blocked link vehicles
        queue_tot = np.array([sum(len(l) for ap in self.queues[a] for l in ap) for a in range(net.n_agents)])
        self.wait_now += queue_tot
        for (agent, _, _), backlog in self.backlog.items():
            self.wait_now[agent] += len(backlog)
        for _, agent, _ in self.held:
            self.wait_now[agent] += 1
        metrics.total_queue = int(queue_tot.sum())
        metrics.wait = float(self.wait_now.sum())
        metrics.in_network = self.vehicles_in_network()

        self.history = np.roll(self.history, 1, axis=1)
        self.history[:, 0] = queue_tot
        self._queue_tot = queue_tot

        self.t += 1
        self.done = self.t >= net.episode_steps
        rewards = self.rewards()
        return self.observe(), rewards, metrics, self.done

    def _pick_lane(self, agent: int, approach: int) -> deque:
        lanes = self.queues[agent][approach]
        if len(lanes) == 1:
            return lanes[0]
        return min(lanes, key=len)

    # ------------------------------------------------------------- accessors
    def vehicles_in_network(self) -> int:
        queued = sum(len(l) for per_agent in self.queues for ap in per_agent for l in ap)
        on_links = sum(len(v) for v in self.links.values()) + len(self.held)
        return queued + on_links

    def intersection_state(self, agent: int) -> IntersectionState:
        return IntersectionState(
            queue=[len(l) for ap in self.queues[agent] for l in ap],
            phase=int(self.phase[agent]),
            elapsed_phase=int(self.elapsed[agent]),
            inflow_count=int(self.inflow[agent]),
            outflow_count=int(self.outflow[agent]),
        )

    def pressure(self, agent: int) -> float:
        """Incoming queue minus queue on the downstream lanes this agent feeds."""
        net = self.network
        row, col = divmod(agent, net.cols)
        incoming = sum(len(l) for ap in self.queues[agent] for l in ap)
        downstream = 0
        for heading in range(4):
            nxt = net.neighbor(row, col, heading)
            if nxt is not None:
                downstream += sum(len(l) for l in self.queues[nxt][(heading + 2) % 4])
        return float(incoming - downstream)

    def rewards(self) -> np.ndarray:
        return np.array(
            [
                env_reward(self.intersection_state(a), self.wait_now[a], self.pressure(a), self.coeffs)
                for a in range(self.network.n_agents)
            ]
        )

    def features(self) -> list[dict[str, float]]:
        """Per-agent feature maps for reward programs (agent-local, per step)."""
        net = self.network
        n_lanes = 4 * net.lanes_per_approach
        out = []
        for a in range(net.n_agents):
            q = sum(len(l) for ap in self.queues[a] for l in ap)
            out.append(
                {
                    "queue": float(q),
                    "wait": float(self.wait_now[a]),
                    "pressure": self.pressure(a),
                    "outflow": float(self.outflow[a]),
                    "inflow": float(self.inflow[a]),
                    "occupancy": q / (n_lanes * net.lane_capacity),
                    "phase_elapsed": float(self.elapsed[a]),
                    "throughput": float(self.exits[a]),
                }
            )
        return out

    def observe(self) -> np.ndarray:
        net = self.network
        n, lanes = net.n_agents, net.lanes_per_approach
        obs = np.zeros((n, net.obs_dim))
        base = 4 * lanes
        for a in range(n):
            q = [len(l) for ap in self.queues[a] for l in ap]
            obs[a, :base] = q
            obs[a, base] = self.inflow[a]
            obs[a, base + 1] = self.outflow[a]
            obs[a, base + 2 + self.phase[a]] = 1.0
            obs[a, base + 6] = min(self.elapsed[a] / ELAPSED_NORM, 1.0)
            obs[a, base + 7 : 2 * base + 7] = np.asarray(q) / net.lane_capacity
            obs[a, 2 * base + 7 :] = self.history[a]
        return obs
