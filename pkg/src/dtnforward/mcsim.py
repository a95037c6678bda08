import heapq
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt

from .model import FloatArray, ModelParams, ParameterError, StateVector
from .policy import ForwardingPolicy

# Define the public API of this module
__all__ = [
    "InitialAssignment",
    "ContactModel",
    "ExponentialContacts",
    "TruncatedPowerLaw",
    "MCConfig",
    "NodeState",
    "MCOutcome",
    "EnsembleStats",
    "sample_truncated_pareto",
    "truncated_pareto_mean",
    "run_once",
    "run_ensemble",
]

IntArray = npt.NDArray[np.int64]

#: Event kind of a node-node contact
PAIR = 0
#: Event kind of a node-destination contact
DESTINATION = 1


class InitialAssignment(Enum):
    """How the initial fractions are turned into whole nodes"""

    #: Largest-remainder rounding of N times each fraction
    ROUNDING = "deterministic-rounding"
    #: One multinomial draw of N nodes over the compartments
    MULTINOMIAL = "multinomial"


@dataclass(frozen=True)
class ContactModel:
    """Abstract baseclass of the stochastic contact processes"""


@dataclass(frozen=True)
class ExponentialContacts(ContactModel):
    """Poisson contacts, at rate beta/N per node pair and beta0/N per node with
    the destination"""


@dataclass(frozen=True)
class TruncatedPowerLaw(ContactModel):
    """Renewal process per node pair with truncated power-law inter-contact times

    Inter-contact times are rescaled so their mean is N/beta, matching the
    mean-field contact rate. Destination contacts stay exponential.

    Attributes:
        alpha: Power-law exponent, the density falls as t^-(1 + alpha)
        t_min: Lower cutoff of the unscaled distribution
        t_max: Upper cutoff of the unscaled distribution
    """

    alpha: float = 0.4
    t_min: float = 1 / 720
    t_max: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if not 0 < self.t_min < self.t_max:
            raise ParameterError(
                f"Need 0 < t_min < t_max, got {self.t_min} and {self.t_max}"
            )


@dataclass(frozen=True)
class MCConfig:
    """Settings of a Monte Carlo ensemble

    Attributes:
        N: Number of nodes, the destination excluded
        runs: Independent runs in an ensemble
        seed: Root seed, run k uses the seed sequence (seed, k)
        contact: Contact process
        theta_star: Clock offsets are uniform in [-theta_star, theta_star]
        p_star: Probability of under- and of over-estimating energy by one unit
        assignment: How initial fractions become nodes
        report_points: Points of the grid the state curves are reported on
        threads: Worker threads running the ensemble
    """

    N: int = 160
    runs: int = 100
    seed: int = 0
    contact: ContactModel = field(default_factory=ExponentialContacts)
    theta_star: float = 0.0
    p_star: float = 0.0
    assignment: InitialAssignment = InitialAssignment.ROUNDING
    report_points: int = 101
    threads: int = 1

    def __post_init__(self):
        if self.N < 2:
            raise ParameterError(f"Need at least 2 nodes, got {self.N}")
        if self.runs < 1:
            raise ParameterError(f"Need at least 1 run, got {self.runs}")
        if self.theta_star < 0:
            raise ParameterError(f"theta_star must be >= 0, got {self.theta_star}")
        if not 0 <= self.p_star <= 0.5:
            raise ParameterError(f"p_star must be in [0, 0.5], got {self.p_star}")
        if self.report_points < 2 or self.threads < 1:
            raise ParameterError(
                f"Need report_points >= 2 and threads >= 1, got {self.report_points}"
                f" and {self.threads}"
            )


@dataclass
class NodeState:
    """One non-destination node

    Attributes:
        id: Index of the node
        energy: True residual energy level
        infective: Whether the node holds the message
        offset: Clock offset added to the true message age
    """

    id: int
    energy: int
    infective: bool = False
    offset: float = 0.0

    def estimate(self, draw: float, p_star: float, B: int) -> int:
        """Energy level the node believes it has for one contact

        The estimate is one unit low if draw < p_star, one unit high if
        draw > 1 - p_star and exact otherwise, clamped to [0, B].
        """
        if draw < p_star:
            return max(self.energy - 1, 0)
        if draw > 1 - p_star:
            return min(self.energy + 1, B)
        return self.energy


@dataclass
class MCOutcome:
    """Result of one simulated run

    Attributes:
        delivered: Whether any capable infective met the destination
        delivery_time: Time of the first such meeting
        S_counts: Susceptible nodes per energy level at the terminal time
        I_counts: Infective nodes per energy level at the terminal time
        contacts_per_node: Node-node contacts per node over the run
        initial_cost: Energy penalty per node at time 0
        final_cost: Energy penalty per node at the terminal time
        curves: Fractions (S_0..S_B, I_0..I_B) on the reporting grid
    """

    delivered: bool
    delivery_time: Optional[float]
    S_counts: IntArray
    I_counts: IntArray
    contacts_per_node: float
    initial_cost: float
    final_cost: float
    curves: FloatArray

    @property
    def unbiased_cost(self) -> float:
        return self.final_cost - self.initial_cost


@dataclass
class EnsembleStats:
    """Means and standard deviations over the runs of an ensemble

    Standard deviations are None for a single run.
    """

    runs: int
    delivery_mean: float
    delivery_std: Optional[float]
    cost_mean: float
    cost_std: Optional[float]
    contacts_mean: float
    times: FloatArray
    curve_mean: FloatArray
    curve_std: Optional[FloatArray]

    @property
    def delivery_se(self) -> Optional[float]:
        """Standard error of the mean delivery probability"""
        if self.delivery_std is None:
            return None
        return self.delivery_std / math.sqrt(self.runs)

    @property
    def cost_se(self) -> Optional[float]:
        """Standard error of the mean unbiased cost"""
        if self.cost_std is None:
            return None
        return self.cost_std / math.sqrt(self.runs)


def sample_truncated_pareto(
    alpha: float,
    t_min: float,
    t_max: float,
    draw: Union[float, FloatArray],
) -> Union[float, FloatArray]:
    """Inverse-CDF sample of the density proportional to t^-(1 + alpha) on
    [t_min, t_max]

    >>> round(float(sample_truncated_pareto(1.0, 1.0, 2.0, 0.5)), 6)
    1.333333

    Args:
        alpha: Exponent, must be positive
        t_min: Lower cutoff
        t_max: Upper cutoff
        draw: Uniform draw(s) in (0, 1)
    """
    if not (alpha > 0 and 0 < t_min < t_max):
        raise ParameterError(
            f"Need alpha > 0 and 0 < t_min < t_max, got {alpha}, {t_min}, {t_max}"
        )
    lo, hi = t_min**-alpha, t_max**-alpha
    return (lo - np.asarray(draw) * (lo - hi)) ** (-1 / alpha)


def truncated_pareto_mean(alpha: float, t_min: float, t_max: float) -> float:
    """Mean of the truncated power law sampled by `sample_truncated_pareto`"""
    norm = t_min**-alpha - t_max**-alpha
    if alpha == 1:
        return math.log(t_max / t_min) / norm
    return alpha / (1 - alpha) * (t_max ** (1 - alpha) - t_min ** (1 - alpha)) / norm


def _exponential_events(
    params: ModelParams, N: int, rng: np.random.Generator
) -> Tuple[FloatArray, IntArray, IntArray, IntArray]:
    # One aggregate clock for all pairs and all node-destination links
    T = params.horizon
    pair_rate = (N - 1) * params.beta / 2
    total = pair_rate + params.beta0
    expected = total * T
    first = int(expected + 10 * expected**0.5) + 20
    times = np.cumsum(rng.exponential(1 / total, first))
    while times[-1] <= T:
        more = rng.exponential(1 / total, len(times))
        times = np.concatenate([times, times[-1] + np.cumsum(more)])
    times = times[times <= T]
    m = len(times)
    kinds = np.where(rng.random(m) < pair_rate / total, PAIR, DESTINATION)
    a = rng.integers(N, size=m)
    b = rng.integers(N - 1, size=m)
    b += b >= a
    return times, kinds, a, b


def _power_law_events(
    params: ModelParams,
    N: int,
    contact: TruncatedPowerLaw,
    rng: np.random.Generator,
) -> Tuple[FloatArray, IntArray, IntArray, IntArray]:
    T = params.horizon
    # Rescale so the mean time between contacts of a pair is N / beta
    scale = N / params.beta / truncated_pareto_mean(
        contact.alpha, contact.t_min, contact.t_max
    )

    def gap() -> float:
        draw = rng.random()
        return scale * float(
            sample_truncated_pareto(contact.alpha, contact.t_min, contact.t_max, draw)
        )

    pairs = list(zip(*np.triu_indices(N, k=1)))
    heap = []
    for index in range(len(pairs)):
        # Burn in one renewal so the process does not start at a contact
        t = -gap()
        while t <= 0:
            t += gap()
        heap.append((t, index))
    heapq.heapify(heap)
    times, a, b = [], [], []
    while heap[0][0] <= T:
        t, index = heapq.heappop(heap)
        times.append(t)
        a.append(pairs[index][0])
        b.append(pairs[index][1])
        heapq.heappush(heap, (t + gap(), index))
    # The destination keeps meeting nodes as a Poisson process at rate beta0
    n_dest = rng.poisson(params.beta0 * T)
    dest_times = np.sort(rng.uniform(0, T, n_dest))
    dest_nodes = rng.integers(N, size=n_dest)
    all_times = np.concatenate([np.array(times), dest_times])
    order = np.argsort(all_times, kind="stable")
    kinds = np.concatenate([np.full(len(times), PAIR), np.full(n_dest, DESTINATION)])
    first = np.concatenate([np.array(a, dtype=np.int64), dest_nodes])
    second = np.concatenate([np.array(b, dtype=np.int64), np.zeros(n_dest, np.int64)])
    return all_times[order], kinds[order], first[order], second[order]


def _assign(
    init: StateVector, N: int, mode: InitialAssignment, rng: np.random.Generator
) -> IntArray:
    # Whole node counts for (S_0..S_B, I_0..I_B)
    fractions = np.clip(np.concatenate([init.S, init.I]), 0, None)
    if mode is InitialAssignment.MULTINOMIAL:
        return rng.multinomial(N, fractions / fractions.sum())
    exact = N * fractions / fractions.sum()
    counts = np.floor(exact).astype(np.int64)
    missing = N - int(counts.sum())
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:missing]] += 1
    return counts


def run_once(
    policy: ForwardingPolicy,
    params: ModelParams,
    init: StateVector,
    cfg: MCConfig,
    run_seed: Union[int, np.random.SeedSequence],
) -> MCOutcome:
    """Simulate the forwarding protocol over one sampled contact history

    A node carrying the message forwards it to a susceptible node it meets
    if the control at its estimated energy level and local clock says so,
    it really has s units and the receiver really has r units. Infectives
    with at least s units deliver to the destination on contact, the run
    continues to the horizon either way.

    Args:
        policy: Policy with a time schedule, feedback policies are compiled
            on the mean-field trajectory first
        params: Model constants, the horizon is the message TTL
        init: Fractions the initial nodes are drawn from
        cfg: Ensemble settings
        run_seed: Seed or seed sequence of this run
    """
    init.check(params)
    B, s, r, N = params.B, params.s, params.r, cfg.N
    control = policy.compile(params, init).timed_control(params)
    seq = (
        run_seed
        if isinstance(run_seed, np.random.SeedSequence)
        else np.random.SeedSequence(run_seed)
    )
    contact_seq, decide_seq, assign_seq = seq.spawn(3)
    contact_rng = np.random.default_rng(contact_seq)
    decide_rng = np.random.default_rng(decide_seq)

    counts = _assign(init, N, cfg.assignment, np.random.default_rng(assign_seq))
    offsets = decide_rng.uniform(-1, 1, N) * cfg.theta_star
    nodes: List[NodeState] = []
    for c, n in enumerate(counts):
        for _ in range(n):
            node = NodeState(id=len(nodes), energy=c % (B + 1), infective=c > B)
            node.offset = float(offsets[node.id])
            nodes.append(node)
    S_counts = counts[: B + 1].copy()
    I_counts = counts[B + 1 :].copy()
    a_pen = params.a
    initial_cost = float(a_pen @ (S_counts + I_counts)) / N

    if isinstance(cfg.contact, TruncatedPowerLaw):
        times, kinds, first, second = _power_law_events(
            params, N, cfg.contact, contact_rng
        )
    else:
        times, kinds, first, second = _exponential_events(params, N, contact_rng)
    draws = decide_rng.random((len(times), 2))

    grid = np.linspace(0, params.horizon, cfg.report_points)
    curves = np.empty((len(grid), 2 * (B + 1)))
    g = 0
    delivered_at: Optional[float] = None
    pair_events = 0
    for t, kind, x, y, (estimate_draw, forward_draw) in zip(
        times, kinds, first, second, draws
    ):
        while g < len(grid) and grid[g] < t:
            curves[g] = np.concatenate([S_counts, I_counts]) / N
            g += 1
        if kind == DESTINATION:
            node = nodes[x]
            if delivered_at is None and node.infective and node.energy >= s:
                delivered_at = float(t)
            continue
        pair_events += 1
        sender, receiver = nodes[x], nodes[y]
        if sender.infective == receiver.infective:
            continue
        if receiver.infective:
            sender, receiver = receiver, sender
        level = sender.estimate(estimate_draw, cfg.p_star, B)
        if level < s:
            continue
        u = control(float(t) + sender.offset)[level - s]
        if not forward_draw < u:
            continue
        if sender.energy < s or receiver.energy < r:
            continue
        I_counts[sender.energy] -= 1
        sender.energy -= s
        I_counts[sender.energy] += 1
        S_counts[receiver.energy] -= 1
        receiver.energy -= r
        receiver.infective = True
        I_counts[receiver.energy] += 1
    curves[g:] = np.concatenate([S_counts, I_counts]) / N

    assert S_counts.sum() + I_counts.sum() == N, "Nodes must be conserved"
    return MCOutcome(
        delivered=delivered_at is not None,
        delivery_time=delivered_at,
        S_counts=S_counts,
        I_counts=I_counts,
        contacts_per_node=2 * pair_events / N,
        initial_cost=initial_cost,
        final_cost=float(a_pen @ (S_counts + I_counts)) / N,
        curves=curves,
    )


def run_ensemble(
    policy: ForwardingPolicy,
    params: ModelParams,
    init: StateVector,
    cfg: MCConfig,
) -> EnsembleStats:
    """Run ``cfg.runs`` independent simulations and summarise them

    Run k is seeded by the seed sequence (cfg.seed, k), so the statistics
    only depend on the seed and the number of runs, not on the threads.
    """
    compiled = policy.compile(params, init)

    def one(k: int) -> MCOutcome:
        return run_once(
            compiled, params, init, cfg, np.random.SeedSequence([cfg.seed, k])
        )

    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        outcomes = list(pool.map(one, range(cfg.runs)))
    delivered = np.array([o.delivered for o in outcomes], dtype=np.float64)
    costs = np.array([o.unbiased_cost for o in outcomes])
    curves = np.stack([o.curves for o in outcomes])
    many = cfg.runs > 1
    stats = EnsembleStats(
        runs=cfg.runs,
        delivery_mean=float(delivered.mean()),
        delivery_std=float(delivered.std(ddof=1)) if many else None,
        cost_mean=float(costs.mean()),
        cost_std=float(costs.std(ddof=1)) if many else None,
        contacts_mean=float(np.mean([o.contacts_per_node for o in outcomes])),
        times=np.linspace(0, params.horizon, cfg.report_points),
        curve_mean=curves.mean(axis=0),
        curve_std=curves.std(axis=0, ddof=1) if many else None,
    )
    logging.info(
        f"Ensemble of {cfg.runs} runs with N={cfg.N}: delivery "
        f"{stats.delivery_mean:.4g}, unbiased cost {stats.cost_mean:.4g}"
    )
    return stats
