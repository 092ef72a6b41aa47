"""DMA configuration strategies: OPT, MAX, LIN and RAND.

All strategies talk to a *channel oracle*: any callable ``oracle(config, f)``
returning a :class:`~dmasim.physics.ChannelPair`.  An oracle may additionally
expose ``batch(configs, f) -> (K, 2) complex`` for vectorised sampling.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from dmasim.physics import ChannelPair, as_config, config_from_str, config_to_str, gain_db, gains_db

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 500
DEFAULT_SWEEPS = 5


class CostKind(str, enum.Enum):
    BEAM_AND_NULL = "BeamAndNull"
    BEAM_ONLY = "BeamOnly"


class Strategy(str, enum.Enum):
    OPT = "OPT"
    MAX = "MAX"
    LIN = "LIN"
    RAND = "RAND"


@dataclass(frozen=True)
class CostSpec:
    kind: CostKind
    f_op: float

    def __post_init__(self):
        object.__setattr__(self, "kind", CostKind(self.kind))


@dataclass
class OptimizationResult:
    config: np.ndarray
    cost: float
    trace: list[tuple[int, float]]
    oracle_calls: int
    init_cost: float
    strategy: str = ""
    sweeps: int = 0
    predicted_cost: float | None = None  # LIN only: surrogate cost of the final config


@dataclass
class LinearSurrogate:
    """MC-unaware affine model ``h_t(c) = b0_t + sum_i c_i b_it``."""

    intercept: np.ndarray  # (2,) complex, columns (des, und)
    coefficients: np.ndarray  # (N, 2) complex
    residual_rms: np.ndarray  # (2,) relative RMS residual on the fit samples
    n_samples: int
    flagged_bits: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def n_atoms(self) -> int:
        return len(self.coefficients)

    def predict_many(self, configs) -> np.ndarray:
        configs = np.atleast_2d(np.asarray(configs, dtype=float))
        return self.intercept + configs @ self.coefficients

    def predict(self, config) -> ChannelPair:
        h = self.intercept + np.asarray(config, dtype=float) @ self.coefficients
        return ChannelPair(complex(h[0]), complex(h[1]))

    def __call__(self, config, f: float | None = None) -> ChannelPair:
        return self.predict(config)

    def batch(self, configs, f: float | None = None) -> np.ndarray:
        return self.predict_many(configs)


@dataclass(frozen=True)
class SampleSet:
    """Random configurations with their measured channels at one frequency."""

    configs: np.ndarray  # (K, N) uint8
    channels: np.ndarray  # (K, 2) complex
    f: float


def cost_from_gains(g_des: float, g_und: float, kind: CostKind) -> float:
    if CostKind(kind) is CostKind.BEAM_AND_NULL:
        return g_und - g_des
    return -g_des


def cost_of(h: ChannelPair, kind: CostKind) -> float:
    return cost_from_gains(gain_db(h.h_des), gain_db(h.h_und), kind)


def costs_of(h: np.ndarray, kind: CostKind) -> np.ndarray:
    """Vectorised cost for a (K, 2) channel array."""
    g = gains_db(h)
    if CostKind(kind) is CostKind.BEAM_AND_NULL:
        return g[:, 1] - g[:, 0]
    return -g[:, 0]


def cost(oracle, config, spec: CostSpec) -> float:
    """Cost in dB of ``config`` at ``spec.f_op``; lower is better."""
    return cost_of(oracle(config, spec.f_op), spec.kind)


def rand_config(n: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. fair-coin configuration of ``n`` bits."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.integers(0, 2, size=n, dtype=np.uint8)


def draw_samples(oracle, n_atoms: int, f: float, k: int, rng: np.random.Generator) -> SampleSet:
    if k < 1:
        raise ValueError("k must be >= 1")
    configs = rng.integers(0, 2, size=(k, n_atoms), dtype=np.uint8)
    batch = getattr(oracle, "batch", None)
    if batch is not None:
        h = np.asarray(batch(configs, f))
    else:
        h = np.array([[p.h_des, p.h_und] for p in (oracle(c, f) for c in configs)])
    return SampleSet(configs, h, float(f))


def random_search(oracle, spec: CostSpec, k: int = DEFAULT_SAMPLES, rng=None, *,
                  n_atoms: int | None = None, samples: SampleSet | None = None):
    """Best of ``k`` uniform random configurations; returns ``(config, cost)``."""
    if samples is None:
        n_atoms = n_atoms or oracle.n_atoms
        samples = draw_samples(oracle, n_atoms, spec.f_op, k, rng)
    costs = costs_of(samples.channels, spec.kind)
    i = int(np.argmin(costs))
    return samples.configs[i].copy(), float(costs[i])


def descend(objective: Callable[[np.ndarray], float], init, max_sweeps: int = DEFAULT_SWEEPS,
            call_offset: int = 0) -> OptimizationResult:
    """Binary coordinate descent on an arbitrary scalar objective.

    Bits are visited in ascending index order and a flip is kept only if it
    strictly lowers the objective. The loop ends after ``max_sweeps`` sweeps or
    after the first sweep without an accepted flip.
    """
    config = as_config(init).copy()
    calls = call_offset
    current = float(objective(config))
    calls += 1
    init_cost = current
    trace = [(calls, current)]
    sweeps = 0
    for _ in range(max_sweeps):
        sweeps += 1
        accepted = 0
        for i in range(len(config)):
            config[i] ^= 1
            trial = float(objective(config))
            calls += 1
            if trial < current:
                current = trial
                accepted += 1
                trace.append((calls, current))
            else:
                config[i] ^= 1
        if not accepted:
            break
    return OptimizationResult(config=config, cost=current, trace=trace, oracle_calls=calls,
                              init_cost=init_cost, sweeps=sweeps)


def coordinate_descent(oracle, spec: CostSpec, init, max_sweeps: int = DEFAULT_SWEEPS) -> OptimizationResult:
    return descend(lambda c: cost(oracle, c, spec), init, max_sweeps)


def _as_arrays(samples):
    if isinstance(samples, SampleSet):
        return samples.configs, samples.channels
    pairs = list(samples)
    configs = np.array([as_config(c) for c, _ in pairs])
    channels = np.array([[h.h_des, h.h_und] for _, h in pairs], complex)
    return configs, channels


def fit_linear_surrogate(samples) -> LinearSurrogate:
    """Least-squares affine fit of complex channels against configuration bits.

    ``samples`` is a :class:`SampleSet` or a sequence of ``(config, ChannelPair)``.
    Bits that never change across the samples cannot be identified; they are
    flagged and given zero coefficients.
    """
    configs, channels = _as_arrays(samples)
    k, n = configs.shape
    if k < n + 1:
        raise ValueError(f"need at least {n + 1} samples for {n} bits, got {k}")
    if np.all(configs == configs[0]):
        raise ValueError("all sample configurations are identical")

    warnings = []
    constant = np.all(configs == configs[0], axis=0)
    flagged = np.flatnonzero(constant).tolist()
    if flagged:
        warnings.append(f"bits {flagged} constant across samples; coefficients set to zero")
    free = np.flatnonzero(~constant)
    design = np.column_stack([np.ones(k), configs[:, free].astype(float)])
    beta, _, rank, _ = np.linalg.lstsq(design, channels, rcond=None)
    if rank < design.shape[1]:
        warnings.append(f"design rank {rank} < {design.shape[1]} columns; minimum-norm solution used")
    for w in warnings:
        log.warning("linear surrogate: %s", w)

    coefficients = np.zeros((n, 2), complex)
    coefficients[free] = beta[1:]
    residual = design @ beta - channels
    scale = np.sqrt(np.mean(np.abs(channels) ** 2, axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.sqrt(np.mean(np.abs(residual) ** 2, axis=0)) / scale
    return LinearSurrogate(intercept=beta[0].copy(), coefficients=coefficients,
                           residual_rms=np.nan_to_num(rel), n_samples=k,
                           flagged_bits=flagged, warnings=warnings)


def _sample(oracle, spec, k, rng, samples):
    if samples is None:
        samples = draw_samples(oracle, oracle.n_atoms, spec.f_op, k, rng)
    return samples


def optimize_opt(oracle, spec: CostSpec, rng=None, *, k: int = DEFAULT_SAMPLES,
                 samples: SampleSet | None = None, max_sweeps: int = DEFAULT_SWEEPS,
                 strategy: str = "") -> OptimizationResult:
    """Model-agnostic optimization: best-of-k initialization then coordinate descent
    directly on the oracle. With ``BeamAndNull`` this is OPT, with ``BeamOnly`` MAX."""
    samples = _sample(oracle, spec, k, rng, samples)
    init, _ = random_search(oracle, spec, samples=samples)
    res = descend(lambda c: cost(oracle, c, spec), init, max_sweeps, call_offset=len(samples.configs))
    res.strategy = strategy or (Strategy.OPT.value if spec.kind is CostKind.BEAM_AND_NULL
                                else Strategy.MAX.value)
    return res


def optimize_max(oracle, f_op: float, rng=None, **kw) -> OptimizationResult:
    return optimize_opt(oracle, CostSpec(CostKind.BEAM_ONLY, f_op), rng, strategy=Strategy.MAX.value, **kw)


def optimize_lin(oracle, spec: CostSpec, rng=None, *, k: int = DEFAULT_SAMPLES,
                 samples: SampleSet | None = None, max_sweeps: int = DEFAULT_SWEEPS,
                 surrogate: LinearSurrogate | None = None) -> OptimizationResult:
    """MC-unaware model-based optimization.

    Fits the affine surrogate on the sampled channels, starts from the
    lowest true-cost sample (the OPT initialization) and runs coordinate
    descent against the surrogate's predictions. ``cost`` and ``init_cost`` of
    the result are true oracle costs; ``trace`` holds surrogate costs.
    """
    samples = _sample(oracle, spec, k, rng, samples)
    if surrogate is None:
        surrogate = fit_linear_surrogate(samples)
    init, init_cost = random_search(oracle, spec, samples=samples)
    res = descend(lambda c: cost_of(surrogate.predict(c), spec.kind), init, max_sweeps)
    predicted = res.cost
    true_cost = cost(oracle, res.config, spec)
    return OptimizationResult(config=res.config, cost=true_cost, trace=res.trace,
                              oracle_calls=len(samples.configs) + 1, init_cost=init_cost,
                              strategy=Strategy.LIN.value, sweeps=res.sweeps,
                              predicted_cost=predicted)


def optimize_rand(oracle, spec: CostSpec, rng) -> OptimizationResult:
    config = rand_config(oracle.n_atoms, rng)
    c = cost(oracle, config, spec)
    return OptimizationResult(config=config, cost=c, trace=[(1, c)], oracle_calls=1,
                              init_cost=c, strategy=Strategy.RAND.value)


def optimize_strategy(strategy, oracle, f_op: float, rng, *, samples: SampleSet | None = None,
                      k: int = DEFAULT_SAMPLES, max_sweeps: int = DEFAULT_SWEEPS) -> OptimizationResult:
    """Run one named strategy. ``samples`` may be shared between OPT, MAX and LIN.

    RAND draws its configuration from ``rng``; the other strategies use ``rng``
    only when ``samples`` is not given. Costs are reported as BeamAndNull except
    for MAX, which optimizes and reports BeamOnly.
    """
    strategy = Strategy(strategy)
    bn = CostSpec(CostKind.BEAM_AND_NULL, f_op)
    if strategy is Strategy.OPT:
        return optimize_opt(oracle, bn, rng, k=k, samples=samples, max_sweeps=max_sweeps)
    if strategy is Strategy.MAX:
        return optimize_max(oracle, f_op, rng, k=k, samples=samples, max_sweeps=max_sweeps)
    if strategy is Strategy.LIN:
        return optimize_lin(oracle, bn, rng, k=k, samples=samples, max_sweeps=max_sweeps)
    return optimize_rand(oracle, bn, rng)


# -- codebook records ----------------------------------------------------

CODEBOOK_FIELDS = ["strategy", "f_op_hz", "config", "cost_db", "init_cost_db", "oracle_calls",
                   "gain_des_db", "gain_und_db"]
TRACE_FIELDS = ["strategy", "f_op_hz", "eval_index", "cost_db"]


@dataclass(frozen=True)
class CodebookEntry:
    strategy: str
    f_op_hz: float
    config: np.ndarray
    cost_db: float
    init_cost_db: float
    oracle_calls: int
    gain_des_db: float
    gain_und_db: float

    @classmethod
    def from_result(cls, res: OptimizationResult, f_op: float, h: ChannelPair) -> "CodebookEntry":
        return cls(res.strategy, float(f_op), res.config.copy(), res.cost, res.init_cost,
                   res.oracle_calls, gain_db(h.h_des), gain_db(h.h_und))


def _num(x) -> str:
    return repr(float(x))


def write_codebook(path, entries: Sequence[CodebookEntry]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CODEBOOK_FIELDS)
        for e in entries:
            w.writerow([e.strategy, _num(e.f_op_hz), config_to_str(e.config), _num(e.cost_db),
                        _num(e.init_cost_db), e.oracle_calls, _num(e.gain_des_db), _num(e.gain_und_db)])


def read_codebook(path) -> list[CodebookEntry]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [CodebookEntry(r["strategy"], float(r["f_op_hz"]), config_from_str(r["config"]),
                          float(r["cost_db"]), float(r["init_cost_db"]), int(r["oracle_calls"]),
                          float(r["gain_des_db"]), float(r["gain_und_db"])) for r in rows]


def lookup(entries: Sequence[CodebookEntry], strategy, f_op: float) -> CodebookEntry | None:
    strategy = Strategy(strategy).value
    for e in entries:
        if e.strategy == strategy and np.isclose(e.f_op_hz, f_op, rtol=0, atol=1.0):
            return e
    return None


def write_traces(path, results: Sequence[tuple[float, OptimizationResult]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for f_op, res in results:
            for idx, c in res.trace:
                w.writerow([res.strategy, _num(f_op), idx, _num(c)])
