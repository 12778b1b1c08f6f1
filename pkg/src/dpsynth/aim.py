"""Workload-aware iterative marginal synthesizer.

Each round privately selects a workload marginal whose model estimate looks
worst, measures it with Gaussian noise, refits the junction-tree model to all
measurements, and anneals the noise scale when a measurement stops moving the
model. Records are then sampled from the fitted model.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import DiscreteTable
from .marginals import MAX_CELLS, MarginalQuery, Workload, all_kway_workload, compute_marginal
from .model import Measurement, ModelState, admissible, build_model
from .privacy import (BudgetExhausted, BudgetLedger, default_delta, eps_delta_to_rho,
                      exponential_mechanism, gaussian_mechanism)

logger = logging.getLogger(__name__)

# expected |N(0, 1)|
NOISE_PENALTY = math.sqrt(2.0 / math.pi)
SAMPLE_STREAM = 0xFFFFFFFF


class NoCandidates(RuntimeError):
    """No workload query passes the structural filter."""


@dataclass(frozen=True)
class SynthConfig:
    epsilon: float
    delta: float | None = None
    rounds_max: int | None = None
    init_fraction: float = 0.1
    select_fraction: float = 0.1
    treewidth_cap: int = 3
    anneal_factor: float = 2.0
    n_output: int | None = None
    seed: int = 0
    max_clique_cells: int = MAX_CELLS

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.delta is not None and not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        for name in ("init_fraction", "select_fraction"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.rounds_max is not None and self.rounds_max < 1:
            raise ValueError("rounds_max must be positive")
        if self.treewidth_cap < 1:
            raise ValueError("treewidth_cap must be positive")
        if not self.anneal_factor > 1:
            raise ValueError("anneal_factor must exceed 1")
        if self.n_output is not None and self.n_output < 1:
            raise ValueError("n_output must be positive")

    def resolved_delta(self, n: int) -> float:
        return self.delta if self.delta is not None else default_delta(n)

    def total_rho(self, n: int) -> float:
        return eps_delta_to_rho(self.epsilon, self.resolved_delta(n))


@dataclass
class RoundRecord:
    round: int
    query: list[str]
    sigma: float
    rho: float
    improvement: float | None


@dataclass
class RoundLog:
    records: list[RoundRecord] = field(default_factory=list)
    ledger: BudgetLedger | None = None
    epsilon: float | None = None
    delta: float | None = None

    @property
    def rho_total(self) -> float:
        return math.fsum(r.rho for r in self.records)

    def to_json(self) -> list[dict]:
        return [asdict(r) for r in self.records]

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"


def _sigma_for(rho: float) -> float:
    return math.sqrt(1.0 / (2.0 * rho))


def initialize_model(table: DiscreteTable, cfg: SynthConfig, ledger: BudgetLedger,
                     rng: np.random.Generator | None = None,
                     log: RoundLog | None = None) -> ModelState:
    """Measure every 1-way marginal with an equal share of the initialization budget."""
    d = len(table.schema)
    rho_init = cfg.init_fraction * ledger.total_rho
    if rho_init <= 0 or not ledger.can_afford(rho_init):
        raise BudgetExhausted("not enough budget to initialise the model")
    rho_each = rho_init / d
    sigma = _sigma_for(rho_each)
    measurements = []
    for a in range(d):
        q = MarginalQuery((a,))
        y = gaussian_mechanism(compute_marginal(table, q).counts, 1.0, rho_each,
                               rng=rng, ledger=ledger, label=f"init:{table.schema.names[a]}")
        measurements.append(Measurement(q, y, sigma))
        if log is not None:
            log.records.append(RoundRecord(0, [table.schema.names[a]], sigma, rho_each, None))
    return build_model(table.domain, measurements)


def candidate_scores(table: DiscreteTable, model: ModelState, candidates: list[MarginalQuery],
                     sigma_t: float, weights=None) -> np.ndarray:
    """L1 gap between data and model on each candidate, minus the expected noise mass."""
    scores = np.empty(len(candidates))
    for i, q in enumerate(candidates):
        truth = compute_marginal(table, q).counts
        gap = np.abs(truth - model.marginal(q)).sum()
        scores[i] = gap - NOISE_PENALTY * sigma_t * q.cells(table.domain)
        if weights is not None:
            scores[i] *= weights[i]
    return scores


def structural_candidates(model: ModelState, workload: Workload, treewidth_cap: int,
                          max_cells: int = MAX_CELLS) -> list[int]:
    d = len(model.domain)
    queries = model.queries
    return [i for i, q in enumerate(workload.queries)
            if admissible(d, model.domain, queries, q, treewidth_cap, max_cells)]


def select_candidate(table: DiscreteTable, model: ModelState, workload: Workload,
                     sigma_t: float, rho_select: float, ledger: BudgetLedger,
                     rng: np.random.Generator | None = None, treewidth_cap: int = 3,
                     max_cells: int = MAX_CELLS) -> MarginalQuery:
    keep = structural_candidates(model, workload, treewidth_cap, max_cells)
    if not keep:
        raise NoCandidates("every workload query breaks chordality or the treewidth cap")
    candidates = [workload.queries[i] for i in keep]
    w = workload.weight_vector()[keep]
    scores = candidate_scores(table, model, candidates, sigma_t, w)
    pick = exponential_mechanism(scores, float(w.max()), rho_select, rng=rng, ledger=ledger,
                                 label="select")
    return candidates[pick]


def measure_and_update(table: DiscreteTable, model: ModelState, query: MarginalQuery,
                       sigma_t: float, ledger: BudgetLedger,
                       rng: np.random.Generator | None = None) -> ModelState:
    """Gaussian-measure ``query`` and refit the model to every measurement so far."""
    rho = 1.0 / (2.0 * sigma_t ** 2)
    names = "/".join(table.schema.names[a] for a in query.attrs)
    try:
        y = gaussian_mechanism(compute_marginal(table, query).counts, 1.0, rho,
                               rng=rng, ledger=ledger, label=f"measure:{names}")
    except BudgetExhausted:
        model.exhausted = True
        return model
    measurements = model.measurements + [Measurement(query, y, sigma_t)]
    return build_model(table.domain, measurements, warm_start=model)


def sample_records(model: ModelState, n: int, rng: np.random.Generator) -> np.ndarray:
    return model.sample(n, rng)


def synthesize(table: DiscreteTable, workload: Workload | None, cfg: SynthConfig,
               return_model: bool = False):
    """Run the full select/measure loop and sample ``cfg.n_output`` rows.

    Returns ``(synthetic_table, round_log)``; the log carries the ledger.
    """
    if table.n == 0:
        raise ValueError("cannot synthesise from an empty table")
    if workload is None:
        workload = all_kway_workload(table.schema, min(2, len(table.schema)))
    if len(workload) == 0:
        raise ValueError("workload must be non-empty")
    tiny = [a.name for a in table.schema.attributes if a.domain_size < 2]
    if tiny:
        raise ValueError(f"attributes need at least two codes for synthesis: {tiny}")
    for q in workload.queries:
        q.validate(table.schema)

    d = len(table.schema)
    delta = cfg.resolved_delta(table.n)
    ledger = BudgetLedger(eps_delta_to_rho(cfg.epsilon, delta), seed=cfg.seed)
    log = RoundLog(ledger=ledger, epsilon=cfg.epsilon, delta=delta)
    model = initialize_model(table, cfg, ledger, log=log)

    rounds_max = cfg.rounds_max or 4 * d
    rho_round = ledger.remaining / rounds_max
    for t in range(1, rounds_max + 1):
        remaining = ledger.remaining
        if remaining <= 0:
            break
        rho_round = max(rho_round, remaining / (rounds_max - t + 1))
        final = t == rounds_max or remaining - rho_round < rho_round
        if final:
            rho_round = remaining
        rho_select = cfg.select_fraction * rho_round
        sigma = _sigma_for(rho_round - rho_select)
        # keep both charges inside what is left after rounding
        while not ledger.can_afford(rho_select, 1.0 / (2.0 * sigma ** 2)):
            sigma = math.nextafter(sigma, math.inf)
        try:
            q = select_candidate(table, model, workload, sigma, rho_select, ledger,
                                 treewidth_cap=cfg.treewidth_cap, max_cells=cfg.max_clique_cells)
        except NoCandidates:
            logger.info("round %d: no admissible candidates, stopping", t)
            break
        except BudgetExhausted:
            break
        before = model.marginal(q)
        model = measure_and_update(table, model, q, sigma, ledger)
        if model.exhausted:
            log.records.append(RoundRecord(t, [table.schema.names[a] for a in q.attrs],
                                           sigma, rho_select, None))
            break
        improvement = float(np.abs(model.marginal(q) - before).sum())
        log.records.append(RoundRecord(t, [table.schema.names[a] for a in q.attrs],
                                       sigma, rho_select + 1.0 / (2.0 * sigma ** 2), improvement))
        if final:
            break
        if improvement < NOISE_PENALTY * sigma * q.cells(table.domain):
            rho_round *= cfg.anneal_factor ** 2

    n_out = cfg.n_output or table.n
    rng = np.random.default_rng([int(cfg.seed) & 0xFFFFFFFF, SAMPLE_STREAM])
    rows = sample_records(model, n_out, rng)
    synth = DiscreteTable(table.schema, rows)
    if return_model:
        return synth, log, model
    return synth, log


def aim_generator(cfg: SynthConfig, workload: Workload | None = None
                  ) -> Callable[[DiscreteTable, int, int], DiscreteTable]:
    """Adapter ``(train, n_out, seed) -> synthetic table`` used by the attack harness."""
    def generate(train: DiscreteTable, n_out: int, seed: int) -> DiscreteTable:
        run_cfg = SynthConfig(**{**asdict(cfg), "n_output": n_out, "seed": seed})
        return synthesize(train, workload, run_cfg)[0]
    return generate
