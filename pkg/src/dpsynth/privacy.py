"""zCDP accounting and the Gaussian / exponential mechanisms.

Budgets are tracked in rho (zero-concentrated DP) and converted to (epsilon, delta)
only at the boundary. Neighbouring datasets differ by adding or removing one record.

Noise is drawn with numpy's floating-point samplers; this is a research tool and
makes no attempt at side-channel-hardened sampling.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field

import numpy as np


class BudgetExhausted(RuntimeError):
    pass


def _check_delta(delta: float) -> None:
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")


def rho_to_eps(rho: float, delta: float) -> float:
    """epsilon achieved by rho-zCDP at the given delta: rho + 2*sqrt(rho*ln(1/delta))."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    _check_delta(delta)
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


def eps_delta_to_rho(epsilon: float, delta: float) -> float:
    """Largest rho whose (epsilon, delta) conversion does not exceed ``epsilon``."""
    if not epsilon > 0 or not math.isfinite(epsilon):
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    _check_delta(delta)
    log_term = math.log(1.0 / delta)
    # (sqrt(L + eps) - sqrt(L))^2 written without the cancellation
    rho = (epsilon / (math.sqrt(log_term + epsilon) + math.sqrt(log_term))) ** 2
    while rho > 0 and rho_to_eps(rho, delta) > epsilon:
        rho = math.nextafter(rho, 0.0)
    return rho


def default_delta(n: int) -> float:
    """1/n^2, capped below 1 for tiny tables."""
    return 1.0 / max(n, 2) ** 2


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float
    rho: float

    def __post_init__(self):
        _check_delta(self.delta)
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if rho_to_eps(self.rho, self.delta) > self.epsilon:
            raise ValueError("rho is not covered by (epsilon, delta)")

    @classmethod
    def from_eps_delta(cls, epsilon: float, delta: float) -> "PrivacyBudget":
        return cls(epsilon, delta, eps_delta_to_rho(epsilon, delta))


@dataclass(frozen=True)
class NoiseParams:
    sigma: float
    sensitivity: float

    @classmethod
    def for_rho(cls, sensitivity: float, rho: float) -> "NoiseParams":
        if sensitivity <= 0 or rho <= 0:
            raise ValueError("sensitivity and rho must be positive")
        return cls(sensitivity * math.sqrt(1.0 / (2.0 * rho)), sensitivity)

    @property
    def rho(self) -> float:
        return self.sensitivity ** 2 / (2.0 * self.sigma ** 2)


@dataclass
class BudgetLedger:
    """Serialised, all-or-nothing rho accounting.

    Each charge gets an entry index; randomness for that charge is derived from
    ``(seed, index)`` so pipelines are reproducible without sharing one stream.
    """

    total_rho: float
    seed: int = 0
    entries: list[tuple[str, float]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.total_rho < 0:
            raise ValueError("total_rho must be non-negative")

    @property
    def spent(self) -> float:
        return math.fsum(r for _, r in self.entries)

    def _fits(self, rho: float) -> bool:
        return math.fsum([r for _, r in self.entries] + [rho]) <= self.total_rho

    @property
    def remaining(self) -> float:
        """Largest amount that a single charge can still take."""
        with self._lock:
            return self._remaining()

    def _remaining(self) -> float:
        spent = self.spent
        rest = max(self.total_rho - spent, 0.0)
        while rest > 0 and not self._fits(rest):
            rest = math.nextafter(rest, 0.0)
        return rest

    def can_afford(self, *amounts: float) -> bool:
        """Whether charging all ``amounts`` in sequence would stay within budget."""
        with self._lock:
            return math.fsum([r for _, r in self.entries] + list(amounts)) <= self.total_rho

    def charge(self, label: str, rho: float) -> int:
        """Record a spend and return its entry index. Raises BudgetExhausted without side effects."""
        if rho < 0 or not math.isfinite(rho):
            raise ValueError(f"invalid rho {rho}")
        with self._lock:
            if not self._fits(rho):
                raise BudgetExhausted(
                    f"{label}: needs rho={rho:.6g}, only {self._remaining():.6g} left"
                )
            self.entries.append((label, float(rho)))
            return len(self.entries) - 1

    def rng_for(self, index: int) -> np.random.Generator:
        return np.random.default_rng([int(self.seed) & 0xFFFFFFFF, int(index)])

    def dump(self) -> list[dict]:
        out, cum = [], []
        for label, rho in self.entries:
            cum.append(rho)
            out.append({"label": label, "rho": rho, "cumulative": math.fsum(cum)})
        return out

    def to_json(self) -> str:
        return json.dumps({"total_rho": self.total_rho, "entries": self.dump()}, indent=2)


def _charge(ledger: BudgetLedger | None, label: str, rho: float,
            rng: np.random.Generator | None) -> np.random.Generator:
    if ledger is not None:
        index = ledger.charge(label, rho)
        if rng is None:
            rng = ledger.rng_for(index)
    if rng is None:
        raise ValueError("either rng or ledger is required")
    return rng


def gaussian_mechanism(values, sensitivity: float, rho: float,
                       rng: np.random.Generator | None = None,
                       ledger: BudgetLedger | None = None,
                       label: str = "gaussian") -> np.ndarray:
    """Add N(0, sigma^2) noise with sigma = sensitivity * sqrt(1 / (2 rho)).

    With a ledger, rho is charged before any noise is drawn; an unaffordable
    call raises BudgetExhausted and leaves the ledger untouched.
    """
    noise = NoiseParams.for_rho(sensitivity, rho)
    values = np.asarray(values, dtype=np.float64)
    rng = _charge(ledger, label, rho, rng)
    return values + noise.sigma * rng.standard_normal(values.shape)


def exponential_probabilities(scores, sensitivity: float, epsilon: float) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    logits = epsilon * scores / (2.0 * sensitivity)
    logits = logits - logits.max()
    p = np.exp(logits)
    return p / p.sum()


def exponential_mechanism(scores, sensitivity: float, rho: float,
                          rng: np.random.Generator | None = None,
                          ledger: BudgetLedger | None = None,
                          label: str = "exponential") -> int:
    """Select an index with probability proportional to exp(eps * score / (2 * sensitivity)).

    Charged as rho-zCDP with eps = sqrt(8 rho).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("scores must be non-empty")
    if sensitivity <= 0 or rho <= 0:
        raise ValueError("sensitivity and rho must be positive")
    epsilon = math.sqrt(8.0 * rho)
    p = exponential_probabilities(scores, sensitivity, epsilon)
    rng = _charge(ledger, label, rho, rng)
    return int(rng.choice(scores.size, p=p))
