"""Round-based q-bounded mining.

Every round each party gets q Bernoulli(p) queries.  Honest parties stop at
their first success, so they mine at most one block per round; corrupted
parties keep all successes, which go to the adversary controller as raw
events instead of blocks.

Randomness is counter-based: one Philox stream keyed by (seed, 0) yields a
(rounds x n) matrix of uniforms for honest mining, a second stream keyed by
(seed, 1) yields the corrupted success counts.  A party's draw at a given
round is a fixed matrix position, so nothing the adversary schedules can
shift anyone else's randomness, and re-running a seed reproduces every trial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .blocktree import Block

__all__ = ["ProtocolParams", "DerivedRates", "derived_rates", "MiningStream", "MineResult", "mine_round"]


@dataclass
class ProtocolParams:
    """Population and difficulty parameters for one execution."""

    n: int
    t: int
    p: float
    q: int
    epsilon: float = 0.5
    lam: int = 200
    delta: float = 0.5

    def validate(self) -> list[str]:
        """Raise on malformed inputs; return soft warnings."""
        if self.n < 1:
            raise ValueError("need at least one party")
        if not 0 <= self.t < self.n:
            raise ValueError("corrupted parties must satisfy 0 <= t < n")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("query success probability must lie in [0, 1]")
        if self.q < 1:
            raise ValueError("need at least one query per round")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("quality slack epsilon must lie in (0, 1)")
        if self.lam < 1:
            raise ValueError("window scale must be positive")
        warnings = []
        rates = derived_rates(self)
        if self.t > (1 - self.delta) * (self.n - self.t):
            warnings.append(
                f"corruption bound violated: t={self.t} > (1-delta)(n-t)={(1 - self.delta) * (self.n - self.t):.3f}"
            )
        if rates.gamma > 0 and self.lam < 2 / rates.gamma:
            warnings.append(f"window scale {self.lam} below 2/gamma={2 / rates.gamma:.2f}")
        if not 3 * rates.gamma + 3 * self.epsilon < self.delta:
            warnings.append(
                f"rate constraint unmet: 3*gamma+3*epsilon={3 * rates.gamma + 3 * self.epsilon:.3f} >= delta={self.delta}"
            )
        chain_g = (1 - self.epsilon) * rates.gamma_u - (1 + self.epsilon) * rates.beta
        if chain_g <= 0:
            warnings.append(f"chain growth rate non-positive: g={chain_g:.4f}")
        return warnings


@dataclass(frozen=True)
class DerivedRates:
    alpha: float   # expected honest blocks per round
    beta: float    # expected adversarial blocks per round
    gamma: float   # P(some honest party succeeds in a round)
    gamma_u: float # P(exactly one honest party succeeds in a round)
    f: float       # total expected blocks per round


def derived_rates(params: ProtocolParams) -> DerivedRates:
    n, t, p, q = params.n, params.t, params.p, params.q
    h = n - t
    alpha = p * q * h
    beta = t * p * q
    gamma = 1.0 - (1.0 - p) ** (h * q)
    if h * q >= 1:
        gamma_u = q * h * p * (1.0 - p) ** (q * h - 1)
    else:
        gamma_u = 0.0
    return DerivedRates(alpha=alpha, beta=beta, gamma=gamma, gamma_u=gamma_u, f=alpha + beta)


class MiningStream:
    """Pre-drawn per-(round, party) mining randomness for one seeded run."""

    def __init__(self, params: ProtocolParams, seed: int, rounds: int):
        self.params = params
        self.seed = seed
        self.rounds = rounds
        n = params.n
        gen_h = np.random.Generator(np.random.Philox(key=(seed, 0)))
        self._uniform = gen_h.random((rounds + 1, n))
        gen_a = np.random.Generator(np.random.Philox(key=(seed, 1)))
        if params.p > 0:
            self._successes = gen_a.binomial(params.q, params.p, size=(rounds + 1, n))
        else:
            self._successes = np.zeros((rounds + 1, n), dtype=np.int64)
        # first-success inversion constants
        self._hit = 1.0 - (1.0 - params.p) ** params.q if params.p > 0 else 0.0
        self._log1mp = math.log1p(-params.p) if 0.0 < params.p < 1.0 else None

    def honest_attempt(self, round_no: int, party: int) -> Optional[int]:
        """Counter of the party's first successful query this round, if any."""
        u = self._uniform[round_no, party]
        p = self.params.p
        if p <= 0.0 or u >= self._hit:
            return None
        if p >= 1.0:
            return 1
        ctr = int(math.log1p(-u) / self._log1mp) + 1
        return min(max(ctr, 1), self.params.q)

    def corrupted_successes(self, round_no: int, party: int) -> int:
        return int(self._successes[round_no, party])


@dataclass
class MineResult:
    honest: list[Block] = field(default_factory=list)
    corrupted: list[tuple[int, int]] = field(default_factory=list)  # (party, ctr)
    next_id: int = 0


def mine_round(
    params: ProtocolParams,
    round_no: int,
    tips: dict[int, int],
    stream: MiningStream,
    corrupted: frozenset[int] = frozenset(),
    next_id: int = 1,
    payload_for: Optional[Callable[[int], tuple[str, ...]]] = None,
) -> MineResult:
    """Run one round of mining.

    ``tips`` maps each honest party to the parent it mines on.  Honest
    successes become blocks (ids assigned in party order); corrupted
    successes are returned as (party, ctr) events for the adversary to embed.
    """
    result = MineResult(next_id=next_id)
    for party in range(params.n):
        if party in corrupted:
            k = stream.corrupted_successes(round_no, party)
            for j in range(k):
                result.corrupted.append((party, j + 1))
            continue
        ctr = stream.honest_attempt(round_no, party)
        if ctr is None:
            continue
        payload = payload_for(party) if payload_for is not None else ()
        result.honest.append(
            Block(
                id=result.next_id,
                parent=tips[party],
                miner=party,
                round_mined=round_no,
                ctr=ctr,
                payload=payload,
            )
        )
        result.next_id += 1
    return result
