"""Weight arithmetic for weighted-tree chain selection.

A subtree's weight is the polynomial  sum_i a_i * c**i  where a_i counts the
blocks at relative depth i.  The weight coefficient c is one of:

  * ``rational``  -- an exact rational >= 1 (weights compare via Fraction),
  * ``ghost``     -- c = 1, i.e. plain block counting (GHOST),
  * ``root``      -- c = P**(1/n) for a prime P, chosen so that trees of
                     depth <= n have equal weight only when their coefficient
                     vectors are identical (X**n - P is irreducible),
  * ``bitcoin``   -- the c -> infinity limit; it has no numeric weight and is
                     handled structurally (longest chain) by the selectors.

For ``root`` coefficients all arithmetic is done on integer fixed-point
enclosures: c is bracketed between lo/2**bits and (lo+1)/2**bits via an exact
integer n-th root, powers are formed by binary powering with directed
rounding, and comparisons escalate ``bits`` until the sign of the difference
is certain.  Escalation terminates because a nonzero difference polynomial of
degree <= n cannot vanish at c.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Optional

import gmpy2

__all__ = [
    "Ordering",
    "WeightCoefficient",
    "LimitWeightError",
    "ExactnessError",
    "trim_poly",
    "poly_total",
    "poly_degree",
    "check_weight_poly",
    "evaluate_weight",
    "compare_weight",
    "poly_meets_threshold",
    "coefficient_float",
]

_MAX_BITS = 1 << 22  # hard stop for precision escalation (bug guard)


class Ordering(Enum):
    LESS = -1
    EQUAL = 0
    GREATER = 1


class LimitWeightError(TypeError):
    """Raised when a numeric weight is requested in longest-chain limit mode."""


class ExactnessError(ValueError):
    """Raised when equality of weights cannot be certified for this coefficient."""


# ----- coefficient ----------------------------------------------------------


def _is_prime(m: int) -> bool:
    # deterministic Miller-Rabin, valid far beyond 64-bit inputs
    if m < 2:
        return False
    for sp in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if m % sp == 0:
            return m == sp
    d, s = m - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        x = pow(a, d, m)
        if x in (1, m - 1):
            continue
        for _ in range(s - 1):
            x = x * x % m
            if x == m - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class WeightCoefficient:
    """Weight coefficient c.  Construct via the classmethods below."""

    kind: str  # "root" | "rational" | "ghost" | "bitcoin"
    prime: Optional[int] = None
    index: Optional[int] = None
    value: Optional[Fraction] = None
    precision_hint: int = 64

    @classmethod
    def algebraic_root(cls, prime: int, index: int, precision_hint: int = 64) -> "WeightCoefficient":
        if index < 1:
            raise ValueError(f"root index must be >= 1, got {index}")
        if not _is_prime(prime):
            raise ValueError(f"{prime} is not prime; irreducibility needs a prime radicand")
        if index == 1:
            return cls.rational(prime)
        return cls(kind="root", prime=prime, index=index, precision_hint=precision_hint)

    @classmethod
    def rational(cls, value) -> "WeightCoefficient":
        v = Fraction(value)
        if v < 1:
            raise ValueError(f"weight coefficient must be >= 1, got {v}")
        return cls(kind="rational", value=v)

    @classmethod
    def ghost(cls) -> "WeightCoefficient":
        return cls(kind="ghost", value=Fraction(1))

    @classmethod
    def bitcoin(cls) -> "WeightCoefficient":
        return cls(kind="bitcoin")

    @classmethod
    def parse(cls, text: str) -> "WeightCoefficient":
        """Parse the textual form used in configs and CSV rows."""
        s = text.strip()
        if s == "ghost":
            return cls.ghost()
        if s == "bitcoin":
            return cls.bitcoin()
        if s.startswith("root:"):
            parts = s.split(":")
            if len(parts) != 3:
                raise ValueError(f"expected root:<prime>:<index>, got {text!r}")
            return cls.algebraic_root(int(parts[1]), int(parts[2]))
        if s.startswith("rational:"):
            return cls.rational(Fraction(s.split(":", 1)[1]))
        raise ValueError(f"cannot parse weight coefficient {text!r}")

    def label(self) -> str:
        if self.kind == "ghost":
            return "ghost"
        if self.kind == "bitcoin":
            return "bitcoin"
        if self.kind == "root":
            return f"root:{self.prime}:{self.index}"
        return f"rational:{self.value}"

    def __str__(self) -> str:
        return self.label()


def coefficient_float(c: WeightCoefficient) -> float:
    """Approximate float value of c (raises in limit mode)."""
    if c.kind == "bitcoin":
        raise LimitWeightError("longest-chain limit has no numeric coefficient")
    if c.kind == "root":
        return math.exp(math.log(c.prime) / c.index)
    return float(c.value)


# ----- weight polynomials ---------------------------------------------------
# A weight polynomial is a plain list of ints: coefficient i counts blocks at
# relative depth i.  The vector [1] is a lone block.


def trim_poly(poly: list[int]) -> list[int]:
    end = len(poly)
    while end > 1 and poly[end - 1] == 0:
        end -= 1
    return list(poly[:end])


def poly_total(poly: list[int]) -> int:
    return sum(poly)


def poly_degree(poly: list[int]) -> int:
    end = len(poly)
    while end > 1 and poly[end - 1] == 0:
        end -= 1
    return end - 1


def check_weight_poly(poly: list[int]) -> None:
    if not poly:
        raise ValueError("weight polynomial must be non-empty")
    if any(a < 0 for a in poly):
        raise ValueError("weight polynomial coefficients must be non-negative")
    if len(poly) > 1 and poly[-1] == 0:
        raise ValueError("weight polynomial must not carry trailing zeros")


# ----- fixed-point power tables ---------------------------------------------


class _RootPowers:
    """Enclosures of c**i at scale 2**bits for c = prime**(1/index).

    lo/hi are integers with lo/2**bits <= c**i <= hi/2**bits.  Powers are
    assembled from a squaring ladder with floor/ceil rounding at every step,
    so the brackets are rigorous.
    """

    def __init__(self, prime: int, index: int, bits: int):
        self.bits = bits
        self.index = index
        base_lo = int(gmpy2.iroot(gmpy2.mpz(prime) << (index * bits), index)[0])
        self._ladder = [(base_lo, base_lo + 1)]  # c**(2**k)
        self._cache: dict[int, tuple[int, int]] = {0: (1 << bits, 1 << bits)}

    def _mul(self, a: tuple[int, int], b: tuple[int, int]) -> tuple[int, int]:
        bits = self.bits
        lo = (a[0] * b[0]) >> bits
        hi = -((-a[1] * b[1]) >> bits)
        return lo, hi

    def power(self, i: int) -> tuple[int, int]:
        got = self._cache.get(i)
        if got is not None:
            return got
        k, rem = 0, i
        acc = self._cache[0]
        while rem:
            if k >= len(self._ladder):
                prev = self._ladder[-1]
                self._ladder.append(self._mul(prev, prev))
            if rem & 1:
                acc = self._mul(acc, self._ladder[k])
            rem >>= 1
            k += 1
        self._cache[i] = acc
        return acc


_POWER_TABLES: dict[tuple[int, int, int], _RootPowers] = {}


def _powers(c: WeightCoefficient, bits: int) -> _RootPowers:
    key = (c.prime, c.index, bits)
    table = _POWER_TABLES.get(key)
    if table is None:
        table = _RootPowers(c.prime, c.index, bits)
        _POWER_TABLES[key] = table
    return table


# ----- evaluation and comparison --------------------------------------------


def _eval_fraction(poly: list[int], v: Fraction) -> Fraction:
    acc = Fraction(0)
    for a in reversed(poly):
        acc = acc * v + a
    return acc


def evaluate_weight(poly: list[int], c: WeightCoefficient, bits: Optional[int] = None) -> tuple[Fraction, Fraction]:
    """Rigorous enclosure [lo, hi] of the weight polynomial evaluated at c.

    Rational coefficients evaluate exactly (lo == hi).  For root coefficients
    the enclosure width shrinks as ``bits`` grows.
    """
    check_weight_poly(poly)
    if c.kind == "bitcoin":
        raise LimitWeightError("longest-chain limit has no numeric weight")
    if c.kind in ("rational", "ghost"):
        v = _eval_fraction(poly, c.value)
        return v, v
    if bits is None:
        bits = c.precision_hint
    table = _powers(c, bits)
    lo_sum = 0
    hi_sum = 0
    for i, a in enumerate(poly):
        if a:
            plo, phi = table.power(i)
            lo_sum += a * plo
            hi_sum += a * phi
    scale = 1 << bits
    return Fraction(lo_sum, scale), Fraction(hi_sum, scale)


def _reduce_mod_root(diff: list[int], prime: int, index: int) -> list[int]:
    # fold c**i = prime**(i//index) * c**(i % index) into residue coefficients
    out = [0] * index
    for i, d in enumerate(diff):
        if d:
            out[i % index] += d * prime ** (i // index)
    return out


def _interval_sign(coeffs: list[int], table: _RootPowers) -> int:
    """Sign of sum coeffs[i] * c**i if certain at this precision, else 0."""
    lo_sum = 0
    hi_sum = 0
    for i, d in enumerate(coeffs):
        if d > 0:
            plo, phi = table.power(i)
            lo_sum += d * plo
            hi_sum += d * phi
        elif d < 0:
            plo, phi = table.power(i)
            lo_sum += d * phi
            hi_sum += d * plo
    if lo_sum > 0:
        return 1
    if hi_sum < 0:
        return -1
    return 0


def compare_weight(
    p1: list[int],
    p2: list[int],
    c: WeightCoefficient,
    numeric_only: bool = False,
) -> Ordering:
    """Three-way comparison of two weight polynomials at c.

    Returns EQUAL only on certified equality.  For root coefficients the
    difference polynomial must have degree <= index, otherwise distinct trees
    may weigh the same and an ExactnessError is raised; pass ``numeric_only``
    to compare the numeric values anyway.
    """
    check_weight_poly(p1)
    check_weight_poly(p2)
    if c.kind == "bitcoin":
        raise LimitWeightError("longest-chain limit weights are not comparable numerically")
    a, b = trim_poly(p1), trim_poly(p2)
    if a == b:
        return Ordering.EQUAL
    if c.kind in ("rational", "ghost"):
        d = _eval_fraction(a, c.value) - _eval_fraction(b, c.value)
        if d == 0:
            return Ordering.EQUAL
        return Ordering.GREATER if d > 0 else Ordering.LESS

    width = max(len(a), len(b))
    diff = [0] * width
    for i, v in enumerate(a):
        diff[i] = v
    for i, v in enumerate(b):
        diff[i] -= v
    diff = diff[: max(i for i, v in enumerate(diff) if v) + 1]

    if len(diff) - 1 > c.index and not numeric_only:
        raise ExactnessError(
            f"difference degree {len(diff) - 1} exceeds root index {c.index}; "
            "equal weights would not imply equal trees"
        )
    reduced = _reduce_mod_root(diff, c.prime, c.index)
    if not any(reduced):
        return Ordering.EQUAL
    bits = c.precision_hint
    while bits <= _MAX_BITS:
        sign = _interval_sign(reduced, _powers(c, bits))
        if sign > 0:
            return Ordering.GREATER
        if sign < 0:
            return Ordering.LESS
        bits *= 2
    raise RuntimeError("precision escalation failed to separate weights")  # pragma: no cover


def poly_meets_threshold(poly: list[int], c: WeightCoefficient, threshold, bits: Optional[int] = None) -> bool:
    """True when the weight is >= threshold (threshold given as real number).

    Root coefficients escalate precision a few times; if the threshold still
    falls inside the enclosure the midpoint decides, which is deterministic
    and only matters when the weight sits within ~2**-512 of the threshold.
    """
    if c.kind == "bitcoin":
        raise LimitWeightError("longest-chain limit has no numeric weight")
    thr = Fraction(threshold)
    if c.kind in ("rational", "ghost"):
        lo, _ = evaluate_weight(poly, c)
        return lo >= thr
    bits = bits or c.precision_hint
    while True:
        lo, hi = evaluate_weight(poly, c, bits)
        if lo >= thr:
            return True
        if hi < thr:
            return False
        if bits >= 512:
            return (lo + hi) / 2 >= thr
        bits *= 2
