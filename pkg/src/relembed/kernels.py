"""Per-attribute similarity kernels and the expected kernel similarity of two
walk-endpoint attribute distributions.

The expectation is kept under the name ``expected_kernel_distance`` for
continuity with the literature, but larger values mean *more* similar.
"""

from __future__ import annotations

import math
from typing import Dict, Optional

from .errors import NonNumeric, NonpositiveVariance, NullOperand, RelationMismatch
from .relational import Database, Fact
from .walks import SchemeAttributePair, attribute_distribution, destination_distribution, sample_walk

VARIANCE_FLOOR = 1e-9


def equality_kernel(a, b) -> float:
    if a is None or b is None:
        raise NullOperand("kernel evaluated on null")
    return 1.0 if a == b else 0.0


def gaussian_kernel(a, b, variance: float) -> float:
    """``exp(-(a - b)**2 / (2 * variance))``; underflows quietly to 0."""
    if a is None or b is None:
        raise NullOperand("kernel evaluated on null")
    if not variance > 0:
        raise NonpositiveVariance(f"variance must be positive, got {variance}")
    if isinstance(a, (str, bytes)) or isinstance(b, (str, bytes)):
        raise NonNumeric(f"gaussian kernel needs numbers, got {a!r}, {b!r}")
    try:
        diff = float(a) - float(b)
    except (TypeError, ValueError):
        raise NonNumeric(f"gaussian kernel needs numbers, got {a!r}, {b!r}") from None
    return math.exp(-(diff * diff) / (2.0 * variance))


class EqualityKernel:
    name = "equality"

    def __call__(self, a, b) -> float:
        return equality_kernel(a, b)

    def __eq__(self, other):
        return isinstance(other, EqualityKernel)

    def __repr__(self):
        return "EqualityKernel()"


class GaussianKernel:
    name = "gaussian"

    def __init__(self, variance: float):
        if not variance > 0:
            raise NonpositiveVariance(f"variance must be positive, got {variance}")
        self.variance = float(variance)

    def __call__(self, a, b) -> float:
        return gaussian_kernel(a, b, self.variance)

    def __eq__(self, other):
        return isinstance(other, GaussianKernel) and other.variance == self.variance

    def __repr__(self):
        return f"GaussianKernel(variance={self.variance!r})"


def empirical_variance(values) -> float:
    vals = sorted(float(v) for v in values)
    if len(vals) < 2:
        return 1.0
    mean = math.fsum(vals) / len(vals)
    var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
    return max(var, VARIANCE_FLOOR)


class KernelRegistry:
    """Resolves ``(relation, attribute)`` to a kernel.

    Defaults follow the domain kind: Gaussian for numeric attributes, with the
    variance of the active domain unless the schema pins one, equality for
    everything else.
    """

    def __init__(self, kernels: Dict[tuple, object]):
        self.kernels = dict(kernels)

    @classmethod
    def from_database(cls, db: Database, variances: Optional[Dict[tuple, float]] = None) -> "KernelRegistry":
        variances = variances or {}
        kernels = {}
        for rel in db.schema:
            for attr in rel.attributes:
                key = (rel.name, attr.name)
                kind = attr.kernel_name or ("gaussian" if attr.domain_kind == "numeric" else "equality")
                if kind == "equality":
                    kernels[key] = EqualityKernel()
                elif kind == "gaussian":
                    if attr.domain_kind != "numeric":
                        raise NonNumeric(f"{rel.name}.{attr.name}: gaussian kernel on non-numeric attribute")
                    if key in variances:
                        var = variances[key]
                    elif attr.variance is not None:
                        var = attr.variance
                    else:
                        var = empirical_variance(db.active_domain(rel.name, attr.name))
                    kernels[key] = GaussianKernel(var)
                else:
                    raise ValueError(f"{rel.name}.{attr.name}: unknown kernel {kind!r}")
        return cls(kernels)

    def __getitem__(self, key: tuple):
        return self.kernels[key]

    def variances(self) -> Dict[tuple, float]:
        return {k: v.variance for k, v in self.kernels.items() if isinstance(v, GaussianKernel)}


def kd_from_distributions(p: dict, q: dict, kernel) -> float:
    """Double sum of ``p(x) q(y) k(x, y)`` over two value distributions."""
    if isinstance(kernel, EqualityKernel):
        small, big = (p, q) if len(p) <= len(q) else (q, p)
        return math.fsum(pv * big[v] for v, pv in small.items() if v in big)
    return math.fsum(px * qy * kernel(x, y) for x, px in p.items() for y, qy in q.items())


def expected_kernel_distance(db: Database, f: Fact, f2: Fact, pair: SchemeAttributePair,
                             registry: KernelRegistry, mode: str = "exact",
                             n: int = 10_000, rng=None) -> Optional[float]:
    """Expected kernel value between the pair's attribute at the endpoints of
    independent walks from ``f`` and ``f2``; ``None`` if either side has no
    non-null endpoint.

    ``mode="monte_carlo"`` averages the kernel over ``n`` sampled walk pairs,
    skipping pairs where either endpoint is missing or null.
    """
    scheme = pair.scheme
    if f.relation != scheme.start_relation or f2.relation != scheme.start_relation:
        raise RelationMismatch("both facts must belong to the scheme's start relation")
    end = scheme.end_relation(db.schema)
    kernel = registry[(end, pair.attribute)]
    if mode == "exact":
        p = attribute_distribution(destination_distribution(db, f, scheme), db, pair.attribute)
        if p is None:
            return None
        q = attribute_distribution(destination_distribution(db, f2, scheme), db, pair.attribute)
        if q is None:
            return None
        return kd_from_distributions(p, q, kernel)
    if mode != "monte_carlo":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("monte_carlo mode needs a seeded generator")
    pos = db.schema[end].index(pair.attribute)
    total, hits = 0.0, 0
    for _ in range(n):
        g = sample_walk(db, f, scheme, rng)
        g2 = sample_walk(db, f2, scheme, rng)
        if g is None or g2 is None:
            continue
        a, b = g.values[pos], g2.values[pos]
        if a is None or b is None:
            continue
        total += kernel(a, b)
        hits += 1
    return total / hits if hits else None
