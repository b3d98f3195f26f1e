"""Synthetic tasks, their analytic oracles, and classic baselines.

Two regression problems on planar particle populations:

* minimal enclosing circle: populations drawn from a random 3-component
  Gaussian mixture, labeled by the exact smallest enclosing circle;
* mixture weights: populations from a 2-component isotropic Gaussian
  mixture whose antipodal unit-circle means overlap substantially, labeled
  by the smaller mixture weight.

Baselines: expectation maximization for the mixture weight, and Gaussian
kernel density scores for comparing estimator sampling distributions.
Populations serialize to a newline-delimited record format (one population
per line: id, n, flattened particles, target fields).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .aggregations import EmptyPopulationError
from .autodiff import Node, Rng


class TooLargeError(ValueError):
    """Brute-force oracle refused an input beyond its size cap."""


class DomainError(ValueError):
    """Argument outside the open interval the density is defined on."""


class DegenerateFitError(RuntimeError):
    """Every EM restart collapsed (zero variance)."""


class DegenerateKdeError(ValueError):
    """Kernel density estimate over samples with no spread."""


# ---------------------------------------------------------------------------
# minimal enclosing circle
# ---------------------------------------------------------------------------

#: multiplicative slack for containment checks; well under the 1e-9
#: agreement tolerance of the oracles.
_CONTAIN_EPS = 1e-12


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"negative radius {self.radius}")

    def contains(self, point, slack: float = 0.0) -> bool:
        dx = point[0] - self.center[0]
        dy = point[1] - self.center[1]
        r = self.radius * (1.0 + _CONTAIN_EPS) + slack
        return dx * dx + dy * dy <= r * r

    def boundary_distance(self, point) -> float:
        return abs(math.hypot(point[0] - self.center[0], point[1] - self.center[1])
                   - self.radius)


# The hot path below works on plain (cx, cy, r) float triples; Circle
# objects only appear at the public boundary.

def _inside(c, px, py) -> bool:
    dx = px - c[0]
    dy = py - c[1]
    r = c[2] * (1.0 + _CONTAIN_EPS)
    return dx * dx + dy * dy <= r * r


def _circle_two(p, q):
    cx = (p[0] + q[0]) / 2.0
    cy = (p[1] + q[1]) / 2.0
    r = max(math.hypot(cx - p[0], cy - p[1]), math.hypot(cx - q[0], cy - q[1]))
    return (cx, cy, r)


def _circumcircle(a, b, c):
    # relative to the bounding-box midpoint for conditioning
    ox = (min(a[0], b[0], c[0]) + max(a[0], b[0], c[0])) / 2.0
    oy = (min(a[1], b[1], c[1]) + max(a[1], b[1], c[1])) / 2.0
    ax, ay = a[0] - ox, a[1] - oy
    bx, by = b[0] - ox, b[1] - oy
    cx, cy = c[0] - ox, c[1] - oy
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if d == 0.0:
        return None
    x = ox + ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay)
              + (cx * cx + cy * cy) * (ay - by)) / d
    y = oy + ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx)
              + (cx * cx + cy * cy) * (bx - ax)) / d
    r = max(math.hypot(x - a[0], y - a[1]),
            math.hypot(x - b[0], y - b[1]),
            math.hypot(x - c[0], y - c[1]))
    return (x, y, r)


def _cross(ox, oy, ax, ay, bx, by) -> float:
    return (ax - ox) * (by - oy) - (ay - oy) * (bx - ox)


def _circle_with_two(points, p, q):
    circ = _circle_two(p, q)
    left = right = None
    left_side = right_side = 0.0
    px, py = p
    qx, qy = q
    for r in points:
        if _inside(circ, r[0], r[1]):
            continue
        cross = _cross(px, py, qx, qy, r[0], r[1])
        c = _circumcircle(p, q, r)
        if c is None:
            continue
        side = _cross(px, py, qx, qy, c[0], c[1])
        if cross > 0.0 and (left is None or side > left_side):
            left, left_side = c, side
        elif cross < 0.0 and (right is None or side < right_side):
            right, right_side = c, side
    if left is None and right is None:
        return circ
    if left is None:
        return right
    if right is None:
        return left
    return left if left[2] <= right[2] else right


def _circle_with_one(points, p):
    c = (p[0], p[1], 0.0)
    for j, q in enumerate(points):
        if not _inside(c, q[0], q[1]):
            c = _circle_two(p, q) if c[2] == 0.0 else _circle_with_two(points[:j + 1], p, q)
    return c


def _canonical_shuffle(pts: np.ndarray) -> np.ndarray:
    """Sort lexicographically, then shuffle with a seed hashed from the
    sorted coordinates. The result depends only on the point multiset, so
    the randomized recursion gives bitwise order-independent output."""
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    canon = pts[order]
    digest = hashlib.blake2b(canon.tobytes(), digest_size=8).digest()
    seed = int.from_bytes(digest, "big")
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    return canon[gen.permutation(len(canon))]


def welzl_min_circle(points) -> Circle:
    """Smallest circle containing all points, by randomized move-to-front
    insertion; determined by at most three boundary points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected [n, 2] points, got shape {pts.shape}")
    if len(pts) == 0:
        raise EmptyPopulationError("minimal circle of an empty population")
    shuffled = [(float(x), float(y)) for x, y in _canonical_shuffle(pts)]
    c = None
    for i, p in enumerate(shuffled):
        if c is None or not _inside(c, p[0], p[1]):
            c = _circle_with_one(shuffled[:i], p)
    return Circle((c[0], c[1]), c[2])


def brute_force_min_circle(points, max_points: int = 12) -> Circle:
    """Exhaustive oracle: tries every pair diameter and triple circumcircle."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected [n, 2] points, got shape {pts.shape}")
    n = len(pts)
    if n == 0:
        raise EmptyPopulationError("minimal circle of an empty population")
    if n > max_points:
        raise TooLargeError(f"{n} points exceed the brute-force cap {max_points}")
    if n == 1:
        return Circle((float(pts[0, 0]), float(pts[0, 1])), 0.0)
    tups = [(float(x), float(y)) for x, y in pts]
    candidates = []
    for i in range(n):
        for j in range(i + 1, n):
            candidates.append(_circle_two(tups[i], tups[j]))
            for l in range(j + 1, n):
                c = _circumcircle(tups[i], tups[j], tups[l])
                if c is not None:
                    candidates.append(c)
    best = None
    for c in candidates:
        if (best is None or c[2] < best[2]) and all(_inside(c, px, py) for px, py in tups):
            best = c
    return Circle((best[0], best[1]), best[2])


# ---------------------------------------------------------------------------
# population generators
# ---------------------------------------------------------------------------

#: shared isotropic std of the two mixture components; with antipodal means
#: at distance 2 this overlaps the clusters enough that no line separates
#: them reliably.
MIXTURE_SIGMA = 0.75

#: circle-task source mixture: component count, mean box, sigma range
CIRCLE_COMPONENTS = 3
CIRCLE_MEAN_BOX = 3.0
CIRCLE_SIGMA_RANGE = (0.2, 1.0)


def sample_circle_task(rng: Rng, n: int = 20):
    """Draw one population from a random planar GMM and label it with its
    exact minimal enclosing circle."""
    if n < 3:
        raise ValueError(f"circle task needs n >= 3, got {n}")
    gen = rng.gen
    means = gen.uniform(-CIRCLE_MEAN_BOX, CIRCLE_MEAN_BOX, (CIRCLE_COMPONENTS, 2))
    sigmas = gen.uniform(*CIRCLE_SIGMA_RANGE, CIRCLE_COMPONENTS)
    comp = gen.integers(0, CIRCLE_COMPONENTS, n)
    points = means[comp] + sigmas[comp, None] * gen.standard_normal((n, 2))
    return points, welzl_min_circle(points)


@dataclass(frozen=True)
class Gmm2:
    """Two isotropic components with antipodal means on the unit circle."""

    weight: float  # first-component weight, in [0.05, 0.95]
    angle: float   # in [0, pi)
    sigma: float = MIXTURE_SIGMA

    def __post_init__(self):
        if not 0.05 <= self.weight <= 0.95:
            raise ValueError(f"weight {self.weight} outside [0.05, 0.95]")
        if self.sigma <= 0:
            raise ValueError(f"sigma {self.sigma} must be positive")

    @property
    def mean_1(self) -> np.ndarray:
        return np.array([math.cos(self.angle), math.sin(self.angle)])

    @property
    def mean_2(self) -> np.ndarray:
        return -self.mean_1

    @property
    def weight_small(self) -> float:
        return min(self.weight, 1.0 - self.weight)


def draw_gmm2(rng: Rng) -> Gmm2:
    gen = rng.gen
    return Gmm2(weight=gen.uniform(0.05, 0.95), angle=gen.uniform(0.0, math.pi))


def sample_gmm2(rng: Rng, gmm: Gmm2, n: int) -> np.ndarray:
    gen = rng.gen
    first = gen.random(n) < gmm.weight
    means = np.where(first[:, None], gmm.mean_1, gmm.mean_2)
    return means + gmm.sigma * gen.standard_normal((n, 2))


def sample_gmm_task(rng: Rng, n: int = 100):
    """Draw one mixture population; the target is the smaller weight."""
    if n < 2:
        raise ValueError(f"mixture task needs n >= 2, got {n}")
    gmm = draw_gmm2(rng)
    return sample_gmm2(rng, gmm, n), gmm.weight_small


# ---------------------------------------------------------------------------
# Beta likelihood head support
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BetaParams:
    """Positive concentrations of a Beta distribution."""

    a: float
    b: float

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError(f"concentrations must be positive, got ({self.a}, {self.b})")

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)


def beta_log_likelihood(ab: Node, w) -> Node:
    """Log density of w under Beta(a, b) with ab = [.., 2], differentiable
    in the concentrations (via log-gamma / digamma)."""
    if ab.shape[-1] != 2:
        raise ad.ShapeMismatchError(f"expected trailing axis 2, got {ab.shape}")
    lead = ab.shape[:-1]
    w = np.asarray(w, dtype=np.float64)
    if w.shape != lead:
        raise ad.ShapeMismatchError(f"weights {w.shape} do not match {ab.shape}")
    if np.any(w <= 0.0) or np.any(w >= 1.0):
        raise DomainError(f"weight outside (0, 1)")
    a = ad.reshape(ad.slice_axis(ab, -1, 0, 1), lead)
    b = ad.reshape(ad.slice_axis(ab, -1, 1, 2), lead)
    one = ad.constant(np.ones(lead))
    terms = ad.add(
        ad.mul(ad.sub(a, one), ad.constant(np.log(w))),
        ad.mul(ad.sub(b, one), ad.constant(np.log1p(-w))),
    )
    log_beta = ad.sub(ad.add(ad.lgamma(a), ad.lgamma(b)), ad.lgamma(ad.add(a, b)))
    return ad.sub(terms, log_beta)


# ---------------------------------------------------------------------------
# expectation maximization baseline
# ---------------------------------------------------------------------------

_EM_TOL = 1e-8
_EM_MAX_ITERS = 500
_EM_RESTARTS = 5
_DEGENERATE_VAR = 1e-12


@dataclass
class EmFit:
    weight_small: float
    log_likelihood: float
    trajectory: list[float]


def _em_run(x: np.ndarray, m1, m2, sigma2: float, w: float):
    n = len(x)
    trajectory = []
    ll = -np.inf
    for _ in range(_EM_MAX_ITERS):
        if not np.isfinite(sigma2) or sigma2 < _DEGENERATE_VAR:
            return None
        d1 = ((x - m1) ** 2).sum(axis=1)
        d2 = ((x - m2) ** 2).sum(axis=1)
        # log joint densities, isotropic bivariate normals
        l1 = math.log(w) - d1 / (2.0 * sigma2) - math.log(2.0 * math.pi * sigma2)
        l2 = math.log(1.0 - w) - d2 / (2.0 * sigma2) - math.log(2.0 * math.pi * sigma2)
        m = np.maximum(l1, l2)
        lse = m + np.log(np.exp(l1 - m) + np.exp(l2 - m))
        new_ll = float(lse.sum())
        trajectory.append(new_ll)
        g1 = np.exp(l1 - lse)
        g2 = 1.0 - g1
        s1, s2 = g1.sum(), g2.sum()
        if s1 <= 0.0 or s2 <= 0.0:
            return None
        m1 = (g1[:, None] * x).sum(axis=0) / s1
        m2 = (g2[:, None] * x).sum(axis=0) / s2
        sigma2 = float((g1 * ((x - m1) ** 2).sum(axis=1)
                        + g2 * ((x - m2) ** 2).sum(axis=1)).sum() / (2.0 * n))
        w = min(max(float(s1 / n), 1e-9), 1.0 - 1e-9)
        if new_ll - ll < _EM_TOL:
            ll = new_ll
            break
        ll = new_ll
    if sigma2 < _DEGENERATE_VAR or not np.isfinite(ll):
        return None
    return EmFit(weight_small=min(w, 1.0 - w), log_likelihood=ll, trajectory=trajectory)


def em_fit(population, rng: Rng, restarts: int = _EM_RESTARTS) -> EmFit:
    """Fit a two-component isotropic mixture (free means, shared sigma,
    free weight) by EM with random restarts; keeps the best likelihood."""
    x = np.asarray(population, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError(f"expected [n, 2] population, got {x.shape}")
    n = len(x)
    if n < 4:
        raise ValueError(f"EM needs n >= 4, got {n}")
    base_var = float(x.var(axis=0).mean())
    best = None
    for r in range(restarts):
        gen = rng.child(f"restart{r}").gen
        i, j = gen.choice(n, size=2, replace=False)
        if not np.any(x[i] != x[j]):
            continue
        fit = _em_run(x, x[i].copy(), x[j].copy(), max(base_var, _DEGENERATE_VAR), 0.5)
        if fit is not None and (best is None or fit.log_likelihood > best.log_likelihood):
            best = fit
    if best is None:
        raise DegenerateFitError("all EM restarts collapsed to zero variance")
    return best


def em_fit_weights(population, rng: Rng) -> float:
    """Smaller mixture weight estimated by EM (the classic baseline)."""
    return em_fit(population, rng).weight_small


# ---------------------------------------------------------------------------
# kernel density scores
# ---------------------------------------------------------------------------

def kde_log_score(samples, query: float) -> float:
    """Log density of `query` under a Gaussian KDE of the samples, with
    Silverman bandwidth 1.06 * std * m^(-1/5)."""
    s = np.asarray(samples, dtype=np.float64).reshape(-1)
    m = len(s)
    if m < 2:
        raise DegenerateKdeError(f"need at least 2 samples, got {m}")
    if np.all(s == s[0]):
        raise DegenerateKdeError("samples have zero spread")
    spread = float(s.std(ddof=1))
    bw = 1.06 * spread * m ** (-0.2)
    z = (float(query) - s) / bw
    e = -0.5 * z * z
    top = e.max()
    return float(top + math.log(np.exp(e - top).sum())
                 - math.log(m) - math.log(bw) - 0.5 * math.log(2.0 * math.pi))


# ---------------------------------------------------------------------------
# dataset records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PopulationRecord:
    """One stored population: id, size, flattened particles, target map."""

    pop_id: int
    n: int
    particles: tuple[float, ...]  # row-major [n x d]
    target: dict

    def particle_array(self) -> np.ndarray:
        d = len(self.particles) // self.n
        return np.asarray(self.particles, dtype=np.float64).reshape(self.n, d)


def circle_target(circle: Circle) -> dict:
    return {"center_x": circle.center[0], "center_y": circle.center[1],
            "radius": circle.radius}


def generate_dataset(task: str, rng: Rng, count: int, n: int) -> list[PopulationRecord]:
    records = []
    for i in range(count):
        child = rng.child(f"pop{i}")
        if task == "circle":
            points, circ = sample_circle_task(child, n)
            target = circle_target(circ)
        elif task == "mixture":
            points, weight_small = sample_gmm_task(child, n)
            target = {"weight_small": weight_small}
        else:
            raise ValueError(f"unknown task {task!r}")
        records.append(PopulationRecord(
            pop_id=i, n=n,
            particles=tuple(float(v) for v in points.reshape(-1)),
            target=target,
        ))
    return records


def write_dataset(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({
                "id": rec.pop_id,
                "n": rec.n,
                "particles": list(rec.particles),
                "target": rec.target,
            }))
            fh.write("\n")


def read_dataset(path) -> list[PopulationRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            records.append(PopulationRecord(
                pop_id=row["id"], n=row["n"],
                particles=tuple(row["particles"]), target=row["target"],
            ))
    return records
