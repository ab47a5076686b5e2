"""Lloyd's K-Means, the active-point approximation, seeding and overlap.

Points and centroids are plain ``(n, d)`` / ``(k, d)`` float64 arrays.
All tie-breaking goes to the lowest index.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .rng import Xoshiro256

DEFAULT_CAP = 100
_CHUNK_ELEMS = 1 << 22


class ClusteringError(Exception):
    pass


class DimensionMismatch(ClusteringError):
    pass


class TooFewCentroids(ClusteringError):
    pass


class NotEnoughDistinctPoints(ClusteringError):
    pass


class LengthMismatch(ClusteringError):
    pass


@dataclass(frozen=True)
class StopRule:
    """One of ``fixed``, ``no_change`` or ``epsilon``.

    ``max_iter`` is the iteration count for ``fixed`` and the hard cap for
    the other two. ``epsilon`` bounds the largest Euclidean centroid move.
    """
    kind: str = "no_change"
    max_iter: int = DEFAULT_CAP
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed", "no_change", "epsilon"):
            raise ValueError(f"unknown stop rule {self.kind!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    @classmethod
    def fixed(cls, n):
        return cls("fixed", n)

    @classmethod
    def no_change(cls, cap=DEFAULT_CAP):
        return cls("no_change", cap)

    @classmethod
    def eps(cls, epsilon, cap=DEFAULT_CAP):
        return cls("epsilon", cap, epsilon)

    def check(self, iteration, shift):
        """Reason string if iteration ``iteration`` (1-based) should be the last."""
        if self.kind == "fixed":
            return "fixed_iterations" if iteration >= self.max_iter else None
        if self.kind == "no_change" and shift == 0.0:
            return "no_change"
        if self.kind == "epsilon" and shift <= self.epsilon:
            return "epsilon"
        if iteration >= self.max_iter:
            return "iteration_cap"
        return None

    def to_dict(self):
        return {"kind": self.kind, "max_iter": self.max_iter, "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], int(d.get("max_iter", DEFAULT_CAP)), float(d.get("epsilon", 0.0)))


@dataclass
class ActiveReport:
    active_ids: np.ndarray
    r_values: np.ndarray
    active_fraction: float


@dataclass
class ClusterRun:
    labels: np.ndarray
    centroids: np.ndarray
    objective_trace: list
    iterations: int
    stop_reason: str
    evaluations: int
    label_trace: list = field(default_factory=list, repr=False)
    active: ActiveReport | None = None

    def summary(self):
        out = {
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "evaluations": self.evaluations,
            "objective_trace": [float(j) for j in self.objective_trace],
        }
        if self.active is not None:
            out["active_fraction"] = self.active.active_fraction
        return out


@dataclass
class TwoPassState:
    """Everything two exact Lloyd iterations produced."""
    labels1: np.ndarray
    labels2: np.ndarray
    centroids1: np.ndarray
    centroids2: np.ndarray
    trace: list
    label_trace: list
    evaluations: int


def as_points(x, name="points"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty (n, d) array")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")
    return x


def _check_dims(pts, cents):
    if pts.shape[1] != cents.shape[1]:
        raise DimensionMismatch(f"points have d={pts.shape[1]}, centroids d={cents.shape[1]}")


def _assign(pts, cents, want_r=False):
    """Nearest-centroid labels, objective, and optionally per-point r-values."""
    n, d = pts.shape
    k = cents.shape[0]
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n)
    r = np.empty(n) if want_r else None
    step = max(1, _CHUNK_ELEMS // (k * d))
    for lo in range(0, n, step):
        diff = pts[lo:lo + step, None, :] - cents[None, :, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
        lab = np.argmin(sq, axis=1)
        labels[lo:lo + step] = lab
        best[lo:lo + step] = sq[np.arange(len(lab)), lab]
        if want_r:
            two = np.sqrt(np.partition(sq, 1, axis=1)[:, :2])
            r[lo:lo + step] = _ratio(two[:, 0], two[:, 1])
    return labels, float(best.sum()), r


def _ratio(d1, d2):
    out = np.ones_like(d1)
    nz = d1 > 0
    out[nz] = 1.0 - d1[nz] / d2[nz]
    return out


def assign_step(pts, cents):
    pts, cents = as_points(pts), as_points(cents, "centroids")
    _check_dims(pts, cents)
    labels, J, _ = _assign(pts, cents)
    return labels, J


def _sums(pts, labels, k):
    sums = np.zeros((k, pts.shape[1]))
    np.add.at(sums, labels, pts)
    return sums, np.bincount(labels, minlength=k)


def _from_sums(sums, counts, cand_pts, cand_labels, prev=None):
    """Means from per-cluster sums, re-seeding empty clusters.

    Empty clusters (ascending index) take the candidate point farthest from
    its own centroid, drawn only from clusters that keep at least one point.
    With no such donor the cluster keeps ``prev`` (or the first candidate).
    """
    sums, counts = sums.copy(), counts.copy()
    cents = np.zeros_like(sums)
    filled = counts > 0
    cents[filled] = sums[filled] / counts[filled, None]
    labels = np.array(cand_labels, copy=True)
    for j in np.flatnonzero(counts == 0):
        donor_ok = counts[labels] >= 2
        if not donor_ok.any():
            cents[j] = prev[j] if prev is not None else cand_pts[0]
            continue
        diff = cand_pts - cents[labels]
        dist = np.einsum("ij,ij->i", diff, diff)
        dist[~donor_ok] = -1.0
        i = int(np.argmax(dist))
        src, x = labels[i], cand_pts[i]
        sums[src] -= x
        counts[src] -= 1
        cents[src] = sums[src] / counts[src]
        labels[i] = j
        sums[j], counts[j], cents[j] = x, 1, x
    return cents


def update_step(pts, labels, k, prev=None):
    pts = as_points(pts)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (pts.shape[0],):
        raise DimensionMismatch("one label per point required")
    if k < 1 or labels.min() < 0 or labels.max() >= k:
        raise ValueError("labels must lie in [0, k)")
    if prev is not None:
        prev = as_points(prev, "prev")
        _check_dims(pts, prev)
    sums, counts = _sums(pts, labels, k)
    return _from_sums(sums, counts, pts, labels, prev)


def _shift(a, b):
    return float(np.sqrt(((a - b) ** 2).sum(axis=1)).max())


def lloyd(pts, seeds, stop: StopRule = StopRule()):
    pts, c = as_points(pts), as_points(seeds, "seeds").copy()
    _check_dims(pts, c)
    n, k = pts.shape[0], c.shape[0]
    trace, ltrace, evals, it = [], [], 0, 0
    while True:
        it += 1
        labels, J, _ = _assign(pts, c)
        evals += n * k
        trace.append(J)
        ltrace.append(labels)
        new = update_step(pts, labels, k, prev=c)
        shift = _shift(new, c)
        c = new
        reason = stop.check(it, shift)
        if reason:
            return ClusterRun(labels, c, trace, it, reason, evals, ltrace)


def r_value(pt, cents):
    cents = as_points(cents, "centroids")
    if cents.shape[0] < 2:
        raise TooFewCentroids("r-value needs at least two centroids")
    pt = np.asarray(pt, dtype=np.float64).reshape(1, -1)
    _check_dims(pt, cents)
    d = np.sort(np.sqrt(((cents - pt) ** 2).sum(axis=1)))
    return float(_ratio(d[:1], d[1:2])[0])


def detect_active(pts, seeds):
    """Two exact iterations; points whose label changes between them are active.

    r-values are taken against the centroids used in the second pass;
    inactive points get exactly 1.
    """
    pts, seeds = as_points(pts), as_points(seeds, "seeds")
    _check_dims(pts, seeds)
    n, k = pts.shape[0], seeds.shape[0]
    if k < 2:
        raise TooFewCentroids("active-point detection needs k >= 2")
    l1, J1, _ = _assign(pts, seeds)
    c1 = update_step(pts, l1, k, prev=seeds)
    l2, J2, r = _assign(pts, c1, want_r=True)
    c2 = update_step(pts, l2, k, prev=c1)
    active = np.flatnonzero(l1 != l2)
    r_values = np.ones(n)
    r_values[active] = r[active]
    report = ActiveReport(active, r_values, len(active) / n)
    state = TwoPassState(l1, l2, c1, c2, [J1, J2], [l1, l2], 2 * n * k)
    return report, state


def approx_lloyd(pts, seeds, stop: StopRule = StopRule()):
    """Lloyd that stops re-assigning inactive points after iteration 2.

    Inactive points keep their iteration-2 label; their sums, counts and
    squared norms are frozen per cluster so centroids stay means over all
    points and the objective stays exact without touching them again.
    """
    pts, seeds = as_points(pts), as_points(seeds, "seeds")
    report, st = detect_active(pts, seeds)
    n, k = pts.shape[0], seeds.shape[0]

    reason = stop.check(1, _shift(st.centroids1, seeds))
    if reason:
        return ClusterRun(st.labels1, st.centroids1, st.trace[:1], 1, reason,
                          n * k, st.label_trace[:1], report)
    reason = stop.check(2, _shift(st.centroids2, st.centroids1))
    if reason:
        return ClusterRun(st.labels2, st.centroids2, st.trace, 2, reason,
                          st.evaluations, st.label_trace, report)

    act = report.active_ids
    frozen = np.ones(n, dtype=bool)
    frozen[act] = False
    f_sums, f_counts = _sums(pts[frozen], st.labels2[frozen], k)
    f_sq = np.zeros(k)
    np.add.at(f_sq, st.labels2[frozen], np.einsum("ij,ij->i", pts[frozen], pts[frozen]))
    apts = pts[act]

    labels = st.labels2.copy()
    c = st.centroids2
    trace, ltrace, evals, it = list(st.trace), list(st.label_trace), st.evaluations, 2
    while True:
        it += 1
        if len(act):
            a_lab, J_act, _ = _assign(apts, c)
        else:
            a_lab, J_act = np.empty(0, dtype=np.int64), 0.0
        evals += len(act) * k
        J_frozen = f_sq - 2.0 * np.einsum("ij,ij->i", c, f_sums) + f_counts * np.einsum("ij,ij->i", c, c)
        trace.append(J_act + float(J_frozen.sum()))
        labels = labels.copy()
        labels[act] = a_lab
        ltrace.append(labels)
        a_sums, a_counts = _sums(apts, a_lab, k)
        new = _from_sums(f_sums + a_sums, f_counts + a_counts, apts, a_lab, prev=c)
        shift = _shift(new, c)
        c = new
        reason = stop.check(it, shift)
        if reason:
            return ClusterRun(labels, c, trace, it, reason, evals, ltrace, report)


def unique_rows(pts):
    """Distinct rows in order of first occurrence."""
    seen, keep = set(), []
    for i, row in enumerate(pts):
        key = row.tobytes()
        if key not in seen:
            seen.add(key)
            keep.append(i)
    return pts[keep]


def seed_random(pts, k, rng_seed=0):
    """Forgy seeding: k distinct points drawn without replacement."""
    pts = as_points(pts)
    uniq = unique_rows(pts)
    if k > len(uniq):
        raise NotEnoughDistinctPoints(f"k={k} but only {len(uniq)} distinct points")
    idx = Xoshiro256(rng_seed).sample_indices(len(uniq), k)
    return uniq[idx].copy()


def cluster_overlap(a, b, k=None):
    """Fraction of items agreeing under the best one-to-one cluster matching."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"{a.shape} vs {b.shape}")
    if len(a) == 0:
        raise LengthMismatch("empty labelings")
    if k is None:
        k = int(max(a.max(), b.max())) + 1
    table = np.zeros((k, k), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum()) / len(a)


def write_seed_file(cents, path):
    cents = as_points(cents, "centroids")
    lines = [f"{cents.shape[0]} {cents.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in cents]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_seed_file(path):
    with open(path) as fh:
        head, *rows = [ln for ln in fh.read().splitlines() if ln.strip()]
    k, d = (int(t) for t in head.split())
    cents = np.array([[float(t) for t in row.split()] for row in rows], dtype=np.float64)
    if cents.shape != (k, d):
        raise ValueError(f"seed file declares {k}x{d}, holds {cents.shape}")
    return cents
