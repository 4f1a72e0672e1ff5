"""Dense kernels, sketch-based low-rank factorization, an exact SVD oracle and k-means."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError, ShapeError, SizeError

EXACT_SVD_MAX_DIM = 512


def as_dense(a, name: str = "matrix") -> np.ndarray:
    """Validate a 2-D finite array and return it as a float64 copy."""
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal draws via the Box-Muller transform on ``rng`` uniforms."""
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    n = int(np.prod(shape))
    half = (n + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1], keeps log finite
    u2 = rng.random(half)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
    return z.reshape(shape)


def matmul(a, b) -> np.ndarray:
    """Matrix product accumulated in float64 and rounded to float32."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ShapeError(f"cannot multiply shapes {x.shape} and {y.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DataError("matmul operands contain non-finite entries")
    return (x @ y).astype(np.float32)


@dataclass(frozen=True)
class LowRankFactor:
    left: np.ndarray  # n x r
    singulars: np.ndarray  # r
    right: np.ndarray  # r x m

    @property
    def rank(self) -> int:
        return int(self.singulars.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singulars) @ self.right

    def check(self, tol: float = 1e-4) -> None:
        """Raise if the factor violates its structural invariants."""
        n, r = self.left.shape
        r2, m = self.right.shape
        if r != r2 or r != self.singulars.shape[0] or r > min(n, m):
            raise ShapeError(f"inconsistent factor shapes {self.left.shape}, {self.right.shape}")
        s = self.singulars
        if np.any(s < 0) or np.any(np.diff(s) > 0):
            raise DataError("singular values must be nonnegative and nonincreasing")
        for norms in (np.linalg.norm(self.left, axis=0), np.linalg.norm(self.right, axis=1)):
            if np.any(np.abs(norms - 1.0) > tol):
                raise DataError("factor vectors must have unit norm")


def _unit(n: int, j: int) -> np.ndarray:
    e = np.zeros(n)
    e[j % n] = 1.0
    return e


def _flip_to_largest_positive(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if u[np.argmax(np.abs(u))] < 0:
        return -u, -v
    return u, v


def sketch_lowrank(w, rank: int, power_iters: int = 4, seed: int = 0) -> LowRankFactor:
    """Rank-``rank`` factorization built one Gaussian-sketched component at a time.

    Each round draws a sketch vector ``s``, forms ``Q = (R R^T)^power_iters R s`` on the
    current residual ``R`` (normalizing between power steps), sets ``u = Q/|Q|``,
    ``sigma = |Q^T R| / |Q|`` and ``v = Q^T R / |Q^T R|`` and deflates ``R -= sigma u v^T``.
    Components are sorted by singular value at the end and each pair is sign-normalized so
    the largest-magnitude entry of ``u`` is positive.
    """
    resid = as_dense(w, "w")
    n, m = resid.shape
    if not 1 <= rank <= min(n, m):
        raise ParameterError(f"rank must be in [1, {min(n, m)}], got {rank}")
    if power_iters < 0:
        raise ParameterError("power_iters must be >= 0")
    rng = make_rng(seed)
    lefts, sings, rights = [], [], []
    for j in range(rank):
        s = gaussian(rng, m)
        q = resid @ s
        for _ in range(power_iters):
            norm = np.linalg.norm(q)
            if norm == 0.0:
                break
            q = resid @ (resid.T @ (q / norm))
        qn = np.linalg.norm(q)
        sigma = 0.0
        if qn > 0.0:
            u = q / qn
            t = resid.T @ u
            sigma = float(np.linalg.norm(t))
        if sigma > 0.0:
            v = t / sigma
            resid -= sigma * np.outer(u, v)
        else:
            u, v, sigma = _unit(n, j), _unit(m, j), 0.0
        u, v = _flip_to_largest_positive(u, v)
        lefts.append(u)
        sings.append(sigma)
        rights.append(v)
    order = np.argsort(-np.asarray(sings), kind="stable")
    return LowRankFactor(
        left=np.stack(lefts, axis=1)[:, order],
        singulars=np.asarray(sings)[order],
        right=np.stack(rights, axis=0)[order, :],
    )


def _round_robin(k: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: every column pair meets once, rounds hold disjoint pairs."""
    players = list(range(k)) + ([-1] if k % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[a], players[size - 1 - a]) for a in range(size // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_polish(y: np.ndarray, v: np.ndarray, sweeps: int = 40) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Jacobi rotations until the columns of ``y`` are mutually orthogonal."""
    k = y.shape[1]
    if k < 2:
        return y, v
    schedule = _round_robin(k)
    floor = 1e-28 * float((y * y).sum(0).max())  # columns below this are numerically zero
    for _ in range(sweeps):
        rotated = False
        for p, q in schedule:
            if p.size == 0:
                continue
            yp, yq = y[:, p], y[:, q]
            alpha = (yp * yp).sum(0)
            beta = (yq * yq).sum(0)
            gamma = (yp * yq).sum(0)
            act = (np.abs(gamma) > 1e-15 * np.sqrt(alpha * beta)) & (np.maximum(alpha, beta) > floor)
            if not act.any():
                continue
            rotated = True
            p, q, alpha, beta, gamma = p[act], q[act], alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (y, v):
                mp, mq = mat[:, p].copy(), mat[:, q].copy()
                mat[:, p] = c * mp - s * mq
                mat[:, q] = s * mp + c * mq
        if not rotated:
            break
    return y, v


def _complete_basis(basis: np.ndarray, count: int) -> np.ndarray:
    """Orthonormal columns spanning the complement of ``basis`` (n x count)."""
    n = basis.shape[0]
    q, _ = np.linalg.qr(np.hstack([basis, np.eye(n)]))
    return q[:, basis.shape[1] : basis.shape[1] + count]


def exact_svd_truncated(w, rank: int) -> LowRankFactor:
    """Optimal rank-``rank`` truncation for small matrices (min dimension <= 512).

    The smaller Gram matrix is eigendecomposed in float64 and the result is polished with
    one-sided Jacobi rotations so small singular values keep full relative accuracy. The
    first nonzero entry of every left vector is made nonnegative.
    """
    a = as_dense(w, "w")
    n, m = a.shape
    if min(n, m) > EXACT_SVD_MAX_DIM:
        raise SizeError(f"exact SVD oracle is capped at min dimension {EXACT_SVD_MAX_DIM}, got {a.shape}")
    if not 1 <= rank <= min(n, m):
        raise ParameterError(f"rank must be in [1, {min(n, m)}], got {rank}")
    transposed = n < m
    b = a.T if transposed else a  # tall: rows >= cols
    _, vecs = np.linalg.eigh(b.T @ b)
    vecs = vecs[:, ::-1].copy()
    y, v = _jacobi_polish(b @ vecs, vecs)
    sig = np.linalg.norm(y, axis=0)
    order = np.argsort(-sig, kind="stable")
    sig, y, v = sig[order], y[:, order], v[:, order]
    tiny = sig[0] * 1e-13 if sig.size and sig[0] > 0 else 0.0
    live = sig > tiny
    u = np.zeros_like(y)
    u[:, live] = y[:, live] / sig[live]
    if not np.all(live):
        u[:, ~live] = _complete_basis(u[:, live], int((~live).sum()))
        sig = np.where(live, sig, 0.0)
    # v columns are already orthonormal (rotations of an orthogonal matrix)
    left, right = (v, u) if transposed else (u, v)
    left, right, sig = left[:, :rank].copy(), right[:, :rank].T.copy(), sig[:rank].copy()
    for j in range(rank):
        col = left[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())
        if nz.size and col[nz[0]] < 0:
            left[:, j] = -col
            right[j] = -right[j]
    return LowRankFactor(left=left, singulars=sig, right=right)


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: tuple[float, ...] = field(default=())
    iterations: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [min(int(rng.random() * n), n - 1)]
    closest = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = chosen[-1]
        else:
            cum = np.cumsum(closest)
            idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
            idx = min(idx, n - 1)
            while closest[idx] == 0.0 and idx > 0:  # never land on a zero-weight point
                idx -= 1
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(x, x[idx : idx + 1])[:, 0])
    return x[chosen].copy()


def _repair_empty(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray, k: int) -> None:
    """Move the point farthest from its centroid into each empty cluster (in place)."""
    while True:
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return
        dist = ((x - centroids[labels]) ** 2).sum(1)
        dist[counts[labels] <= 1] = -1.0
        donor = int(np.argmax(dist))
        target = int(empty[0])
        labels[donor] = target
        centroids[target] = x[donor]


def _centroid_update(x: np.ndarray, labels: np.ndarray, old: np.ndarray) -> np.ndarray:
    k, d = old.shape
    sums = np.zeros((k, d))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)
    out = old.copy()
    live = counts > 0
    out[live] = sums[live] / counts[live, None]
    return out


def _inertia(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def kmeans(points, k: int, seed: int = 0, max_iters: int = 100) -> ClusterAssignment:
    """Lloyd's algorithm from k-means++ seeds with empty-cluster repair.

    Stops when labels no longer change, the inertia stops decreasing, or after
    ``max_iters`` iterations. The recorded inertia history is nonincreasing.
    """
    x = as_dense(points, "points")
    n = x.shape[0]
    if k < 1 or n < 1:
        raise ParameterError("kmeans needs k >= 1 and at least one point")
    if k > n:
        raise ParameterError(f"k={k} exceeds the number of points n={n}")
    rng = make_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    labels = np.argmin(_sq_dists(x, centroids), axis=1)
    _repair_empty(x, labels, centroids, k)
    centroids = _centroid_update(x, labels, centroids)
    inertia = _inertia(x, labels, centroids)
    history = [inertia]
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        new_labels = np.argmin(_sq_dists(x, centroids), axis=1)
        trial = centroids.copy()
        _repair_empty(x, new_labels, trial, k)
        trial = _centroid_update(x, new_labels, trial)
        trial_inertia = _inertia(x, new_labels, trial)
        if trial_inertia > inertia:
            break
        stable = np.array_equal(new_labels, labels)
        labels, centroids = new_labels, trial
        improved = trial_inertia < inertia
        inertia = trial_inertia
        history.append(inertia)
        if stable or not improved:
            break
    return ClusterAssignment(
        labels=labels.astype(np.int64),
        centroids=centroids,
        inertia=inertia,
        history=tuple(history),
        iterations=iterations,
    )
