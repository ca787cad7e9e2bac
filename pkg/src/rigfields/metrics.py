"""Skeleton and skin evaluation suite.

Chamfer-style joint/bone distances measure local geometric proximity; they
are deliberately complemented by optimal-transport metrics (entropic
Wasserstein between joint measures and Gromov-Wasserstein between geodesic
structures), which enforce mass-preserving matchings and therefore expose
duplicated branches or inserted joints that Chamfer matching absorbs. Skin
weights are compared after pushing predicted per-vertex distributions through
the joint transport plan. Predictions are pre-aligned with multi-restart
rigid ICP.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from . import bvh as bvhmod
from .core import Mesh, Rig, Skeleton, normalize_rig
from .errors import NumericError, ValidationError

EPSILON_COST_FRACTION = 1e-3  # default entropic blur: fraction of the mean cost
EPSILON_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Transport plans and Sinkhorn
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransportPlan:
    """Nonnegative coupling with prescribed row/column marginals."""

    matrix: np.ndarray  # (n, m)
    row_marginals: np.ndarray  # (n,)
    col_marginals: np.ndarray  # (m,)

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.float64)
        a = np.asarray(self.row_marginals, dtype=np.float64).reshape(-1)
        b = np.asarray(self.col_marginals, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "row_marginals", a)
        object.__setattr__(self, "col_marginals", b)
        if mat.shape != (len(a), len(b)):
            raise ValidationError(f"plan shape {mat.shape} does not match marginals")
        if mat.min() < 0.0:
            raise ValidationError("transport plan has negative entries")
        if self.marginal_violation() > 1e-6:
            raise ValidationError(
                f"transport plan violates its marginals by {self.marginal_violation():.2e}"
            )

    def marginal_violation(self) -> float:
        row = np.abs(self.matrix.sum(axis=1) - self.row_marginals).max()
        col = np.abs(self.matrix.sum(axis=0) - self.col_marginals).max()
        return float(max(row, col))


def _check_marginal(v: np.ndarray, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if len(v) == 0 or v.min() <= 0.0:
        raise ValidationError(f"{name} marginals must be positive")
    if abs(v.sum() - 1.0) > 1e-9:
        raise ValidationError(f"{name} marginals must sum to 1 (got {v.sum():.9f})")
    return v


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _sinkhorn_core(
    cost: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    epsilon: float,
    max_iter: int,
    tol: float,
    f: np.ndarray | None = None,
    g: np.ndarray | None = None,
    anneal: bool = True,
    check_every: int = 10,
):
    """Log-domain alternating scaling; returns (f, g, plan).

    With anneal=True the blur is halved from a tenth of the mean cost down to
    the target epsilon before the main loop, which keeps small epsilons fast
    from a cold start; warm-started calls (f/g given) skip annealing.
    Convergence (worst marginal violation < tol) is checked every
    `check_every` iterations.
    """
    log_a = np.log(a)
    log_b = np.log(b)
    f = np.zeros(len(a)) if f is None else f.copy()
    g = np.zeros(len(b)) if g is None else g.copy()

    if anneal:
        eps_warm = float(np.abs(cost).mean()) / 10.0
        while eps_warm > epsilon * 1.5:
            for _ in range(50):
                f = eps_warm * (log_a - _logsumexp((g[None, :] - cost) / eps_warm, axis=1))
                g = eps_warm * (log_b - _logsumexp((f[:, None] - cost) / eps_warm, axis=0))
            eps_warm /= 2.0

    eps = epsilon
    plan = None
    for it in range(max_iter):
        f = eps * (log_a - _logsumexp((g[None, :] - cost) / eps, axis=1))
        g = eps * (log_b - _logsumexp((f[:, None] - cost) / eps, axis=0))
        if (it + 1) % check_every == 0 or it == max_iter - 1:
            plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
            err = max(
                float(np.abs(plan.sum(axis=1) - a).max()),
                float(np.abs(plan.sum(axis=0) - b).max()),
            )
            if err < tol:
                break
    if plan is None:
        plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
    return f, g, plan


def _round_to_feasible(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project a near-feasible plan onto the transportation polytope.

    Rows and columns are scaled down where they overshoot, and the remaining
    mass deficit is filled with a rank-one correction; the result carries the
    exact marginals while moving each entry by at most the original
    violation.
    """
    r = plan.sum(axis=1)
    plan = plan * np.minimum(1.0, np.divide(a, r, out=np.ones_like(r), where=r > 0))[:, None]
    c = plan.sum(axis=0)
    plan = plan * np.minimum(1.0, np.divide(b, c, out=np.ones_like(c), where=c > 0))[None, :]
    # the scalings can overshoot by an ulp; keep the residuals nonnegative
    res_a = np.maximum(a - plan.sum(axis=1), 0.0)
    res_b = np.maximum(b - plan.sum(axis=0), 0.0)
    total = res_a.sum()
    if total > 0.0:
        plan = plan + np.outer(res_a, res_b) / total
    return plan


def sinkhorn(
    cost: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    epsilon: float,
    max_iter: int = 2000,
    tol: float = 1e-7,
) -> TransportPlan:
    """Entropic optimal transport by alternating log-domain scaling.

    Runs a short epsilon-annealing warm start (halving from a tenth of the
    mean cost down to the target blur) so small epsilons converge quickly,
    then iterates at the requested epsilon until the worst marginal violation
    drops below tol or max_iter is exhausted. Plans that exit at max_iter are
    rounded onto the transportation polytope so the marginal invariants hold
    regardless.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if np.isnan(cost).any() or np.isinf(cost).any():
        raise ValidationError("cost matrix contains NaN or Inf")
    a = _check_marginal(a, "row")
    b = _check_marginal(b, "column")
    if cost.shape != (len(a), len(b)):
        raise ValidationError(f"cost shape {cost.shape} does not match marginals")
    if epsilon <= 0.0:
        raise ValidationError(f"epsilon must be > 0, got {epsilon}")
    _, _, plan = _sinkhorn_core(cost, a, b, epsilon, max_iter, tol)
    if np.isnan(plan).any():
        raise NumericError("sinkhorn produced NaN entries")
    violation = max(
        float(np.abs(plan.sum(axis=1) - a).max()),
        float(np.abs(plan.sum(axis=0) - b).max()),
    )
    if violation > 1e-9:
        plan = _round_to_feasible(plan, a, b)
    return TransportPlan(plan, a, b)


def default_epsilon(cost: np.ndarray) -> float:
    return max(float(np.abs(cost).mean()) * EPSILON_COST_FRACTION, EPSILON_FLOOR)


# ---------------------------------------------------------------------------
# Chamfer skeleton metrics
# ---------------------------------------------------------------------------


def _segments(skeleton: Skeleton) -> tuple[np.ndarray, np.ndarray]:
    """Bone segments (start, end); roots contribute zero-length segments so
    boneless skeletons still define joint-to-bone distances."""
    starts, ends = [], []
    for i, p in enumerate(skeleton.parents):
        if p >= 0:
            starts.append(skeleton.joints[i])
            ends.append(skeleton.joints[p])
        else:
            starts.append(skeleton.joints[i])
            ends.append(skeleton.joints[i])
    return np.array(starts), np.array(ends)


def _point_segment_dists(points: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """(P, S) distances from each point to each segment."""
    d = ends - starts  # (S, 3)
    len2 = (d**2).sum(axis=1)  # (S,)
    rel = points[:, None, :] - starts[None, :, :]  # (P, S, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.einsum("psk,sk->ps", rel, d) / len2[None, :]
    t = np.nan_to_num(t, nan=0.0, posinf=0.0, neginf=0.0)
    t = np.clip(t, 0.0, 1.0)
    proj = starts[None, :, :] + t[:, :, None] * d[None, :, :]
    return np.sqrt(((points[:, None, :] - proj) ** 2).sum(axis=2))


def _directional_mean(dists: np.ndarray) -> float:
    return float(dists.min(axis=1).mean())


def _sample_bones(skeleton: Skeleton, samples_per_bone: int) -> np.ndarray:
    """Uniform samples along every bone; a root contributes its joint point."""
    pts = []
    for i, p in enumerate(skeleton.parents):
        if p >= 0:
            t = np.linspace(0.0, 1.0, samples_per_bone)[:, None]
            pts.append(skeleton.joints[i] * (1 - t) + skeleton.joints[p] * t)
        else:
            pts.append(skeleton.joints[i : i + 1])
    return np.concatenate(pts, axis=0)


def skeleton_topology_match(pred: Skeleton, gt: Skeleton, tol: float) -> tuple[bool, float]:
    """Whether pred and gt are the same skeleton up to joint relabeling.

    Joints are paired by minimum-cost bipartite assignment; the match is
    exact when counts agree, every paired distance is within tol, and parent
    links map onto each other (roots to roots). Returns the flag plus the
    worst matched joint distance.
    """
    if pred.joint_count != gt.joint_count:
        return False, float("inf")
    from scipy.optimize import linear_sum_assignment

    d = cdist(pred.joints, gt.joints)
    rows, cols = linear_sum_assignment(d)
    mapping = dict(zip(rows.tolist(), cols.tolist()))
    worst = float(d[rows, cols].max())
    if worst > tol:
        return False, worst
    for i in range(pred.joint_count):
        pi = int(pred.parents[i])
        gi = int(gt.parents[mapping[i]])
        if (pi == -1) != (gi == -1):
            return False, worst
        if pi >= 0 and mapping[pi] != gi:
            return False, worst
    return True, worst


def chamfer_metrics(pred: Skeleton, gt: Skeleton, samples_per_bone: int = 32) -> tuple[float, float, float]:
    """Symmetric Chamfer joint-to-joint, joint-to-bone, and bone-to-bone
    distances (mean of the two directional mean-nearest distances)."""
    if pred.joint_count == 0 or gt.joint_count == 0:
        raise ValidationError("chamfer metrics require nonempty skeletons")
    if samples_per_bone < 2:
        raise ValidationError(f"samples_per_bone must be >= 2, got {samples_per_bone}")
    d_pg = cdist(pred.joints, gt.joints)
    j2j = 0.5 * (_directional_mean(d_pg) + _directional_mean(d_pg.T))

    ps, pe = _segments(pred)
    gs, ge = _segments(gt)
    j2b = 0.5 * (
        _directional_mean(_point_segment_dists(pred.joints, gs, ge))
        + _directional_mean(_point_segment_dists(gt.joints, ps, pe))
    )

    pred_samples = _sample_bones(pred, samples_per_bone)
    gt_samples = _sample_bones(gt, samples_per_bone)
    d_ss = cdist(pred_samples, gt_samples)
    b2b = 0.5 * (_directional_mean(d_ss) + _directional_mean(d_ss.T))
    return j2j, j2b, b2b


# ---------------------------------------------------------------------------
# Wasserstein and Gromov-Wasserstein
# ---------------------------------------------------------------------------


def wasserstein(
    pred_points: np.ndarray,
    gt_points: np.ndarray,
    epsilon: float | None = None,
    max_iter: int = 2000,
    tol: float = 1e-7,
) -> tuple[float, TransportPlan]:
    """Entropic L2-Wasserstein distance between uniform point measures.

    Cost is squared Euclidean; the returned distance is the square root of
    the transported cost, and the plan is reused for skin alignment.
    """
    p = np.atleast_2d(np.asarray(pred_points, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gt_points, dtype=np.float64))
    if len(p) == 0 or len(g) == 0:
        raise ValidationError("wasserstein requires nonempty point sets")
    # Solve in a canonical orientation so the truncation error of the
    # alternating updates cannot break wasserstein(a, b) == wasserstein(b, a).
    swap = (len(p), p.tobytes()) > (len(g), g.tobytes())
    src, dst = (g, p) if swap else (p, g)
    cost = cdist(src, dst) ** 2
    eps = default_epsilon(cost) if epsilon is None else epsilon
    plan = sinkhorn(cost, np.full(len(src), 1.0 / len(src)), np.full(len(dst), 1.0 / len(dst)), eps, max_iter, tol)
    distance = float(np.sqrt(max(0.0, float((plan.matrix * cost).sum()))))
    if swap:
        plan = TransportPlan(plan.matrix.T, plan.col_marginals, plan.row_marginals)
    return distance, plan


def skeleton_geodesics(skeleton: Skeleton) -> np.ndarray:
    """All-pairs geodesic distances along the skeleton graph.

    Edges are bones weighted by Euclidean length. Pairs in different
    components of the forest get 2x the larger of the two component
    diameters: finite, but dominating any intra-component path.
    """
    if skeleton.joint_count == 0:
        raise ValidationError("geodesics require a nonempty skeleton")
    n = skeleton.joint_count
    bones = skeleton.bones()
    if len(bones) == 0:
        dist = np.zeros((n, n))
        comp = np.arange(n)
    else:
        lengths = np.linalg.norm(skeleton.joints[bones[:, 0]] - skeleton.joints[bones[:, 1]], axis=1)
        adj = sparse.coo_matrix((lengths, (bones[:, 0], bones[:, 1])), shape=(n, n))
        dist = shortest_path(adj, method="D", directed=False)
        _, comp = connected_components(adj, directed=False)
    if n == 1:
        return np.zeros((1, 1))
    finite = np.isfinite(dist)
    diam = np.zeros(comp.max() + 1)
    for c in range(comp.max() + 1):
        mask = comp == c
        block = dist[np.ix_(mask, mask)]
        diam[c] = block[np.isfinite(block)].max() if mask.sum() > 1 else 0.0
    if not finite.all():
        penalty = 2.0 * np.maximum(diam[comp][:, None], diam[comp][None, :])
        dist = np.where(finite, dist, penalty)
    return dist


def _gw_linearized_cost(dp2_p: np.ndarray, dg2_q: np.ndarray, dp: np.ndarray, dg: np.ndarray, plan: np.ndarray) -> np.ndarray:
    # Square-loss decomposition: |x - y|^2 = x^2 + y^2 - 2xy applied to the
    # pairwise-distance tensor contracted with the current plan.
    return dp2_p[:, None] + dg2_q[None, :] - 2.0 * (dp @ plan @ dg.T)


def _gw_objective(dp: np.ndarray, dg: np.ndarray, plan: np.ndarray) -> float:
    """Exact quadratic GW objective of a plan, using its actual marginals.

    Remains valid (and nonnegative up to rounding) even when the plan's
    marginals are slightly off after a truncated inner solve.
    """
    r = plan.sum(axis=1)
    s = plan.sum(axis=0)
    quad = float((plan * (dp @ plan @ dg.T)).sum())
    return float(r @ (dp**2 @ r) + s @ (dg**2 @ s) - 2.0 * quad)


def _gw_initial_plans(dp: np.ndarray, dg: np.ndarray, a: np.ndarray, b: np.ndarray) -> list[np.ndarray]:
    """Deterministic starting plans for the alternating GW solver.

    The independent plan preserves any symmetry of the problem, so symmetric
    ties (e.g. a chain matched to a chain) make it stall on a permutation
    mixture with an inflated objective. Eccentricity-sorted matchings break
    such ties deterministically; the solver keeps the best final objective.
    """
    n, m = len(a), len(b)
    plans = [np.outer(a, b)]
    order_p = np.argsort(dp.sum(axis=1), kind="stable")
    for order_g in (np.argsort(dg.sum(axis=1), kind="stable"),
                    np.argsort(-dg.sum(axis=1), kind="stable")):
        plan = np.zeros((n, m))
        # walk both eccentricity rankings in lockstep, spreading the shorter
        # side uniformly over the longer one
        for r in range(max(n, m)):
            i = order_p[min(int(r * n / max(n, m)), n - 1)] if n <= m else order_p[r]
            k = order_g[r] if n <= m else order_g[min(int(r * m / max(n, m)), m - 1)]
            plan[i, k] += 1.0
        plan = plan / plan.sum(axis=1, keepdims=True) * a[:, None]
        # repair column marginals so sinkhorn sees a feasible-ish warm start
        col = plan.sum(axis=0)
        plan = plan * np.where(col > 0, b / np.maximum(col, 1e-12), 1.0)[None, :]
        plans.append(plan)
    return plans


def gromov_wasserstein(
    pred: Skeleton,
    gt: Skeleton,
    epsilon: float | None = None,
    max_outer: int = 20,
    max_iter: int = 2000,
    tol: float = 1e-7,
) -> float:
    """Entropic Gromov-Wasserstein distance between skeleton geodesic structures.

    Alternates building the linearized cost from the current plan with a
    Sinkhorn solve on it, run from a fixed set of deterministic starting
    plans (independent plan plus eccentricity matchings); returns the square
    root of the best final quadratic objective.
    """
    dp = skeleton_geodesics(pred)
    dg = skeleton_geodesics(gt)
    # The objective is symmetric in the two structures but the alternating
    # solver is not; canonicalize the orientation so gw(a, b) == gw(b, a).
    if (len(dp), dp.tobytes()) > (len(dg), dg.tobytes()):
        dp, dg = dg, dp
    n, m = len(dp), len(dg)
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    dp2_p = (dp**2) @ a
    dg2_q = (dg**2) @ b

    best = np.inf
    eps = epsilon
    for init in _gw_initial_plans(dp, dg, a, b):
        plan_mat = init
        cost = _gw_linearized_cost(dp2_p, dg2_q, dp, dg, plan_mat)
        if eps is None:
            eps = default_epsilon(cost)
        f = g = None
        for outer in range(max_outer):
            prev = plan_mat
            # warm-start the scaling potentials across outer iterations; the
            # previous potentials stay excellent initializers because the
            # linearized cost changes slowly near convergence
            f, g, plan_mat = _sinkhorn_core(
                cost, a, b, eps,
                max_iter=max_iter if outer == 0 else max(200, max_iter // 10),
                tol=tol, f=f, g=g, anneal=(outer == 0),
            )
            if np.isnan(plan_mat).any():
                raise NumericError("Gromov-Wasserstein inner solve produced NaN")
            cost = _gw_linearized_cost(dp2_p, dg2_q, dp, dg, plan_mat)
            if float(np.abs(plan_mat - prev).max()) < 1e-10:
                break
        objective = _gw_objective(dp, dg, plan_mat)
        if not np.isfinite(objective):
            raise NumericError("Gromov-Wasserstein objective diverged")
        best = min(best, objective)
    return float(np.sqrt(max(best, 0.0)))


# ---------------------------------------------------------------------------
# Rigid alignment (multi-restart ICP)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    residual: float  # mean squared correspondence error of the best restart

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), 0.0)


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation/translation mapping src onto dst."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, cd - r @ cs


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def align_icp(
    pred_points: np.ndarray,
    gt_points: np.ndarray,
    restarts: int = 100,
    iterations: int = 50,
    seed: int = 0,
    tol: float = 1e-12,
) -> RigidTransform:
    """Best-of-restarts rigid ICP alignment of pred onto gt.

    Each restart starts from a uniformly random rotation (centroids matched)
    and alternates nearest-neighbor correspondences with a least-squares
    rigid fit. The transform with the lowest final mean squared
    correspondence error wins.
    """
    src = np.atleast_2d(np.asarray(pred_points, dtype=np.float64))
    dst = np.atleast_2d(np.asarray(gt_points, dtype=np.float64))
    if len(src) < 3 or len(dst) < 3:
        raise ValidationError("ICP alignment needs at least 3 points on each side")
    if restarts < 1:
        raise ValidationError("restarts must be >= 1")
    rng = np.random.default_rng(seed)
    tree = cKDTree(dst)
    best: RigidTransform | None = None
    for _ in range(restarts):
        r = _random_rotation(rng)
        t = dst.mean(axis=0) - r @ src.mean(axis=0)
        prev_mse = np.inf
        for _ in range(iterations):
            moved = src @ r.T + t
            dists, idx = tree.query(moved)
            mse = float((dists**2).mean())
            if prev_mse - mse < tol:
                break
            prev_mse = mse
            r, t = _kabsch(src, dst[idx])
        moved = src @ r.T + t
        dists, _ = tree.query(moved)
        mse = float((dists**2).mean())
        if best is None or mse < best.residual:
            best = RigidTransform(r, t, mse)
    return best


def transform_rig(rig: Rig, transform: RigidTransform) -> Rig:
    """Apply a rigid transform to a rig's mesh and skeleton (skin unchanged)."""
    return Rig(
        mesh=Mesh(transform.apply(rig.mesh.vertices), rig.mesh.triangles),
        skeleton=Skeleton(transform.apply(rig.skeleton.joints), rig.skeleton.parents),
        skin=rig.skin,
    )


# ---------------------------------------------------------------------------
# Skin metrics and the full report
# ---------------------------------------------------------------------------


def skin_metrics(pred: Rig, gt: Rig, plan: TransportPlan) -> tuple[float, float, float]:
    """l1/l2/KL between predicted and reference skins after joint alignment.

    Predicted per-vertex weight vectors are pushed onto reference joints
    through the row-normalized transpose of the transport plan (then
    renormalized to a distribution); reference weights are interpolated at
    each predicted vertex's nearest surface point on the reference mesh.
    """
    if pred.skin is None or gt.skin is None:
        raise ValidationError("skin metrics require skin weights on both rigs")
    n, m = pred.skin.joint_count, gt.skin.joint_count
    if plan.matrix.shape != (n, m):
        raise ValidationError(
            f"plan shape {plan.matrix.shape} does not match joint counts ({n}, {m})"
        )
    col_mass = plan.matrix.sum(axis=0)
    if col_mass.min() <= 0.0:
        raise ValidationError("transport plan has an empty column")
    push = (plan.matrix / col_mass[None, :]).T  # (m, n), rows sum to 1
    pred_pushed = pred.skin.to_dense() @ push.T  # (V_pred, m)
    sums = pred_pushed.sum(axis=1, keepdims=True)
    pred_pushed = np.divide(pred_pushed, sums, out=pred_pushed, where=sums > 0.0)

    gt_at_pred = bvhmod.transfer_skin_bvh(gt, pred.mesh).to_dense()  # (V_pred, m)
    diff = pred_pushed - gt_at_pred
    l1 = float(np.abs(diff).sum(axis=1).mean())
    l2 = float(np.sqrt((diff**2).sum(axis=1)).mean())
    safe = np.where(gt_at_pred > 0.0, gt_at_pred, 1.0)
    kl = float((gt_at_pred * (np.log(safe) - np.log(pred_pushed + 1e-8))).sum(axis=1).mean())
    return l1, l2, max(kl, 0.0)


@dataclass(frozen=True)
class EvalSettings:
    align: str = "icp"  # "icp" or "none"
    icp_restarts: int = 100
    icp_iterations: int = 50
    samples_per_bone: int = 32
    epsilon: float | None = None
    gw_max_outer: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.align not in ("icp", "none"):
            raise ValidationError(f"align must be 'icp' or 'none', got {self.align!r}")


@dataclass(frozen=True)
class MetricReport:
    joint_to_joint: float
    joint_to_bone: float
    bone_to_bone: float
    wasserstein: float
    gromov_wasserstein: float
    skin_l1: float | None
    skin_l2: float | None
    skin_kl: float | None
    alignment: RigidTransform

    COLUMNS = (
        "Joint-to-Joint",
        "Joint-to-Bone",
        "Bone-to-Bone",
        "Wasserstein",
        "Gromov-Wasserstein",
        "Skin l1",
        "Skin l2",
        "Skin KL",
    )

    def values(self) -> list[float | None]:
        return [
            self.joint_to_joint,
            self.joint_to_bone,
            self.bone_to_bone,
            self.wasserstein,
            self.gromov_wasserstein,
            self.skin_l1,
            self.skin_l2,
            self.skin_kl,
        ]

    def to_dict(self) -> dict:
        return {
            "joint_to_joint": self.joint_to_joint,
            "joint_to_bone": self.joint_to_bone,
            "bone_to_bone": self.bone_to_bone,
            "wasserstein": self.wasserstein,
            "gromov_wasserstein": self.gromov_wasserstein,
            "skin_l1": self.skin_l1,
            "skin_l2": self.skin_l2,
            "skin_kl": self.skin_kl,
            "alignment": {
                "rotation": self.alignment.rotation.tolist(),
                "translation": self.alignment.translation.tolist(),
                "residual": self.alignment.residual,
            },
        }


def format_report_table(reports: dict[str, MetricReport]) -> str:
    """Aligned plain-text table, one row per named report."""
    header = ["Name", *MetricReport.COLUMNS]
    rows = [header]
    for name, rep in reports.items():
        rows.append(
            [name] + [("-" if v is None else f"{v:.6f}") for v in rep.values()]
        )
    widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
    lines = []
    for r in rows:
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(r, widths)))
    return "\n".join(lines)


def _rms_radius(mesh: Mesh) -> float:
    centered = mesh.vertices - mesh.vertices.mean(axis=0)
    return float(np.sqrt((centered**2).sum(axis=1).mean()))


def _subsample(points: np.ndarray, cap: int) -> np.ndarray:
    if len(points) <= cap:
        return points
    stride = int(np.ceil(len(points) / cap))
    return points[::stride]


def _scale_rig(rig: Rig, s: float) -> Rig:
    return Rig(
        mesh=Mesh(rig.mesh.vertices * s, rig.mesh.triangles),
        skeleton=Skeleton(rig.skeleton.joints * s, rig.skeleton.parents),
        skin=rig.skin,
    )


def evaluate(pred: Rig, gt: Rig, settings: EvalSettings | None = None) -> MetricReport:
    """Normalize both rigs, rigidly align the prediction, and compute every metric.

    Box normalization alone is not rotation-invariant (a rotated copy gets a
    slightly different bounding box), so the prediction is additionally
    rescaled to match the reference's RMS radius before the rigid ICP, which
    carries no scale. Alignment points are subsampled mesh vertices when both
    meshes carry at least 3, joint sets otherwise.
    """
    settings = settings or EvalSettings()
    pred_n, _, _ = normalize_rig(pred)
    gt_n, _, _ = normalize_rig(gt)
    pred_rms = _rms_radius(pred_n.mesh)
    if pred_rms > 0.0:
        pred_n = _scale_rig(pred_n, _rms_radius(gt_n.mesh) / pred_rms)

    transform = RigidTransform.identity()
    if settings.align == "icp":
        # Align on the geometry: skeleton corruptions (extra/missing joints)
        # would otherwise drag the rigid fit and contaminate every metric.
        if pred_n.mesh.vertex_count >= 3 and gt_n.mesh.vertex_count >= 3:
            src = _subsample(pred_n.mesh.vertices, 400)
            dst = _subsample(gt_n.mesh.vertices, 400)
        else:
            src, dst = pred_n.skeleton.joints, gt_n.skeleton.joints
        transform = align_icp(
            src, dst,
            restarts=settings.icp_restarts,
            iterations=settings.icp_iterations,
            seed=settings.seed,
        )
    pred_al = transform_rig(pred_n, transform)

    j2j, j2b, b2b = chamfer_metrics(pred_al.skeleton, gt_n.skeleton, settings.samples_per_bone)
    w_dist, plan = wasserstein(pred_al.skeleton.joints, gt_n.skeleton.joints, epsilon=settings.epsilon)
    gw = gromov_wasserstein(
        pred_al.skeleton, gt_n.skeleton, epsilon=settings.epsilon, max_outer=settings.gw_max_outer
    )
    skin_l1 = skin_l2 = skin_kl = None
    if pred_al.skin is not None and gt_n.skin is not None:
        skin_l1, skin_l2, skin_kl = skin_metrics(pred_al, gt_n, plan)
    return MetricReport(
        joint_to_joint=j2j,
        joint_to_bone=j2b,
        bone_to_bone=b2b,
        wasserstein=w_dist,
        gromov_wasserstein=gw,
        skin_l1=skin_l1,
        skin_l2=skin_l2,
        skin_kl=skin_kl,
        alignment=transform,
    )


def save_report(report: MetricReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
