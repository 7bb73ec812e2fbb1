"""Outer target-network iteration on a fixed dataset with exact inner minimization.

Models are linear in their parameters, Q = F theta, with one feature row per
legal pair (tabular: F = identity). On a fixed dataset

    L_CDQN(theta; tt) = (1/2n) sum_j max{(q_j - yD_j)^2, (q_j - r_j - gamma max_b q_b)^2}

with yD_j = r_j + gamma max_b (F tt)_b bootstrapped through the frozen
target. The MSBE branch is convex inside each region where the argmax at
every successor state is fixed. Inside such a region, and with epigraph
variables z_j, the inner problem is the convex QP

    min (1/2n) sum z_j^2   s.t.  |u_j| <= z_j,  |v_j| <= z_j,  argmax constraints,

solved by an interior-point method and then polished to an exact vertex by
an active-set pass. When an argmax constraint is binding, the maximizer at
that state is switched and the QP re-solved. The current point stays
feasible in the new region, so the loss never increases. Stationarity of
the result is measured independently as the norm of the minimal-norm
element of the Clarke subdifferential.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from cvxopt import matrix, solvers

from ..mdp import MdpSpec, build_mdp

_QP_OPTS = {"show_progress": False, "abstol": 1e-13, "reltol": 1e-13, "feastol": 1e-13, "maxiters": 200}


class InnerSolveError(RuntimeError):
    """Inner minimization failed to reach the requested stationarity."""


@dataclass
class LinearProblem:
    """Fixed dataset for a linear-in-parameters Q function.

    Attributes:
        features: (n_pairs, d) rows phi(s, a).
        k: (n,) pair index of each sample.
        r: (n,) rewards.
        nxt: per sample, array of successor pair indices, or None when terminal.
        gamma: discount.
    """

    features: np.ndarray
    k: np.ndarray
    r: np.ndarray
    nxt: list
    gamma: float
    groups: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.k = np.asarray(self.k, dtype=np.int64)
        self.r = np.asarray(self.r, dtype=float)
        if len(self.k) == 0:
            raise ValueError("empty dataset")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        # successor groups keyed by their pair tuple
        self.groups = {}
        for nx in self.nxt:
            if nx is not None:
                self.groups.setdefault(tuple(int(c) for c in nx), None)

    @property
    def n(self) -> int:
        return len(self.k)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def q(self, theta):
        return self.features @ theta

    @classmethod
    def tabular(cls, mdp: MdpSpec, gamma: float) -> "LinearProblem":
        """All legal pairs of ``mdp`` as the dataset, one parameter per pair."""
        lo, hi = mdp.next_pair_ranges()
        nterm = mdp.terminal[mdp.next_state]
        nxt = [None if nterm[k] else np.arange(lo[k], hi[k]) for k in range(mdp.n_pairs)]
        return cls(np.eye(mdp.n_pairs), np.arange(mdp.n_pairs), mdp.rewards.copy(), nxt, gamma)


# ------------------------------------------------------------------ losses

def _branch_parts(prob: LinearProblem, theta, target):
    q, qt = prob.q(theta), prob.q(target)
    g = prob.gamma
    u = np.empty(prob.n)
    v = np.empty(prob.n)
    for j, (k, r, nx) in enumerate(zip(prob.k, prob.r, prob.nxt)):
        if nx is None:
            u[j] = v[j] = q[k] - r
        else:
            u[j] = q[k] - r - g * qt[nx].max()
            v[j] = q[k] - r - g * q[nx].max()
    return u, v


def loss_cdqn(prob: LinearProblem, theta, target) -> float:
    u, v = _branch_parts(prob, theta, target)
    return float(np.mean(0.5 * np.maximum(u * u, v * v)))


def loss_dqn(prob: LinearProblem, theta, target) -> float:
    u, _ = _branch_parts(prob, theta, target)
    return float(np.mean(0.5 * u * u))


def loss_msbe(prob: LinearProblem, theta) -> float:
    _, v = _branch_parts(prob, theta, theta)
    return float(np.mean(0.5 * v * v))


def subgradient_cdqn(prob: LinearProblem, theta, target) -> np.ndarray:
    """Gradient of the active branch per sample, the DQN branch at ties, lowest-index argmax."""
    F, g = prob.features, prob.gamma
    u, v = _branch_parts(prob, theta, target)
    q = prob.q(theta)
    out = np.zeros(prob.dim)
    for j, (k, nx) in enumerate(zip(prob.k, prob.nxt)):
        if nx is None or u[j] * u[j] >= v[j] * v[j]:
            out += u[j] * F[k]
        else:
            b = nx[int(np.argmax(q[nx]))]
            out += v[j] * (F[k] - g * F[b])
    return out / prob.n


# --------------------------------------------------------------------- QP

def solve_qp(P, q, G, h, A=None, b=None, max_polish=500):
    """Convex QP min 1/2 x'Px + q'x s.t. Gx <= h, Ax = b.

    Interior point first, then an active-set polish: the working set starts
    from the near-active constraints and the equality-constrained KKT system
    is solved for a correction. It adds the most violated constraint or drops
    the most negative multiplier until the point is primal and dual feasible
    to rounding. Returns (x, multipliers for G, polished flag).
    """
    args = [matrix(P), matrix(q), matrix(G), matrix(h)]
    if A is not None:
        args += [matrix(A), matrix(b)]
    sol = solvers.qp(*args, options=_QP_OPTS)
    x = np.array(sol["x"]).ravel()
    z_ip = np.array(sol["z"]).ravel()
    nv = len(x)
    act = (h - G @ x) < 1e-9
    xp, lam = x, z_ip
    viol, res = np.inf, np.inf
    for _ in range(max_polish):
        C = np.vstack([G[act]] + ([A] if A is not None else []))
        m = C.shape[0]
        kkt = np.block([[P, C.T], [C, np.zeros((m, m))]])
        rhs_c = np.concatenate([h[act]] + ([b] if A is not None else [])) - C @ x
        rhs = np.concatenate([-(P @ x + q), rhs_c])
        try:
            step = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        res = float(np.abs(kkt @ step - rhs).max(initial=0.0))
        xp = x + step[:nv]
        lam = np.zeros(len(h))
        lam[act] = step[nv:nv + int(act.sum())]
        viol = float((G @ xp - h).max(initial=-np.inf))
        if viol > 1e-13:
            act[int(np.argmax(G @ xp - h))] = True
            continue
        if act.any() and lam.min() < -1e-12:
            act[int(np.argmin(lam))] = False
            continue
        break
    ok = viol <= 1e-12 and lam.min(initial=0.0) >= -1e-10 and res < 1e-11
    if A is not None:
        ok = ok and bool(np.allclose(A @ xp, b, rtol=0.0, atol=1e-12))
    if ok:
        return xp, np.maximum(lam, 0.0), True
    return x, z_ip, False


def _cell_qp(prob: LinearProblem, target, choice):
    """QP data for the region where ``choice[group]`` is the maximizer of each successor group."""
    F, g, n, d = prob.features, prob.gamma, prob.n, prob.dim
    qt = prob.q(target)
    rows, h, tags = [], [], []

    def add(coef_theta, j, rhs, tag=None):
        row = np.zeros(d + n)
        row[:d] = coef_theta
        if j is not None:
            row[d + j] = -1.0
        rows.append(row)
        h.append(rhs)
        tags.append(tag)

    for j, (k, r, nx) in enumerate(zip(prob.k, prob.r, prob.nxt)):
        fk = F[k]
        if nx is None:
            add(fk, j, r)
            add(-fk, j, -r)
            continue
        y_d = r + g * qt[nx].max()
        b = choice[tuple(int(c) for c in nx)]
        add(fk, j, y_d)
        add(-fk, j, -y_d)
        fv = fk - g * F[b]
        add(fv, j, r)
        add(-fv, j, -r)
    for grp, b in choice.items():
        for c in grp:
            if c != b:
                diff = F[c] - F[b]
                if np.any(diff != 0):
                    add(diff, None, 0.0, (grp, c))
    G = np.array(rows)
    P = np.zeros((d + n, d + n))
    P[d:, d:] = np.eye(n) / n
    return P, np.zeros(d + n), G, np.array(h), tags


def argmax_choice(prob: LinearProblem, theta) -> dict:
    q = prob.q(theta)
    return {grp: grp[int(np.argmax(q[list(grp)]))] for grp in prob.groups}


@dataclass
class InnerResult:
    theta: np.ndarray
    loss: float
    stationarity: float
    n_cells: int
    polished: bool


def minimize_cdqn(prob: LinearProblem, target, start=None, max_cells: int = 100,
                  tol: float = 1e-10) -> InnerResult:
    """Minimize L_CDQN(.; target) by region-wise QPs, never increasing the loss.

    At degenerate points several tied maximizers can bind in turn without
    lowering the loss. A region that brings no decrease therefore triggers a
    stationarity check, and the walk stops once it is below ``tol`` or a
    selection repeats.
    """
    theta = np.array(target if start is None else start, dtype=float)
    choice = argmax_choice(prob, theta)
    cur = loss_cdqn(prob, theta, target)
    d = prob.dim
    polished = True
    cells = 0
    seen = set()
    for _ in range(max_cells):
        key = tuple(sorted(choice.items()))
        if key in seen:
            break
        seen.add(key)
        P, q, G, h, tags = _cell_qp(prob, target, choice)
        x, lam, ok = solve_qp(P, q, G, h)
        cells += 1
        polished &= ok
        cand = x[:d]
        val = loss_cdqn(prob, cand, target)
        if val > cur:
            break
        progress = val < cur
        theta, cur = cand, val
        if not progress and clarke_stationarity(prob, theta, target) <= tol:
            break
        scale = max(float(lam.max(initial=0.0)), 1e-300)
        switch = {}
        for tag, mult in zip(tags, lam):
            if tag is not None and mult > 1e-9 * scale:
                grp, c = tag
                if mult > switch.get(grp, (None, -1.0))[1]:
                    switch[grp] = (c, mult)
        if not switch:
            break
        for grp, (c, _) in switch.items():
            choice[grp] = c
    return InnerResult(theta, cur, clarke_stationarity(prob, theta, target), cells, polished)


def minimize_dqn(prob: LinearProblem, target) -> InnerResult:
    """Exact least squares for the DQN loss."""
    F = prob.features[prob.k]
    qt = prob.q(target)
    y = np.array([r if nx is None else r + prob.gamma * qt[nx].max() for r, nx in zip(prob.r, prob.nxt)])
    theta = np.linalg.lstsq(F, y, rcond=None)[0]
    grad = F.T @ (F @ theta - y) / prob.n
    return InnerResult(theta, loss_dqn(prob, theta, target), float(np.linalg.norm(grad)), 1, True)


def clarke_stationarity(prob: LinearProblem, theta, target, tau: float = 1e-9) -> float:
    """Norm of the minimal-norm element of the Clarke subdifferential of L_CDQN(.; target) at theta.

    Branches and argmax entries within relative ``tau`` of each other count as
    tied. Each sample contributes the convex hull of its tied branch
    gradients. The minimal-norm point of the resulting sum of hulls is a small
    QP over the convex weights.
    """
    F, g, n = prob.features, prob.gamma, prob.n
    q, qt = prob.q(theta), prob.q(target)
    base = np.zeros(prob.dim)
    hulls = []
    for k, r, nx in zip(prob.k, prob.r, prob.nxt):
        if nx is None:
            base += (q[k] - r) * F[k] / n
            continue
        u = q[k] - r - g * qt[nx].max()
        m = q[nx].max()
        v = q[k] - r - g * m
        lu, lv = 0.5 * u * u, 0.5 * v * v
        g_u = u * F[k] / n
        g_v = [v * (F[k] - g * F[c]) / n for c in nx if q[c] >= m - tau * (1.0 + abs(m))]
        if abs(lu - lv) <= tau * (1.0 + max(lu, lv)):
            verts = [g_u] + g_v
        elif lu > lv:
            verts = [g_u]
        else:
            verts = g_v
        # drop duplicate vertices
        uniq = []
        for vtx in verts:
            if not any(np.array_equal(vtx, w) for w in uniq):
                uniq.append(vtx)
        if len(uniq) == 1:
            base += uniq[0]
        else:
            hulls.append(uniq)
    if not hulls:
        return float(np.linalg.norm(base))
    V = np.array([vtx for hull in hulls for vtx in hull]).T
    nv = V.shape[1]
    E = np.zeros((len(hulls), nv))
    c = 0
    for i, hull in enumerate(hulls):
        E[i, c:c + len(hull)] = 1.0
        c += len(hull)
    mu, _, _ = solve_qp(V.T @ V, V.T @ base, -np.eye(nv), np.zeros(nv), E, np.ones(len(hulls)))
    return float(np.linalg.norm(V @ mu + base))


# -------------------------------------------------------------- outer loop

@dataclass
class ConvergenceRun:
    chain: np.ndarray            # m_i = L_kind(tt_{i+1}; tt_i)
    msbe: np.ndarray             # L_MSBE(tt_{i+1})
    stationarity: np.ndarray     # inner stationarity per outer step
    thetas: list
    max_increase: float
    non_increasing: bool


def outer_iteration(prob: LinearProblem, kind: str = "cdqn", n_outer: int = 10, tol_inner: float = 1e-8,
                    slack: float | None = None, theta0=None, relaxed: bool = False, relaxed_steps: int = 50,
                    relaxed_lr: float = 0.5, strict: bool = False) -> ConvergenceRun:
    """Iterate tt_{i+1} = argmin L_kind(.; tt_i) and record the outer chain.

    ``relaxed`` replaces exact minimization by gradient steps from tt_i whose
    result is accepted only if it does not raise the loss above L(tt_i; tt_i);
    on rejection the step size is halved, and after repeated rejection the
    target is kept.
    """
    slack = 10 * tol_inner if slack is None else slack
    tt = np.zeros(prob.dim) if theta0 is None else np.array(theta0, dtype=float)
    chain, msbe, stat, thetas = [], [], [], [tt.copy()]
    lr = relaxed_lr
    for _ in range(n_outer):
        if relaxed:
            base = loss_cdqn(prob, tt, tt)
            nxt_t = tt
            for _attempt in range(30):
                th = tt.copy()
                for _s in range(relaxed_steps):
                    th = th - lr * subgradient_cdqn(prob, th, tt)
                if loss_cdqn(prob, th, tt) <= base:
                    nxt_t = th
                    break
                lr *= 0.5
            res = InnerResult(nxt_t, loss_cdqn(prob, nxt_t, tt), np.nan, 0, True)
        elif kind == "cdqn":
            res = minimize_cdqn(prob, tt)
        elif kind == "dqn":
            res = minimize_dqn(prob, tt)
        else:
            raise ValueError(f"unknown kind {kind!r}")
        if strict and not relaxed and not res.stationarity <= tol_inner:
            raise InnerSolveError(f"inner stationarity {res.stationarity:.3e} exceeds {tol_inner:.1e}")
        chain.append(res.loss)
        msbe.append(loss_msbe(prob, res.theta))
        stat.append(res.stationarity)
        tt = res.theta
        thetas.append(tt.copy())
    chain = np.array(chain)
    inc = float(np.max(np.diff(chain), initial=-np.inf)) if len(chain) > 1 else -np.inf
    return ConvergenceRun(chain, np.array(msbe), np.array(stat), thetas, inc, bool(inc <= slack))


@dataclass
class ConvergenceReport:
    runs: list
    n_pass: int
    n_total: int
    max_stationarity: float
    passed: bool


def run_cdqn_convergence_check(problems, kind: str = "cdqn", n_outer: int = 10, tol_inner: float = 1e-8,
                               slack: float | None = None, relaxed: bool = False) -> ConvergenceReport:
    """Run the outer iteration on every problem; pass when every chain is non-increasing within slack
    and every exact inner solve met ``tol_inner``."""
    runs = [outer_iteration(p, kind, n_outer, tol_inner, slack, relaxed=relaxed) for p in problems]
    ok = [r.non_increasing and (relaxed or np.nanmax(r.stationarity) <= tol_inner) for r in runs]
    stat = max((float(np.nanmax(r.stationarity)) for r in runs if not np.all(np.isnan(r.stationarity))),
               default=float("nan"))
    return ConvergenceReport(runs, int(sum(ok)), len(runs), stat, all(ok))


# ------------------------------------------------------- divergence instance

DIVERGENCE_FEATURES = np.array([[1.0], [2.0]])


def build_divergence_instance():
    """Two states, one action. s1 -> s2 with reward 0; phi(s1) = 1, phi(s2) = 2, shared weight w.

    s2 carries a zero-reward self-loop so it is non-terminal. The frozen
    dataset is the single transition out of s1; with gamma > 0.5 the
    bootstrapped gradient product 2 gamma exceeds |grad Q(s1)|^2 = 1.
    Returns (mdp, model, features).
    """
    from ..approx import ApproxModel
    mdp = build_mdp(2, {(0, 0): (1, 0.0), (1, 0): (1, 0.0)}, [False, False], name="divergence")
    model = ApproxModel(1, (), 1, np.array([1.0]), bias=False)
    return mdp, model, DIVERGENCE_FEATURES.copy()


def divergence_problem(gamma: float) -> LinearProblem:
    """The frozen one-transition dataset of the divergence instance as a linear problem."""
    return LinearProblem(DIVERGENCE_FEATURES, np.array([0]), np.array([0.0]), [np.array([1])], gamma)
