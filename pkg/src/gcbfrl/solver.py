"""Linearized trust-region policy update: dual solve, recovery step, line search.

The subproblem is

    min_d  g' d   s.t.  z + C' d <= 0,   0.5 d' H d <= delta

with H available only through matrix-vector products.  A single constraint is
solved in closed form through the dual; several constraints go through
projected gradient ascent on the duals with an exact active-set polish.  When
no point of the trust region satisfies the linearized constraint, the update
switches to a recovery step that purely decreases the constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"


def normalize_gradients(g_raw: np.ndarray, c_raw: Sequence[np.ndarray],
                        eps: float = 1e-8) -> tuple[np.ndarray, list[np.ndarray]]:
    """Divide each gradient by max(||.||^2, eps); zero vectors stay zero."""

    def norm2(v):
        v = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ContractViolation("raw gradient is not finite")
        return v / max(float(v @ v), eps)

    return norm2(g_raw), [norm2(c) for c in c_raw]


@dataclass
class CGResult:
    x: np.ndarray
    converged: bool
    iterations: int
    rel_residual: float


def conjugate_gradient(h_op: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray,
                       max_iters: int = 20, tol: float = 1e-8) -> CGResult:
    """Solve H x = rhs for SPD H; returns the best iterate with a convergence flag."""
    if tol <= 0.0:
        raise ContractViolation("tol must be positive")
    rhs = np.asarray(rhs, dtype=np.float64)
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return CGResult(np.zeros_like(rhs), True, 0, 0.0)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = rhs.copy()
    rdotr = float(r @ r)
    best_x, best_res = x.copy(), np.sqrt(rdotr) / rhs_norm
    for i in range(max_iters):
        hp = h_op(p)
        denom = float(p @ hp)
        if denom <= 0.0:
            break  # operator not PD along p; keep best iterate
        a = rdotr / denom
        x = x + a * p
        r = r - a * hp
        new_rdotr = float(r @ r)
        res = np.sqrt(new_rdotr) / rhs_norm
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= tol:
            return CGResult(x, True, i + 1, res)
        p = r + (new_rdotr / rdotr) * p
        rdotr = new_rdotr
    return CGResult(best_x, best_res <= tol, max_iters, best_res)


@dataclass
class LinearizedStep:
    """One policy-update subproblem plus (after solving) its solution."""

    g: np.ndarray
    C: list[np.ndarray]
    z: np.ndarray
    h_op: Callable[[np.ndarray], np.ndarray]
    delta: float
    status: str | None = None
    dtheta: np.ndarray | None = None
    lam: float | None = None
    nu: np.ndarray | None = None
    flag: str | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64)
        self.C = [np.asarray(c, dtype=np.float64) for c in self.C]
        self.z = np.atleast_1d(np.asarray(self.z, dtype=np.float64))
        if self.delta <= 0.0:
            raise ContractViolation("trust radius must be positive")
        if len(self.C) != self.z.size:
            raise ContractViolation("one residual per constraint gradient required")

    def hinv(self, key: str, v: np.ndarray, cg_iters: int = 20, cg_tol: float = 1e-8):
        if key not in self._cache:
            res = conjugate_gradient(self.h_op, v, cg_iters, cg_tol)
            self._cache[key] = res
        return self._cache[key]


def _products(step: LinearizedStep, cg_iters: int, cg_tol: float):
    """H^-1 g, H^-1 c_i and the Gram quantities q, r, S."""
    hg = step.hinv("g", step.g, cg_iters, cg_tol).x
    hc = [step.hinv(f"c{i}", c, cg_iters, cg_tol).x for i, c in enumerate(step.C)]
    q = float(step.g @ hg)
    r = np.array([step.g @ x for x in hc])
    s = np.array([[step.C[i] @ hc[j] for j in range(len(hc))] for i in range(len(hc))])
    s = 0.5 * (s + s.T)
    return hg, hc, q, r, s


def check_feasibility(step: LinearizedStep, cg_iters: int = 20, cg_tol: float = 1e-8) -> str:
    """Single aggregated constraint: feasible iff z <= sqrt(2 delta c' H^-1 c).

    The right side is the largest decrease of the linearized constraint
    achievable inside the trust region; the boundary counts as feasible.
    """
    if len(step.C) != 1:
        raise ContractViolation("check_feasibility handles a single constraint")
    z = float(step.z[0])
    if z <= 0.0:
        step.status = FEASIBLE
        return FEASIBLE
    hc = step.hinv("c0", step.C[0], cg_iters, cg_tol).x
    max_decrease = np.sqrt(max(2.0 * step.delta * float(step.C[0] @ hc), 0.0))
    step.status = FEASIBLE if z <= max_decrease else INFEASIBLE
    return step.status


def _kkt_residuals(step: LinearizedStep, dtheta, lam, nu):
    hd = step.h_op(dtheta)
    cmat = np.stack(step.C) if step.C else np.zeros((0, step.g.size))
    stat = step.g + lam * hd + cmat.T @ nu if step.C else step.g + lam * hd
    tr = 0.5 * float(dtheta @ hd) - step.delta
    lin = step.z + cmat @ dtheta if step.C else np.zeros(0)
    return {
        "stationarity": float(np.linalg.norm(stat)),
        "trust": tr,
        "linear": lin,
        "comp_trust": abs(lam * tr),
        "comp_linear": float(np.abs(nu * lin).max()) if lin.size else 0.0,
    }


def _solve_single(step: LinearizedStep, cg_iters: int, cg_tol: float):
    hg, hc, q, r, s = _products(step, cg_iters, cg_tol)
    hc, r, s = hc[0], float(r[0]), float(s[0, 0])
    z = float(step.z[0])
    delta = step.delta
    tiny = 1e-14

    if q <= tiny:
        # Objective gradient vanished; stay put (z <= 0 under the feasible pre).
        return np.zeros_like(step.g), np.sqrt(max(q, tiny) / (2.0 * delta)), 0.0

    lam0 = np.sqrt(q / (2.0 * delta))
    d0 = -hg / lam0
    if z + float(step.C[0] @ d0) <= 1e-12:
        return d0, lam0, 0.0

    # Constraint active.  Optimal nu solves z = sqrt(2 delta) (r + nu s) / ||g + nu c||_{H^-1}.
    if s <= tiny:
        # Constraint gradient vanished but the unconstrained step violates:
        # cannot happen when z <= 0 admitted d0... fall back to staying put.
        return np.zeros_like(step.g), lam0, 0.0

    bcoef = 2.0 * delta * s - z * z
    disc = max(bcoef * z * z * max(q * s - r * r, 0.0), 0.0)
    candidates = []
    if abs(s * bcoef) > tiny:
        for sign in (+1.0, -1.0):
            nu = (-r * bcoef + sign * np.sqrt(disc)) / (s * bcoef)
            if nu > 0.0 and np.isfinite(nu):
                candidates.append(nu)

    def dual_grad(nu):
        e = q + 2.0 * nu * r + nu * nu * s
        return z - np.sqrt(2.0 * delta) * (r + nu * s) / np.sqrt(max(e, tiny))

    best = None
    for nu in candidates:
        e = q + 2.0 * nu * r + nu * nu * s
        if e <= tiny:
            continue
        lam = np.sqrt(e / (2.0 * delta))
        d = -(hg + nu * hc) / lam
        res = _kkt_residuals(step, d, lam, np.array([nu]))
        # Squaring the active-constraint equation admits a spurious root that
        # breaks complementary slackness; score it out.
        score = (res["stationarity"] + max(res["linear"][0], 0.0)
                 + max(res["trust"], 0.0) + res["comp_linear"] + res["comp_trust"])
        if best is None or score < best[0]:
            best = (score, d, lam, nu)
    if best is not None and best[0] < 1e-6 * max(1.0, np.linalg.norm(step.g)):
        return best[1], best[2], best[3]

    # Bisection on the concave dual as a robust fallback.
    lo, hi = 0.0, 1.0
    for _ in range(200):
        if dual_grad(hi) < 0.0:
            break
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if dual_grad(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    nu = 0.5 * (lo + hi)
    e = q + 2.0 * nu * r + nu * nu * s
    lam = np.sqrt(max(e, tiny) / (2.0 * delta))
    return -(hg + nu * hc) / lam, lam, nu


def _solve_multi(step: LinearizedStep, cg_iters: int, cg_tol: float,
                 warm_start: tuple[float, np.ndarray] | None,
                 ascent_iters: int = 500, ascent_rate: float = 1e-2):
    """Projected gradient ascent on (lambda, nu) with an exact active-set polish."""
    hg, hc, q, r, s = _products(step, cg_iters, cg_tol)
    m = len(step.C)
    z = step.z
    delta = step.delta
    tiny = 1e-14
    lam_min = 1e-8

    lam = max(np.sqrt(max(q, tiny) / (2.0 * delta)), lam_min)
    nu = np.zeros(m)
    if warm_start is not None:
        lam = max(float(warm_start[0]), lam_min)
        nu = np.maximum(np.asarray(warm_start[1], dtype=np.float64).copy(), 0.0)

    def energy(nu):
        return q + 2.0 * float(nu @ r) + float(nu @ s @ nu)

    for _ in range(ascent_iters):
        e = max(energy(nu), tiny)
        d_lam = 0.5 * e / lam ** 2 - delta
        d_nu = z - (r + s @ nu) / lam
        lam = max(lam + ascent_rate * d_lam, lam_min)
        nu = np.maximum(nu + ascent_rate * d_nu, 0.0)
        if np.any(nu > 1e8):
            return None, None, None, INFEASIBLE  # dual ray: primal infeasible

    def primal(lam, nu):
        d = -(hg + sum(nu[i] * hc[i] for i in range(m))) / lam
        return d

    # Active-set polish: take the ascent's guess of active constraints and solve
    # the equality-constrained problem exactly.
    d = primal(lam, nu)
    lin = z + np.array([c @ d for c in step.C])
    active = (nu > 1e-10) | (lin > -1e-10)
    polished = None
    if active.any():
        idx = np.where(active)[0]
        s_aa = s[np.ix_(idx, idx)]
        try:
            u = np.linalg.solve(s_aa, z[idx])
            w = np.linalg.solve(s_aa, r[idx])
            num = q - float(r[idx] @ w)
            den = 2.0 * delta - float(z[idx] @ u)
            if num > tiny and den > tiny:
                lam_p = np.sqrt(num / den)
                nu_p = np.zeros(m)
                nu_p[idx] = lam_p * u - w
                if np.all(nu_p >= -1e-12):
                    nu_p = np.maximum(nu_p, 0.0)
                    polished = (lam_p, nu_p, primal(lam_p, nu_p))
        except np.linalg.LinAlgError:
            pass

    candidates = [(lam, nu, d)]
    if polished is not None:
        candidates.append(polished)
    best = None
    for lam_c, nu_c, d_c in candidates:
        res = _kkt_residuals(step, d_c, lam_c, nu_c)
        viol = (res["stationarity"] / max(1.0, np.linalg.norm(step.g))
                + max(res["trust"], 0.0) + float(np.maximum(res["linear"], 0.0).max(initial=0.0))
                + res["comp_linear"])
        if best is None or viol < best[0]:
            best = (viol, lam_c, nu_c, d_c)
    score, lam, nu, d = best
    lin = z + np.array([c @ d for c in step.C])
    if float(np.maximum(lin, 0.0).max(initial=0.0)) > 1e-5 * max(1.0, float(np.abs(z).max())):
        return None, None, None, INFEASIBLE
    return d, lam, nu, FEASIBLE


def solve_step(step: LinearizedStep, cg_iters: int = 20, cg_tol: float = 1e-8,
               warm_start: tuple[float, np.ndarray] | None = None,
               ascent_iters: int = 500, ascent_rate: float = 1e-2,
               ) -> tuple[np.ndarray | None, float | None, np.ndarray | None]:
    """Exact minimizer of the linearized subproblem; fills the step's solution fields.

    Returns (dtheta, lambda, nu); dtheta is None when the multi-constraint dual
    certifies infeasibility (the caller should fall back to a recovery step).
    """
    if len(step.C) == 1:
        d, lam, nu = _solve_single(step, cg_iters, cg_tol)
        step.status = FEASIBLE
        step.dtheta, step.lam, step.nu = d, lam, np.array([nu])
        return d, lam, step.nu
    d, lam, nu, status = _solve_multi(step, cg_iters, cg_tol, warm_start,
                                      ascent_iters, ascent_rate)
    step.status = status
    if status == INFEASIBLE:
        step.flag = "dual-infeasible"
        return None, None, None
    step.dtheta, step.lam, step.nu = d, lam, nu
    return d, lam, nu


def recovery_step(step: LinearizedStep, b: np.ndarray, cg_iters: int = 20,
                  cg_tol: float = 1e-8, eps: float = 1e-12) -> np.ndarray:
    """Pure constraint-reduction step -sqrt(2 delta / b'H^-1 b) H^-1 b.

    Lands exactly on the trust-region boundary (0.5 d'Hd = delta up to the CG
    tolerance).  A vanished constraint gradient yields a flagged no-op.
    """
    b = np.asarray(b, dtype=np.float64)
    x = conjugate_gradient(step.h_op, b, cg_iters, cg_tol).x
    denom = float(b @ x)
    if denom <= eps:
        step.flag = "vanished-constraint-gradient"
        step.dtheta = np.zeros_like(b)
        return step.dtheta
    d = -np.sqrt(2.0 * step.delta / denom) * x
    step.dtheta = d
    return d


@dataclass
class LineSearchResult:
    params: np.ndarray
    accepted: bool
    backtracks: int
    kl: float
    reason: str


def line_search(params: np.ndarray, dtheta: np.ndarray,
                objective_eval: Callable[[np.ndarray], float],
                kl_eval: Callable[[np.ndarray], float],
                constraint_eval: Callable[[np.ndarray], float] | None,
                delta: float, feasible: bool = True,
                backtrack_coeff: float = 0.8, max_backtracks: int = 10,
                constraint_tol: float = 1e-6) -> LineSearchResult:
    """Backtrack dtheta until KL fits the trust region and, for feasible steps,
    the constraint residual does not worsen and the objective does not increase.

    Falls back to the old parameters if every backtrack fails.
    """
    j_old = objective_eval(params)
    z_old = constraint_eval(params) if constraint_eval is not None else None
    frac = 1.0
    for k in range(max_backtracks + 1):
        cand = params + frac * dtheta
        kl = kl_eval(cand)
        ok = kl <= delta * (1.0 + 1e-9)
        if ok and feasible:
            j_new = objective_eval(cand)
            ok = j_new <= j_old + 1e-10
            if ok and constraint_eval is not None:
                z_new = constraint_eval(cand)
                ok = max(z_new, 0.0) <= max(z_old, 0.0) + constraint_tol
        if ok:
            return LineSearchResult(cand, True, k, kl, "accepted")
        frac *= backtrack_coeff
    return LineSearchResult(params.copy(), False, max_backtracks, 0.0, "exhausted")
