"""POD-Galerkin reduced-order layer for the optimal flow control problem.

Offline: collect full-order optimality-system snapshots over a training set,
compress each field (state velocity/pressure, control, adjoint
velocity/pressure) by proper orthogonal decomposition in its natural inner
product, enrich the velocity spaces with supremizers of the retained pressure
modes, aggregate state and adjoint spaces, and project all operators once —
including a third-order tensor holding the convection trilinear form on the
reduced velocity basis, so the online Navier-Stokes Newton loop never touches
full-order arrays.

Inflow lifting fields enter the reduced velocity basis as fixed trailing
columns whose coefficients are pinned to the parameter values; they are kept
out of the orthonormalized block so that pinning stays exact.

Online: a dense KKT solve (Stokes) or dense Newton iteration (Navier-Stokes)
of dimension 13*N + liftings.
"""

import io
import json
import struct
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .errors import (
    AllSnapshotsFailed,
    DimensionMismatch,
    IoError,
    MissingArtifact,
    NewtonDiverged,
    OcromError,
    ParameterOutOfDomain,
    ParseError,
    RankDeficiency,
)

FIELDS = ("v", "p", "u", "w", "q")


@dataclass
class TrainingSet:
    """Parameter samples for snapshot collection."""

    parameters: np.ndarray  # shape (size, n_parameters)
    mode: str = "grid"
    seed: int | None = None

    def __post_init__(self):
        self.parameters = np.atleast_2d(np.asarray(self.parameters, dtype=float))
        if self.parameters.shape[0] < 1:
            raise DimensionMismatch("training set must contain at least one sample")

    def __len__(self):
        return self.parameters.shape[0]


def training_grid(bounds, size):
    """Uniformly spaced samples; tensor grid for multiple parameters."""
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    axes = [np.linspace(lo, hi, size) for lo, hi in bounds]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    return TrainingSet(pts, mode="grid")


def training_random(bounds, size, seed):
    """Uniform random samples with a recorded seed."""
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    rng = np.random.default_rng(seed)
    pts = rng.uniform(bounds[:, 0], bounds[:, 1], size=(size, bounds.shape[0]))
    return TrainingSet(pts, mode="random", seed=seed)


@dataclass
class SnapshotSet:
    """Per-field solution matrices, one column per successful training solve."""

    matrices: dict  # field -> (n_dof, n_ok) array; velocity fields homogeneous
    parameters: np.ndarray  # parameters of the successful solves
    failures: list  # (index, parameter vector, message)

    def __len__(self):
        return self.parameters.shape[0]


def collect_snapshots(model, training):
    """Solve the full optimality system at every training parameter."""
    cols = {f: [] for f in FIELDS}
    ok_mu, failures = [], []
    for i, mu in enumerate(training.parameters):
        try:
            sol = model.solve_ocp(mu)
        except (OcromError, np.linalg.LinAlgError) as exc:
            failures.append((i, mu.copy(), str(exc)))
            continue
        cols["v"].append(sol.v_hom)
        cols["p"].append(sol.p)
        cols["u"].append(sol.u)
        cols["w"].append(sol.w)
        cols["q"].append(sol.q)
        ok_mu.append(mu.copy())
    if not ok_mu:
        raise AllSnapshotsFailed(
            f"all {len(training)} snapshot solves failed; first: {failures[0][2]}"
        )
    matrices = {f: np.column_stack(cols[f]) for f in FIELDS}
    return SnapshotSet(matrices, np.array(ok_mu), failures)


def inner_products_of(model):
    ops = model.operators
    return {"v": ops.X_v, "p": ops.X_p, "u": ops.N_c, "w": ops.X_v, "q": ops.X_p}


@dataclass
class PodBasis:
    """Per-field POD results plus supremizers and aggregated spaces."""

    eigenvalues: dict  # field -> descending eigenvalue array (full spectrum)
    modes: dict  # field -> (n_dof, n_retained) X-orthonormal columns
    energy: dict  # field -> retained energy fraction
    n_max: int
    supremizers_v: np.ndarray | None = None
    supremizers_w: np.ndarray | None = None
    lifting: np.ndarray | None = None  # (n_velocity, n_inlets) fixed columns
    y_v: np.ndarray | None = None  # aggregated velocity basis (4*n_max cols)
    y_p: np.ndarray | None = None  # aggregated pressure basis (2*n_max cols)
    y_u: np.ndarray | None = None  # control basis (n_max cols)

    def reduced_dimension(self):
        n_lift = 0 if self.lifting is None else self.lifting.shape[1]
        return 13 * self.n_max + n_lift


def pod_compress(snapshots, inner_products, n_max, eps_tol=1e-4):
    """X-weighted correlation-matrix POD of every snapshot field.

    Solves (1/|Lambda|) X^T W X rho = lambda rho per field and maps retained
    eigenvectors to X-orthonormal modes X rho / sqrt(|Lambda| lambda).
    """
    n_snap = len(snapshots)
    if n_max > n_snap:
        raise DimensionMismatch(f"n_max={n_max} exceeds snapshot count {n_snap}")
    eigenvalues, modes, energy = {}, {}, {}
    ranks = []
    for f in FIELDS:
        X = snapshots.matrices[f]
        W = inner_products[f]
        corr = (X.T @ (W @ X)) / n_snap
        corr = 0.5 * (corr + corr.T)
        eig = numerics.symmetric_eig(corr)
        lam = np.maximum(eig.eigenvalues, 0.0)
        total = lam.sum()
        rank = int(np.sum(lam > max(total, 1e-300) * 1e-12))
        ranks.append(rank)
        keep = min(n_max, rank)
        cols = []
        for n in range(keep):
            cols.append(X @ eig.eigenvectors[:, n] / np.sqrt(n_snap * lam[n]))
        eigenvalues[f] = lam
        modes[f] = np.column_stack(cols) if cols else np.zeros((X.shape[0], 0))
        energy[f] = float(lam[:keep].sum() / total) if total > 0 else 1.0
    n_keep = min(min(ranks), n_max)
    if min(ranks) < n_max:
        warnings.warn(
            RankDeficiency(f"snapshot rank {min(ranks)} < requested n_max {n_max}")
        )
    for f in FIELDS:
        modes[f] = modes[f][:, :n_keep]
        lam = eigenvalues[f]
        energy[f] = float(lam[:n_keep].sum() / lam.sum()) if lam.sum() > 0 else 1.0
    basis = PodBasis(eigenvalues, modes, energy, n_keep)
    for f in FIELDS:
        if basis.energy[f] < 1.0 - eps_tol and n_keep == n_max:
            warnings.warn(
                RankDeficiency(
                    f"field {f}: retained energy {basis.energy[f]:.6f} < 1 - eps_tol"
                )
            )
    return basis


def _mgs(columns, weight, against=None, drop_tol=1e-10):
    """Modified Gram-Schmidt in the ``weight`` inner product.

    Orthonormalizes ``columns`` (optionally also against the already
    orthonormal ``against`` block); near-dependent columns are dropped.
    """
    kept = []
    base = [] if against is None else [against[:, j] for j in range(against.shape[1])]
    for j in range(columns.shape[1]):
        v = columns[:, j].copy()
        scale = np.sqrt(max(v @ (weight @ v), 0.0))
        for b in base + kept:
            v -= (b @ (weight @ v)) * b
        for b in base + kept:  # second sweep for numerical orthogonality
            v -= (b @ (weight @ v)) * b
        nrm = np.sqrt(max(v @ (weight @ v), 0.0))
        if nrm <= drop_tol * max(scale, 1.0):
            continue
        kept.append(v / nrm)
    if not kept:
        return np.zeros((columns.shape[0], 0))
    return np.column_stack(kept)


def compute_supremizers(model, pressure_modes):
    """Velocity enrichment restoring reduced inf-sup stability.

    For each pressure mode q solves (T, v)_{X_v} = b(q, v) on the homogeneous
    velocity space, then X_v-orthonormalizes the solutions.
    """
    ops = model.operators
    f = model.free
    X_ff = ops.X_v[f][:, f].tocsc()
    lu = numerics.factorize(X_ff)
    cols = []
    for n in range(pressure_modes.shape[1]):
        rhs = (ops.B.T @ pressure_modes[:, n])[f]
        t = np.zeros(model.spaces.n_velocity)
        t[f] = lu.solve(rhs)
        cols.append(t)
    raw = (
        np.column_stack(cols)
        if cols
        else np.zeros((model.spaces.n_velocity, 0))
    )
    return _mgs(raw, ops.X_v)


def build_reduced_spaces(model, basis, enrich=True):
    """Aggregate state and adjoint spaces into shared reduced bases.

    Velocity: [state modes | state supremizers | adjoint modes | adjoint
    supremizers], re-orthonormalized as one block; lifting fields stay
    outside the orthonormalization so their coefficients pin to the
    parameters exactly.  Pressure: [state | adjoint] modes re-orthonormalized.
    """
    if enrich:
        basis.supremizers_v = compute_supremizers(model, basis.modes["p"])
        basis.supremizers_w = compute_supremizers(model, basis.modes["q"])
    else:
        empty = np.zeros((model.spaces.n_velocity, 0))
        basis.supremizers_v = empty
        basis.supremizers_w = empty
    return _aggregate(model, basis)


def _aggregate(model, basis):
    ops = model.operators
    agg_v = np.column_stack(
        [basis.modes["v"], basis.supremizers_v, basis.modes["w"], basis.supremizers_w]
    )
    basis.y_v = _mgs(agg_v, ops.X_v)
    basis.y_p = _mgs(np.column_stack([basis.modes["p"], basis.modes["q"]]), ops.X_p)
    basis.y_u = _mgs(basis.modes["u"], ops.N_c)
    basis.lifting = np.column_stack(model.liftings)
    if basis.y_v.shape[1] != agg_v.shape[1] or basis.y_p.shape[1] != 2 * basis.n_max:
        warnings.warn(
            RankDeficiency(
                "aggregated basis lost columns to near-dependence: "
                f"velocity {basis.y_v.shape[1]}/{agg_v.shape[1]}, "
                f"pressure {basis.y_p.shape[1]}/{2 * basis.n_max}"
            )
        )
    return basis


def truncate_basis(model, basis, n):
    """Basis restricted to the first ``n`` modes per field, re-aggregated.

    Supremizer columns correspond one-to-one to pressure modes with a
    span-preserving prefix (modified Gram-Schmidt), so truncating them to the
    first ``n`` columns spans exactly the supremizers of the retained
    pressure modes.
    """
    if n > basis.n_max:
        raise DimensionMismatch(f"cannot truncate to {n} > retained {basis.n_max}")
    small = PodBasis(
        eigenvalues={f: basis.eigenvalues[f].copy() for f in FIELDS},
        modes={f: basis.modes[f][:, :n] for f in FIELDS},
        energy={
            f: float(basis.eigenvalues[f][:n].sum() / basis.eigenvalues[f].sum())
            if basis.eigenvalues[f].sum() > 0
            else 1.0
            for f in FIELDS
        },
        n_max=n,
        supremizers_v=basis.supremizers_v[:, :n],
        supremizers_w=basis.supremizers_w[:, :n],
    )
    return _aggregate(model, small)


def check_pod_invariants(model, basis, eps_tol=1e-4, orth_tol=1e-10):
    """Assert eigenvalue monotonicity, energy retention and orthonormality."""
    from .errors import InvariantViolation

    for f in FIELDS:
        lam = basis.eigenvalues[f]
        if np.any(np.diff(lam) > 1e-12 * max(lam[0], 1e-300)):
            raise InvariantViolation(f"field {f}: eigenvalues not descending")
        if np.any(lam < -1e-12 * max(lam[0], 1e-300)):
            raise InvariantViolation(f"field {f}: negative eigenvalue")
        if basis.energy[f] < 1.0 - eps_tol and basis.n_max < lam.shape[0]:
            # rank-limited retention is reported via RankDeficiency instead
            pass
    ops = model.operators
    for name, y, w in (
        ("velocity", basis.y_v, ops.X_v),
        ("pressure", basis.y_p, ops.X_p),
        ("control", basis.y_u, ops.N_c),
    ):
        if y is None or y.shape[1] == 0:
            continue
        gram = y.T @ (w @ y)
        err = np.abs(gram - np.eye(y.shape[1])).max()
        if err > orth_tol:
            raise InvariantViolation(f"{name} basis orthonormality error {err:.2e}")


@dataclass
class ReducedOperators:
    """Projected operators, convection tensor, and basis arrays.

    Velocity projections use the extended basis [y_v | lifting]; reduced
    state-velocity coefficient vectors carry the parameter values in their
    trailing ``n_lift`` slots.
    """

    y_v: np.ndarray
    y_p: np.ndarray
    y_u: np.ndarray
    lifting: np.ndarray
    a: np.ndarray  # extended x extended
    m: np.ndarray
    b: np.ndarray  # pressure x extended
    c: np.ndarray  # extended x control
    n_ctrl: np.ndarray
    h: np.ndarray  # extended: Y^T M v_o
    j_const: float  # 1/2 v_o^T M v_o
    alpha: float
    equation: str
    domain_lo: np.ndarray
    domain_hi: np.ndarray
    tensor: np.ndarray | None = None  # extended^3 convection trilinear values
    training_parameters: np.ndarray | None = None
    eigenvalues: dict | None = None
    # derived once on first objective evaluation: reduced coefficients of the
    # M-orthogonal target projection and the squared out-of-span remainder
    g_target: np.ndarray | None = None
    j_perp: float | None = None

    @property
    def n_velocity_modes(self):
        return self.y_v.shape[1]

    @property
    def n_lift(self):
        return self.lifting.shape[1]

    @property
    def n_extended(self):
        return self.y_v.shape[1] + self.lifting.shape[1]

    def dimension(self):
        """Reduced system size: velocity + pressure blocks twice, control once."""
        return 2 * self.y_v.shape[1] + 2 * self.y_p.shape[1] + self.y_u.shape[1]

    def check_mu(self, mu):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        if mu.shape[0] != self.n_lift:
            raise DimensionMismatch(
                f"expected {self.n_lift} parameter(s), got {mu.shape[0]}"
            )
        if np.any(mu < self.domain_lo) or np.any(mu > self.domain_hi):
            raise ParameterOutOfDomain(f"mu={mu} outside training domain")
        return mu


def project_operators(model, basis, with_tensor=None):
    """Galerkin projection of every operator onto the aggregated spaces."""
    ops = model.operators
    cfg = model.config
    y_ext = np.column_stack([basis.y_v, basis.lifting])
    a = y_ext.T @ (ops.A @ y_ext)
    m = y_ext.T @ (ops.M @ y_ext)
    b = basis.y_p.T @ np.asarray(ops.B @ y_ext)
    c = y_ext.T @ (ops.C @ basis.y_u)
    n_ctrl = basis.y_u.T @ (ops.N_c @ basis.y_u)
    h = y_ext.T @ (ops.M @ model.target)
    j_const = float(0.5 * model.target @ (ops.M @ model.target))
    if with_tensor is None:
        with_tensor = cfg.equation == "navier-stokes"
    tensor = None
    if with_tensor:
        n_ext = y_ext.shape[1]
        tensor = np.empty((n_ext, n_ext, n_ext))
        for j in range(n_ext):
            ej = model.kernel.state_matrix(y_ext[:, j])
            tensor[:, j, :] = y_ext.T @ (ej @ y_ext)
    lo = np.array([cfg.domain[t][0] for t in model.inlet_tags])
    hi = np.array([cfg.domain[t][1] for t in model.inlet_tags])
    return ReducedOperators(
        y_v=basis.y_v,
        y_p=basis.y_p,
        y_u=basis.y_u,
        lifting=basis.lifting,
        a=a,
        m=m,
        b=b,
        c=c,
        n_ctrl=n_ctrl,
        h=h,
        j_const=j_const,
        alpha=cfg.alpha,
        equation=cfg.equation,
        domain_lo=lo,
        domain_hi=hi,
        tensor=tensor,
        eigenvalues={f: basis.eigenvalues[f].copy() for f in FIELDS},
    )


def reduced_inf_sup(ops):
    """Smallest singular value of the reduced divergence block.

    The homogeneous velocity columns are X_v-orthonormal and the pressure
    columns X_p-orthonormal, so the generalized eigenproblem collapses to the
    ordinary one for B_N B_N^T.
    """
    b_hom = ops.b[:, : ops.n_velocity_modes]
    eig = numerics.symmetric_eig(b_hom @ b_hom.T)
    return float(np.sqrt(max(eig.eigenvalues[-1], 0.0)))


@dataclass
class ReducedSolution:
    """Reduced coefficients with optional lifted full-order fields."""

    mu: np.ndarray
    v_N: np.ndarray  # homogeneous velocity coefficients (no lifting slots)
    p_N: np.ndarray
    u_N: np.ndarray
    w_N: np.ndarray
    q_N: np.ndarray
    objective: float
    newton_iterations: int
    v: np.ndarray | None = None
    p: np.ndarray | None = None
    u: np.ndarray | None = None
    w: np.ndarray | None = None
    q: np.ndarray | None = None


def _reduced_objective(ops, v_ext, u_n):
    """Tracking functional from reduced coefficients alone.

    Uses the completed-square form 1/2 |v - Pv_o|_M^2 + 1/2 |v_o - Pv_o|_M^2
    (P = M-orthogonal projection onto the reduced velocity span), which avoids
    the catastrophic cancellation of 1/2 v M v - h v + const near the optimum.
    """
    if ops.g_target is None:
        ops.g_target = np.linalg.solve(ops.m, ops.h)
        ops.j_perp = max(ops.j_const - 0.5 * ops.g_target @ (ops.m @ ops.g_target), 0.0)
    d = v_ext - ops.g_target
    return float(
        0.5 * d @ (ops.m @ d) + ops.j_perp
        + 0.5 * ops.alpha * u_n @ (ops.n_ctrl @ u_n)
    )


def _reduced_system(ops, mu, x, conv):
    """Residual and Jacobian of the reduced optimality system at ``x``.

    ``conv`` supplies the convection contributions; it is either the
    precomputed tensor contraction or the full-order reassembly closure, and
    is None for Stokes.
    """
    nv, np_, nu = ops.n_velocity_modes, ops.y_p.shape[1], ops.y_u.shape[1]
    sv = slice(0, nv)
    sp_ = slice(nv, nv + np_)
    su = slice(nv + np_, nv + np_ + nu)
    sw = slice(nv + np_ + nu, 2 * nv + np_ + nu)
    sq = slice(2 * nv + np_ + nu, 2 * nv + 2 * np_ + nu)
    v_ext = np.concatenate([x[sv], mu])
    w_ext = np.concatenate([x[sw], np.zeros(ops.n_lift)])
    u_n = x[su]
    r_v = (ops.m @ v_ext - ops.h + ops.a @ w_ext)[:nv] + ops.b.T[:nv] @ x[sq]
    r_p = ops.b @ w_ext
    r_u = ops.alpha * (ops.n_ctrl @ u_n) + ops.c.T @ w_ext
    r_w = (ops.a @ v_ext)[:nv] + ops.b.T[:nv] @ x[sp_] + (ops.c @ u_n)[:nv]
    r_q = ops.b @ v_ext
    n = 2 * nv + 2 * np_ + nu
    jac = np.zeros((n, n))
    jac[sv, sv] = ops.m[:nv, :nv]
    jac[sv, sw] = ops.a[:nv, :nv]
    jac[sv, sq] = ops.b.T[:nv]
    jac[sp_, sw] = ops.b[:, :nv]
    jac[su, su] = ops.alpha * ops.n_ctrl
    jac[su, sw] = ops.c.T[:, :nv]
    jac[sw, sv] = ops.a[:nv, :nv]
    jac[sw, sp_] = ops.b.T[:nv]
    jac[sw, su] = ops.c[:nv]
    jac[sq, sv] = ops.b[:, :nv]
    if conv is not None:
        cv, cw, d_vv, d_vw, d_wv = conv(v_ext, w_ext)
        r_v += cv[:nv]
        r_w += cw[:nv]
        jac[sv, sv] += d_vv[:nv, :nv]
        jac[sv, sw] += d_vw[:nv, :nv]
        jac[sw, sv] += d_wv[:nv, :nv]
    res = np.concatenate([r_v, r_p, r_u, r_w, r_q])
    return res, jac, (v_ext, u_n)


def _tensor_convection(ops):
    t = ops.tensor

    def conv(v_ext, w_ext):
        gw = np.einsum("gab,g->ab", t, w_ext)  # e(., ., w) pairings
        fv = np.einsum("gab,b->ga", t, v_ext)  # e(y_i, v, .) with i = a
        ev = np.einsum("gab,a->gb", t, v_ext)  # e(v, y_i, .) with i = b
        cv = fv.T @ w_ext + ev.T @ w_ext
        cw = np.einsum("iab,a,b->i", t, v_ext, v_ext)
        d_vv = gw + gw.T
        d_vw = (fv + ev).T
        d_wv = np.einsum("iab,a->ib", t, v_ext) + np.einsum("iab,b->ia", t, v_ext)
        return cv, cw, d_vv, d_vw, d_wv

    return conv


def _reassembled_convection(ops, model):
    """Compatibility route: project freshly assembled full-order convection."""
    y_ext = np.column_stack([ops.y_v, ops.lifting])

    def conv(v_ext, w_ext):
        v_full = y_ext @ v_ext
        w_full = y_ext @ w_ext
        e_mat = model.kernel.state_matrix(v_full)
        f_mat = model.kernel.first_slot_matrix(v_full)
        g_mat = model.kernel.test_slot_matrix(w_full)
        cv = y_ext.T @ (g_mat @ v_full + e_mat.T @ w_full)
        cw = y_ext.T @ (e_mat @ v_full)
        d_vv = y_ext.T @ ((g_mat + g_mat.T) @ y_ext)
        d_wv = y_ext.T @ ((e_mat + f_mat) @ y_ext)
        return cv, cw, d_vv, d_wv.T, d_wv

    return conv


def solve_reduced_coefficients(
    ops, mu, mode="tensor", model=None, tol_rel=1e-11, tol_abs=1e-13, max_iter=30
):
    """Dense reduced KKT solve; returns (coefficients, objective, iterations)."""
    mu = ops.check_mu(mu)
    n = ops.dimension()
    x = np.zeros(n)
    if ops.equation == "stokes":
        res, jac, _ = _reduced_system(ops, mu, x, None)
        x = np.linalg.solve(jac, -res)
        _, _, (v_ext, u_n) = _reduced_system(ops, mu, x, None)
        return x, _reduced_objective(ops, v_ext, u_n), 0
    if mode == "tensor":
        if ops.tensor is None:
            raise MissingArtifact("reduced convection tensor not available")
        conv = _tensor_convection(ops)
    elif mode == "reassemble":
        if model is None:
            raise MissingArtifact("reassembly mode needs the full-order model")
        conv = _reassembled_convection(ops, model)
    else:
        raise DimensionMismatch(f"unknown online mode {mode!r}")
    res, jac, _ = _reduced_system(ops, mu, x, conv)
    norm0 = max(np.linalg.norm(res), tol_abs)
    prev, growth = norm0, 0
    for it in range(1, max_iter + 1):
        x = x + np.linalg.solve(jac, -res)
        res, jac, (v_ext, u_n) = _reduced_system(ops, mu, x, conv)
        norm = np.linalg.norm(res)
        if norm <= tol_rel * norm0 or norm <= tol_abs:
            return x, _reduced_objective(ops, v_ext, u_n), it
        growth = growth + 1 if norm > prev else 0
        if growth >= 3:
            raise NewtonDiverged(f"reduced residual grew 3 times (now {norm:.3e})")
        prev = norm
    raise NewtonDiverged(f"reduced Newton: no convergence in {max_iter} iterations")


def _unpack(ops, x):
    nv, np_, nu = ops.n_velocity_modes, ops.y_p.shape[1], ops.y_u.shape[1]
    o = np.cumsum([nv, np_, nu, nv, np_])
    return x[: o[0]], x[o[0] : o[1]], x[o[1] : o[2]], x[o[2] : o[3]], x[o[3] :]


def solve_reduced(ops, mu, mode="tensor", model=None, lift=True):
    """Online reduced solve, optionally lifted back to full-order coefficients."""
    mu = ops.check_mu(mu)
    x, objective, iters = solve_reduced_coefficients(ops, mu, mode=mode, model=model)
    v_n, p_n, u_n, w_n, q_n = _unpack(ops, x)
    sol = ReducedSolution(
        mu=mu, v_N=v_n, p_N=p_n, u_N=u_n, w_N=w_n, q_N=q_n,
        objective=objective, newton_iterations=iters,
    )
    if lift:
        sol.v = ops.y_v @ v_n + ops.lifting @ mu
        sol.p = ops.y_p @ p_n
        sol.u = ops.y_u @ u_n
        sol.w = ops.y_v @ w_n
        sol.q = ops.y_p @ q_n
    return sol


@dataclass
class ErrorReport:
    """X-norm discrepancies between full-order and reduced solutions."""

    e_v: float
    e_p: float
    e_u: float
    e_w: float
    e_q: float
    e_state: float
    e_adjoint: float
    e_total: float
    e_total_rel: float
    e_objective: float
    e_state_rel: float = 0.0
    e_adjoint_rel: float = 0.0
    e_control_rel: float = 0.0


def compute_errors(full, reduced, operators):
    """Per-field, combined and relative errors of a lifted reduced solution."""

    def xnorm(vec, mat):
        return float(np.sqrt(max(vec @ (mat @ vec), 0.0)))

    pairs = {
        "v": operators.X_v, "p": operators.X_p, "u": operators.N_c,
        "w": operators.X_v, "q": operators.X_p,
    }
    diffs, refs = {}, {}
    for f, mat in pairs.items():
        a = getattr(full, f)
        b = getattr(reduced, f)
        if b is None or a.shape != b.shape:
            raise DimensionMismatch(f"field {f}: incompatible or missing vectors")
        diffs[f] = xnorm(a - b, mat)
        refs[f] = xnorm(a, mat)
    e_s = np.hypot(diffs["v"], diffs["p"])
    e_z = np.hypot(diffs["w"], diffs["q"])
    e_t = float(np.sqrt(e_s**2 + e_z**2 + diffs["u"] ** 2))
    ref_s = np.hypot(refs["v"], refs["p"])
    ref_z = np.hypot(refs["w"], refs["q"])
    ref_t = float(np.sqrt(ref_s**2 + ref_z**2 + refs["u"] ** 2))
    return ErrorReport(
        e_v=diffs["v"], e_p=diffs["p"], e_u=diffs["u"], e_w=diffs["w"], e_q=diffs["q"],
        e_state=float(e_s), e_adjoint=float(e_z), e_total=e_t,
        e_total_rel=e_t / ref_t if ref_t > 0 else 0.0,
        e_objective=abs(full.objective - reduced.objective),
        e_state_rel=float(e_s / ref_s) if ref_s > 0 else 0.0,
        e_adjoint_rel=float(e_z / ref_z) if ref_z > 0 else 0.0,
        e_control_rel=float(diffs["u"] / refs["u"]) if refs["u"] > 0 else 0.0,
    )


# -- offline artifact ---------------------------------------------------------

_MAGIC = b"ocrom-rb 1\n"

_ARRAY_FIELDS = (
    "y_v", "y_p", "y_u", "lifting", "a", "m", "b", "c", "n_ctrl", "h",
    "domain_lo", "domain_hi",
)


def save_artifact(path, ops):
    """Write the reduced model to a single versioned binary file."""
    arrays = {}
    for name in _ARRAY_FIELDS:
        arrays[name] = np.ascontiguousarray(getattr(ops, name), dtype=float)
    if ops.tensor is not None:
        arrays["tensor"] = np.ascontiguousarray(ops.tensor, dtype=float)
    if ops.training_parameters is not None:
        arrays["training_parameters"] = np.ascontiguousarray(
            ops.training_parameters, dtype=float
        )
    if ops.eigenvalues:
        for f in FIELDS:
            arrays[f"eigenvalues_{f}"] = np.ascontiguousarray(
                ops.eigenvalues[f], dtype=float
            )
    index = {
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        "scalars": {
            "alpha": ops.alpha,
            "j_const": ops.j_const,
            "equation": ops.equation,
        },
    }
    blob = json.dumps(index, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for k in arrays:
                fh.write(arrays[k].astype("<f8").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write artifact {path}: {exc}") from exc


def load_artifact(path):
    """Read an offline artifact back into ReducedOperators."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise MissingArtifact(f"cannot read artifact {path}: {exc}") from exc
    if not data.startswith(_MAGIC):
        raise ParseError(f"{path}: not an 'ocrom-rb 1' artifact")
    buf = io.BytesIO(data[len(_MAGIC) :])
    (blob_len,) = struct.unpack("<Q", buf.read(8))
    index = json.loads(buf.read(blob_len).decode())
    arrays = {}
    for rec in index["arrays"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(8 * count)
        if len(raw) != 8 * count:
            raise ParseError(f"{path}: truncated payload for array {rec['name']}")
        arrays[rec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    scal = index["scalars"]
    eigenvalues = None
    if f"eigenvalues_v" in arrays:
        eigenvalues = {f: arrays[f"eigenvalues_{f}"] for f in FIELDS}
    return ReducedOperators(
        y_v=arrays["y_v"], y_p=arrays["y_p"], y_u=arrays["y_u"],
        lifting=arrays["lifting"], a=arrays["a"], m=arrays["m"], b=arrays["b"],
        c=arrays["c"], n_ctrl=arrays["n_ctrl"], h=arrays["h"],
        j_const=scal["j_const"], alpha=scal["alpha"], equation=scal["equation"],
        domain_lo=arrays["domain_lo"], domain_hi=arrays["domain_hi"],
        tensor=arrays.get("tensor"),
        training_parameters=arrays.get("training_parameters"),
        eigenvalues=eigenvalues,
    )


def build_offline(model, training, n_max, eps_tol=1e-4, with_tensor=None, enrich=True):
    """Full offline phase: snapshots, POD, supremizers, aggregation, projection."""
    snapshots = collect_snapshots(model, training)
    basis = pod_compress(snapshots, inner_products_of(model), n_max, eps_tol)
    basis = build_reduced_spaces(model, basis, enrich=enrich)
    ops = project_operators(model, basis, with_tensor=with_tensor)
    ops.training_parameters = snapshots.parameters
    return snapshots, basis, ops
