"""Full-order parameterized optimal flow control.

Solves the coupled first-order optimality system of the tracking problem

    min 1/2 ||v - v_o||^2_{L2(Omega)} + alpha/2 ||u||^2_{L2(Gamma_o)}

subject to Stokes or steady Navier-Stokes flow with parabolic Dirichlet
inflow (scaled by a per-inlet Reynolds number), no-slip walls, and the
control acting as Neumann data on the outlets.  Inflow data is absorbed by
per-inlet lifting fields (each a divergence-free auxiliary Stokes solve), so
unknowns live in the homogeneous velocity space.

The monolithic unknown ordering is (v, p, u, w, q); block rows follow the
same order as the assembled optimality matrix: adjoint momentum, adjoint
continuity, optimality, state momentum, state continuity.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import numerics
from .errors import (
    DimensionMismatch,
    NewtonDiverged,
    ParameterOutOfDomain,
    UnknownTag,
)
from .fem import ConvectionKernel, assemble_operators, build_spaces
from .mesh import centerline_query


@dataclass
class OcpConfig:
    """Physical and algorithmic settings of the control problem."""

    equation: str = "stokes"  # "stokes" | "navier-stokes"
    viscosity: float = 3.6  # mm^2/s
    v_const: float = 350.0  # mm/s
    alpha: float = 1e-2
    domain: dict = field(default_factory=dict)  # inlet tag -> (Re_min, Re_max)
    newton_tol_rel: float = 1e-9
    newton_tol_abs: float = 1e-12
    newton_max_iter: int = 25

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise DimensionMismatch("penalization alpha must be positive")
        if self.viscosity <= 0.0:
            raise DimensionMismatch("viscosity must be positive")
        if self.equation not in ("stokes", "navier-stokes"):
            raise DimensionMismatch(f"unknown equation kind {self.equation!r}")
        for tag, (lo, hi) in self.domain.items():
            if lo > hi:
                raise DimensionMismatch(f"domain interval for tag {tag} reversed")


@dataclass
class OcpSolution:
    """Coefficient vectors of one optimality-system solve (full dof vectors)."""

    mu: np.ndarray
    v: np.ndarray  # state velocity incl. lifting, mm/s
    p: np.ndarray
    u: np.ndarray
    w: np.ndarray
    q: np.ndarray
    v_hom: np.ndarray  # state velocity with the lifting removed
    objective: float
    kkt_residual: float
    newton_iterations: int


def build_target(mesh, spaces, v_const):
    """Parabolic target velocity along the centerlines, interpolated at dofs.

    v_o(x) = v_const (1 - r^2/R^2) t_c, clamped to zero outside the lumen.
    """
    coords = spaces.entity_coords
    v_o = np.zeros(spaces.n_velocity)
    for k, x in enumerate(coords):
        r, R, tau, _ = centerline_query(mesh, x)
        factor = max(0.0, 1.0 - (r / R) ** 2)
        v_o[3 * k : 3 * k + 3] = v_const * factor * tau
    return v_o


def inlet_geometry(mesh, tag):
    """Center point, outward normal and radius of an inlet boundary."""
    if tag not in mesh.inlet_tags():
        raise UnknownTag(f"tag {tag} is not an inlet of this mesh")
    sel = mesh.boundary_tags == tag
    centroid = mesh.nodes[mesh.boundary_tris[sel]].mean(axis=(0, 1))
    best = None
    for cl in mesh.centerlines:
        d = np.linalg.norm(cl.points[0] - centroid)
        if best is None or d < best[0]:
            tangent = cl.points[1] - cl.points[0]
            tangent = tangent / np.linalg.norm(tangent)
            best = (d, cl.points[0], -tangent, float(cl.radii[0]))
    _, center, normal, radius = best
    return center, normal, radius


def build_inflow(mesh, spaces, tag, reynolds, viscosity):
    """Parabolic inlet Dirichlet data as a full-length velocity vector.

    v_in = -(eta Re / R_in) (1 - r^2 / R_in^2) n_in with r measured from the
    inlet center; entries are nonzero only on the requested inlet's dofs.
    """
    center, normal, radius = inlet_geometry(mesh, tag)
    g = np.zeros(spaces.n_velocity)
    dofs = spaces.inlet_dofs[tag]
    ents = np.unique(dofs // 3)
    peak = viscosity * reynolds / radius
    for e in ents:
        x = spaces.entity_coords[e]
        r2 = np.sum((x - center) ** 2) - ((x - center) @ normal) ** 2
        factor = max(0.0, 1.0 - r2 / radius**2)
        g[3 * e : 3 * e + 3] = -peak * factor * normal
    return g


def evaluate_objective(v, u, target, operators, alpha):
    """J = 1/2 (v - v_o)^T M (v - v_o) + alpha/2 u^T N_c u."""
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    if v.shape[0] != operators.M.shape[0] or u.shape[0] != operators.N_c.shape[0]:
        raise DimensionMismatch("objective input lengths do not match operators")
    dv = v - target
    return float(0.5 * dv @ (operators.M @ dv) + 0.5 * alpha * u @ (operators.N_c @ u))


class FullOrderModel:
    """Mesh, spaces, operators, target and liftings bundled for many-query use."""

    def __init__(self, mesh, config):
        self.mesh = mesh
        self.config = config
        self.spaces = build_spaces(mesh)
        self.operators = assemble_operators(self.spaces, config.viscosity)
        self.kernel = ConvectionKernel(self.spaces)
        self.target = build_target(mesh, self.spaces, config.v_const)
        self.inlet_tags = sorted(mesh.inlet_tags())
        if not config.domain:
            config.domain = {tag: (-np.inf, np.inf) for tag in self.inlet_tags}
        if sorted(config.domain) != self.inlet_tags:
            raise UnknownTag(
                f"domain tags {sorted(config.domain)} != mesh inlets {self.inlet_tags}"
            )
        self.free = self.spaces.free_velocity
        self.constrained = self.spaces.constrained_velocity
        # Pressure vertices whose whole velocity stencil is Dirichlet (corner
        # tets at rims/seams) have empty divergence rows on the free space and
        # would make every saddle system singular; pin them to zero instead.
        b_free = abs(self.operators.B[:, self.free]).max(axis=1).toarray().ravel()
        self.locked_pressure = np.where(b_free <= 1e-14 * max(b_free.max(), 1.0))[0]
        pin = np.zeros(self.spaces.n_pressure)
        pin[self.locked_pressure] = 1.0
        self._pressure_pin = sp.diags(pin).tocsr()
        self.liftings = [self._lifting(tag) for tag in self.inlet_tags]
        self._stokes_lu = None
        self._stokes_matrix = None

    # -- parameter handling ------------------------------------------------

    def check_mu(self, mu):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        if mu.shape[0] != len(self.inlet_tags):
            raise DimensionMismatch(
                f"expected {len(self.inlet_tags)} parameter(s), got {mu.shape[0]}"
            )
        for tag, m in zip(self.inlet_tags, mu):
            lo, hi = self.config.domain[tag]
            if not (lo <= m <= hi):
                raise ParameterOutOfDomain(f"Re={m:g} outside [{lo:g}, {hi:g}] (inlet {tag})")
        return mu

    def lifting_field(self, mu):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        vL = np.zeros(self.spaces.n_velocity)
        for m, lift in zip(mu, self.liftings):
            vL += m * lift
        return vL

    def _lifting(self, tag):
        """Divergence-free lifting of the unit-Reynolds inflow on one inlet."""
        g = build_inflow(self.mesh, self.spaces, tag, 1.0, self.config.viscosity)
        ops = self.operators
        f, c = self.free, self.constrained
        A_ff = ops.A[f][:, f]
        A_fc = ops.A[f][:, c]
        B_f = ops.B[:, f]
        B_c = ops.B[:, c]
        K = sp.bmat([[A_ff, B_f.T], [B_f, self._pressure_pin]], format="csc")
        r_cont = -(B_c @ g[c])
        r_cont[self.locked_pressure] = 0.0
        rhs = np.concatenate([-(A_fc @ g[c]), r_cont])
        sol = numerics.sparse_lu_solve(K, rhs)
        lift = g.copy()
        lift[f] = sol[: f.shape[0]]
        return lift

    # -- KKT assembly --------------------------------------------------------

    def _blocks(self, linearization=None):
        """Free-restricted Jacobian blocks of the optimality system.

        ``linearization`` is a pair (v_total, w_total) of full velocity
        vectors, or None for the Stokes system.
        """
        ops = self.operators
        f = self.free
        alpha = self.config.alpha
        A_ff = ops.A[f][:, f]
        M_ff = ops.M[f][:, f]
        B_f = ops.B[:, f]
        C_f = ops.C[f]
        if linearization is None:
            J11 = M_ff
            J14 = A_ff
            J41 = A_ff
        else:
            v_t, w_t = linearization
            E = self.kernel.state_matrix(v_t)
            F = self.kernel.first_slot_matrix(v_t)
            G = self.kernel.test_slot_matrix(w_t)
            J11 = M_ff + (G + G.T)[f][:, f]
            J41 = (ops.A + E + F)[f][:, f]
            J14 = J41.T
        pin = self._pressure_pin
        K = sp.bmat(
            [
                [J11, None, None, J14, B_f.T],
                [None, pin, None, B_f, None],
                [None, None, alpha * ops.N_c, C_f.T, None],
                [J41, B_f.T, C_f, None, None],
                [B_f, None, None, None, pin],
            ],
            format="csc",
        )
        return K

    def _stokes_rhs(self, mu):
        ops = self.operators
        f = self.free
        vL = self.lifting_field(mu)
        nf, npr, nu = f.shape[0], self.spaces.n_pressure, self.spaces.n_control
        rhs = np.zeros(2 * nf + 2 * npr + nu)
        rhs[:nf] = (ops.M @ (self.target - vL))[f]
        rhs[nf + npr + nu : 2 * nf + npr + nu] = -(ops.A @ vL)[f]
        r_cont = -(ops.B @ vL)
        r_cont[self.locked_pressure] = 0.0
        rhs[2 * nf + npr + nu :] = r_cont
        return rhs

    def assemble_kkt(self, mu, linearization=None):
        """Optimality matrix and right-hand side at parameter ``mu``.

        For Navier-Stokes pass the linearization point (v_total, w_total);
        the convection operators are inserted there and the rhs keeps its
        Stokes form (the Newton driver works with residuals directly).
        """
        self.check_mu(mu)
        return self._blocks(linearization), self._stokes_rhs(mu)

    # -- residuals -----------------------------------------------------------

    def _split(self, x):
        nf, npr, nu = self.free.shape[0], self.spaces.n_pressure, self.spaces.n_control
        o = np.cumsum([nf, npr, nu, nf, npr])
        return x[: o[0]], x[o[0] : o[1]], x[o[1] : o[2]], x[o[2] : o[3]], x[o[3] :]

    def _join(self, *parts):
        return np.concatenate(parts)

    def _expand(self, free_values):
        full = np.zeros(self.spaces.n_velocity)
        full[self.free] = free_values
        return full

    def kkt_residual(self, x, mu, nonlinear):
        """Residual of the coupled optimality system at unknown vector ``x``."""
        ops = self.operators
        f = self.free
        alpha = self.config.alpha
        v_f, p, u, w_f, q = self._split(x)
        vL = self.lifting_field(mu)
        v_t = self._expand(v_f) + vL
        w_t = self._expand(w_f)
        r_v = (ops.M @ (v_t - self.target) + ops.A @ w_t + ops.B.T @ q)[f]
        r_w = (ops.A @ v_t + ops.B.T @ p)[f] + (ops.C @ u)[f]
        if nonlinear:
            E = self.kernel.state_matrix(v_t)
            G = self.kernel.test_slot_matrix(w_t)
            r_v = r_v + (G @ v_t + E.T @ w_t)[f]
            r_w = r_w + (E @ v_t)[f]
        r_p = ops.B @ w_t
        r_u = alpha * (ops.N_c @ u) + ops.C.T @ w_t
        r_q = ops.B @ v_t
        # pinned rows replace the (vacuous) continuity constraint there
        r_p[self.locked_pressure] = p[self.locked_pressure]
        r_q[self.locked_pressure] = q[self.locked_pressure]
        return self._join(r_v, r_p, r_u, r_w, r_q)

    # -- solvers ---------------------------------------------------------

    def _pack_solution(self, x, mu, iters):
        v_f, p, u, w_f, q = self._split(x)
        vL = self.lifting_field(mu)
        v_hom = self._expand(v_f)
        v = v_hom + vL
        w = self._expand(w_f)
        J = evaluate_objective(v, u, self.target, self.operators, self.config.alpha)
        res = self.kkt_residual(x, mu, self.config.equation == "navier-stokes")
        scale = np.linalg.norm(self._stokes_rhs(mu)) or 1.0
        return OcpSolution(
            mu=np.atleast_1d(np.asarray(mu, dtype=float)),
            v=v,
            p=p,
            u=u,
            w=w,
            q=q,
            v_hom=v_hom,
            objective=J,
            kkt_residual=float(np.linalg.norm(res) / scale),
            newton_iterations=iters,
        )

    def solve_stokes_ocp(self, mu):
        """One-shot sparse LU solve of the Stokes optimality system."""
        mu = self.check_mu(mu)
        if self._stokes_lu is None:
            self._stokes_matrix = self._blocks(None)
            self._stokes_lu = numerics.factorize(self._stokes_matrix)
        x = self._stokes_lu.solve(self._stokes_rhs(mu))
        return self._pack_solution(x, mu, 0)

    def solve_navier_stokes_ocp(self, mu):
        """Newton iteration on the coupled optimality system, Stokes warm start."""
        mu = self.check_mu(mu)
        cfg = self.config
        x = np.concatenate(
            [
                (s := self.solve_stokes_ocp(mu)).v_hom[self.free],
                s.p,
                s.u,
                s.w[self.free],
                s.q,
            ]
        )
        vL = self.lifting_field(mu)
        res = self.kkt_residual(x, mu, True)
        norm0 = np.linalg.norm(res)
        if norm0 <= cfg.newton_tol_abs:
            return self._pack_solution(x, mu, 0)
        growth = 0
        prev = norm0
        for it in range(1, cfg.newton_max_iter + 1):
            v_t = self._expand(self._split(x)[0]) + vL
            w_t = self._expand(self._split(x)[3])
            K = self._blocks((v_t, w_t))
            dx = numerics.sparse_lu_solve(K, -res)
            x = x + dx
            res = self.kkt_residual(x, mu, True)
            norm = np.linalg.norm(res)
            if norm <= cfg.newton_tol_rel * norm0 or norm <= cfg.newton_tol_abs:
                return self._pack_solution(x, mu, it)
            growth = growth + 1 if norm > prev else 0
            if growth >= 3:
                raise NewtonDiverged(
                    f"residual grew for 3 consecutive iterations (now {norm:.3e})"
                )
            prev = norm
        raise NewtonDiverged(f"no convergence in {cfg.newton_max_iter} iterations")

    def solve_ocp(self, mu):
        if self.config.equation == "navier-stokes":
            return self.solve_navier_stokes_ocp(mu)
        return self.solve_stokes_ocp(mu)

    # -- state / adjoint sub-solves (gradient checks, feasible points) -----

    def solve_state(self, mu, u):
        """Flow solve at fixed control; returns (v_total, p)."""
        mu = self.check_mu(mu)
        ops = self.operators
        f = self.free
        vL = self.lifting_field(mu)
        nf = f.shape[0]
        B_f = ops.B[:, f]
        pin = self._pressure_pin
        locked = self.locked_pressure
        r_cont = -(ops.B @ vL)
        r_cont[locked] = 0.0
        rhs = np.concatenate([-(ops.A @ vL + ops.C @ u)[f], r_cont])
        if self.config.equation == "stokes":
            K = sp.bmat([[ops.A[f][:, f], B_f.T], [B_f, pin]], format="csc")
            sol = numerics.sparse_lu_solve(K, rhs)
            return self._expand(sol[:nf]) + vL, sol[nf:]
        # Newton on the state equations alone
        v_f = np.zeros(nf)
        p = np.zeros(self.spaces.n_pressure)
        K0 = sp.bmat([[ops.A[f][:, f], B_f.T], [B_f, pin]], format="csc")
        sol = numerics.sparse_lu_solve(K0, rhs)
        v_f, p = sol[:nf], sol[nf:]
        for it in range(self.config.newton_max_iter):
            v_t = self._expand(v_f) + vL
            E = self.kernel.state_matrix(v_t)
            r1 = (ops.A @ v_t + E @ v_t + ops.B.T @ p + ops.C @ u)[f]
            r2 = ops.B @ v_t
            r2[locked] = p[locked]
            res = np.concatenate([r1, r2])
            if np.linalg.norm(res) <= max(
                self.config.newton_tol_rel * np.linalg.norm(rhs),
                self.config.newton_tol_abs,
            ):
                return v_t, p
            F = self.kernel.first_slot_matrix(v_t)
            K = sp.bmat(
                [[(ops.A + E + F)[f][:, f], B_f.T], [B_f, pin]], format="csc"
            )
            dx = numerics.sparse_lu_solve(K, -res)
            v_f = v_f + dx[:nf]
            p = p + dx[nf:]
        raise NewtonDiverged("state solve did not converge")

    def solve_adjoint(self, mu, v_total):
        """Adjoint solve at a given state; returns (w_total, q)."""
        self.check_mu(mu)
        ops = self.operators
        f = self.free
        nf = f.shape[0]
        B_f = ops.B[:, f]
        rhs = np.concatenate([-(ops.M @ (v_total - self.target))[f],
                              np.zeros(self.spaces.n_pressure)])
        Aw = ops.A
        if self.config.equation == "navier-stokes":
            E = self.kernel.state_matrix(v_total)
            F = self.kernel.first_slot_matrix(v_total)
            Aw = ops.A + (E + F).T
        K = sp.bmat([[Aw[f][:, f], B_f.T], [B_f, self._pressure_pin]], format="csc")
        sol = numerics.sparse_lu_solve(K, rhs)
        return self._expand(sol[:nf]), sol[nf:]

    def reduced_gradient(self, mu, u):
        """Gradient of J(u) via one state and one adjoint solve."""
        v_t, _ = self.solve_state(mu, u)
        w_t, _ = self.solve_adjoint(mu, v_t)
        return self.config.alpha * (self.operators.N_c @ u) + self.operators.C.T @ w_t

    def objective_of_control(self, mu, u):
        v_t, _ = self.solve_state(mu, u)
        return evaluate_objective(v_t, u, self.target, self.operators, self.config.alpha)
