"""Taylor-Hood finite elements on tetrahedral meshes.

Velocity and adjoint velocity are vector P2, pressure and adjoint pressure
scalar P1, boundary control vector P2 traces on the outlet triangles.
Scalar dofs are ordered vertices first (by node id) then edges (by sorted
node pair); a vector dof is ``3 * entity + component``.

All volume integrals use a tetrahedral rule exact to degree 4 and surface
integrals a triangle rule exact to degree 4, covering every form assembled
here including the trilinear convection terms.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh

from . import numerics
from .errors import DimensionMismatch, SolverFailure
from .mesh import FIRST_INLET_TAG, FIRST_OUTLET_TAG, WALL_TAG
from .quadrature import tet_rule, tri_rule

_TET_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
_TRI_EDGES = [(0, 1), (0, 2), (1, 2)]
_CHUNK = 1024


# ---------------------------------------------------------------------------
# reference elements


def _p2_tet(points):
    """P2 shape values and barycentric derivatives at quadrature points."""
    x, y, z = points.T
    lam = np.stack([1.0 - x - y - z, x, y, z], axis=1)  # (nq, 4)
    nq = len(points)
    N = np.empty((nq, 10))
    dNdl = np.zeros((nq, 10, 4))
    for i in range(4):
        N[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
        dNdl[:, i, i] = 4.0 * lam[:, i] - 1.0
    for k, (i, j) in enumerate(_TET_EDGES):
        N[:, 4 + k] = 4.0 * lam[:, i] * lam[:, j]
        dNdl[:, 4 + k, i] = 4.0 * lam[:, j]
        dNdl[:, 4 + k, j] = 4.0 * lam[:, i]
    return lam, N, dNdl


def _p2_tri(points):
    x, y = points.T
    lam = np.stack([1.0 - x - y, x, y], axis=1)
    nq = len(points)
    N = np.empty((nq, 6))
    for i in range(3):
        N[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
    for k, (i, j) in enumerate(_TRI_EDGES):
        N[:, 3 + k] = 4.0 * lam[:, i] * lam[:, j]
    return lam, N


_TET_PTS, _TET_WTS = tet_rule(4)
_TET_LAM, _TET_N, _TET_DNDL = _p2_tet(_TET_PTS)
_TRI_PTS, _TRI_WTS = tri_rule(4)
_TRI_LAM, _TRI_N = _p2_tri(_TRI_PTS)


# ---------------------------------------------------------------------------
# function spaces


@dataclass
class FunctionSpaces:
    """Dof maps and Dirichlet sets for the Taylor-Hood + boundary-control pair."""

    mesh: object
    edges: np.ndarray  # (ne, 2) sorted node pairs, lexicographic order
    cells10: np.ndarray  # (m, 10) scalar entity per tet (4 verts, 6 edges)
    entity_coords: np.ndarray  # (n_scalar, 3) vertex coords then edge midpoints
    btri_entities: np.ndarray  # (k, 6) scalar entity per boundary triangle
    control_entities: np.ndarray  # scalar entities on outlet triangles, ascending
    n_vertices: int
    n_scalar: int
    n_velocity: int
    n_pressure: int
    n_control: int
    control_to_velocity: np.ndarray  # (n_control,) velocity dof per control dof
    inlet_dofs: dict  # tag -> velocity dof array
    wall_dofs: np.ndarray
    free_velocity: np.ndarray  # velocity dofs without Dirichlet data
    constrained_velocity: np.ndarray

    def total_dofs(self):
        """Full KKT dimension: v, p, u, w, q."""
        return 2 * (self.n_velocity + self.n_pressure) + self.n_control


def _entity_dofs(entities):
    ent = np.asarray(entities, dtype=np.int64)
    return (3 * ent[:, None] + np.arange(3)[None, :]).ravel()


def build_spaces(mesh):
    """Deterministic Taylor-Hood dof maps over a validated mesh."""
    tets = mesh.tets
    nv = mesh.nodes.shape[0]

    pair_rows = np.concatenate([tets[:, [i, j]] for i, j in _TET_EDGES])
    pair_rows = np.sort(pair_rows, axis=1)
    edges, inverse = np.unique(pair_rows, axis=0, return_inverse=True)
    ne = edges.shape[0]

    m = tets.shape[0]
    cells10 = np.empty((m, 10), dtype=np.int64)
    cells10[:, :4] = tets
    edge_ids = inverse.reshape(6, m).T  # local edge k of element e
    cells10[:, 4:] = nv + edge_ids

    entity_coords = np.vstack(
        [mesh.nodes, 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])]
    )

    edge_index = {(int(a), int(b)): nv + k for k, (a, b) in enumerate(edges)}
    btris = mesh.boundary_tris
    btri_entities = np.empty((btris.shape[0], 6), dtype=np.int64)
    btri_entities[:, :3] = btris
    for k, (i, j) in enumerate(_TRI_EDGES):
        pairs = np.sort(btris[:, [i, j]], axis=1)
        btri_entities[:, 3 + k] = [edge_index[(int(a), int(b))] for a, b in pairs]

    outlet = mesh.boundary_tags >= FIRST_OUTLET_TAG
    control_entities = np.unique(btri_entities[outlet])
    control_to_velocity = _entity_dofs(control_entities)

    inlet_dofs = {}
    for tag in mesh.inlet_tags():
        ents = np.unique(btri_entities[mesh.boundary_tags == tag])
        inlet_dofs[tag] = _entity_dofs(ents)
    wall_ents = np.unique(btri_entities[mesh.boundary_tags == WALL_TAG])
    wall_dofs = _entity_dofs(wall_ents)

    n_scalar = nv + ne
    n_velocity = 3 * n_scalar
    constrained = np.unique(
        np.concatenate([wall_dofs] + list(inlet_dofs.values()))
        if inlet_dofs
        else wall_dofs
    )
    free = np.setdiff1d(np.arange(n_velocity), constrained, assume_unique=False)

    return FunctionSpaces(
        mesh=mesh,
        edges=edges,
        cells10=cells10,
        entity_coords=entity_coords,
        btri_entities=btri_entities,
        control_entities=control_entities,
        n_vertices=nv,
        n_scalar=n_scalar,
        n_velocity=n_velocity,
        n_pressure=nv,
        n_control=3 * control_entities.shape[0],
        control_to_velocity=control_to_velocity,
        inlet_dofs=inlet_dofs,
        wall_dofs=wall_dofs,
        free_velocity=free,
        constrained_velocity=constrained,
    )


# ---------------------------------------------------------------------------
# element geometry


def _tet_geometry(mesh, cells):
    """Gradients of barycentric coordinates and |detJ| per element."""
    p = mesh.nodes[mesh.tets[cells]]
    J = p[:, 1:] - p[:, :1]  # rows: edge vectors
    detJ = np.linalg.det(J)
    Jinv = np.linalg.inv(J)
    gradlam = np.empty((len(cells), 4, 3))
    gradlam[:, 1:] = np.transpose(Jinv, (0, 2, 1))
    gradlam[:, 0] = -gradlam[:, 1:].sum(axis=1)
    return gradlam, np.abs(detJ)


def _chunks(n):
    for s in range(0, n, _CHUNK):
        yield np.arange(s, min(s + _CHUNK, n))


def _grad_shapes(gradlam):
    # (m, nq, 10, 3)
    return np.einsum("qia,mad->mqid", _TET_DNDL, gradlam, optimize=True)


# ---------------------------------------------------------------------------
# operator assembly


@dataclass
class OperatorSet:
    """Assembled parameter-independent matrices (CSR, problem units)."""

    A: sp.csr_matrix  # viscous stiffness, Nv x Nv
    B: sp.csr_matrix  # divergence, Np x Nv
    C: sp.csr_matrix  # control-to-momentum coupling, Nv x Nu
    M: sp.csr_matrix  # velocity mass over the volume, Nv x Nv
    N_c: sp.csr_matrix  # control mass on the outlets, Nu x Nu
    X_v: sp.csr_matrix  # H1 velocity inner product
    X_p: sp.csr_matrix  # L2 pressure inner product
    viscosity: float


def _scatter(rows, cols, vals, shape):
    return sp.coo_matrix(
        (np.asarray(vals).ravel(), (np.asarray(rows).ravel(), np.asarray(cols).ravel())),
        shape=shape,
    ).tocsr()


def assemble_operators(spaces, viscosity):
    """Assemble all bilinear-form matrices of the optimality system."""
    if viscosity <= 0.0:
        raise DimensionMismatch("viscosity must be positive")
    mesh = spaces.mesh
    ns = spaces.n_scalar
    m = mesh.tets.shape[0]

    Krows, Kcols, Kvals = [], [], []
    Mvals = []
    Brows, Bcols, Bvals = [], [], []
    for cells in _chunks(m):
        gradlam, detJ = _tet_geometry(mesh, cells)
        gN = _grad_shapes(gradlam)  # (c, nq, 10, 3)
        wdet = _TET_WTS[None, :] * detJ[:, None]  # (c, nq)
        elK = np.einsum("mq,mqid,mqjd->mij", wdet, gN, gN, optimize=True)
        elM = np.einsum("mq,qi,qj->mij", wdet, _TET_N, _TET_N, optimize=True)
        ent = spaces.cells10[cells]
        Krows.append(np.repeat(ent, 10, axis=1))
        Kcols.append(np.tile(ent, (1, 10)))
        Kvals.append(elK)
        Mvals.append(elM)
        # divergence: rows pressure vertex, cols velocity dof 3*entity+c
        elB = -np.einsum("mq,qk,mqjd->mkjd", wdet, _TET_LAM, gN, optimize=True)  # (c,4,10,3)
        verts = mesh.tets[cells]
        vdofs = 3 * ent[:, None, :, None] + np.arange(3)[None, None, None, :]
        prows = np.broadcast_to(verts[:, :, None, None], elB.shape)
        Brows.append(prows)
        Bcols.append(np.broadcast_to(vdofs, elB.shape))
        Bvals.append(elB)

    K_s = _scatter(np.concatenate([r.ravel() for r in Krows]),
                   np.concatenate([c.ravel() for c in Kcols]),
                   np.concatenate([v.ravel() for v in Kvals]), (ns, ns))
    M_s = _scatter(np.concatenate([r.ravel() for r in Krows]),
                   np.concatenate([c.ravel() for c in Kcols]),
                   np.concatenate([v.ravel() for v in Mvals]), (ns, ns))
    B = _scatter(np.concatenate([r.ravel() for r in Brows]),
                 np.concatenate([c.ravel() for c in Bcols]),
                 np.concatenate([v.ravel() for v in Bvals]),
                 (spaces.n_pressure, spaces.n_velocity))

    I3 = sp.identity(3, format="csr")
    A = viscosity * sp.kron(K_s, I3, format="csr")
    M = sp.kron(M_s, I3, format="csr")
    X_v = sp.kron((K_s + M_s).tocsr(), I3, format="csr")

    # P1 pressure mass
    Pvals = []
    Prows, Pcols = [], []
    for cells in _chunks(m):
        _, detJ = _tet_geometry(mesh, cells)
        wdet = _TET_WTS[None, :] * detJ[:, None]
        elP = np.einsum("mq,qi,qj->mij", wdet, _TET_LAM, _TET_LAM, optimize=True)
        verts = mesh.tets[cells]
        Prows.append(np.repeat(verts, 4, axis=1))
        Pcols.append(np.tile(verts, (1, 4)))
        Pvals.append(elP)
    X_p = _scatter(np.concatenate([r.ravel() for r in Prows]),
                   np.concatenate([c.ravel() for c in Pcols]),
                   np.concatenate([v.ravel() for v in Pvals]),
                   (spaces.n_pressure, spaces.n_pressure))

    # surface mass on outlet triangles
    outlet = mesh.boundary_tags >= FIRST_OUTLET_TAG
    tris = mesh.boundary_tris[outlet]
    ents = spaces.btri_entities[outlet]
    p = mesh.nodes[tris]
    cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    area2 = np.linalg.norm(cross, axis=1)  # |e1 x e2| (twice the area)
    wdet = _TRI_WTS[None, :] * area2[:, None]
    elS = np.einsum("kq,qi,qj->kij", wdet, _TRI_N, _TRI_N)  # scalar 6x6

    ctrl_pos = np.full(ns, -1, dtype=np.int64)
    ctrl_pos[spaces.control_entities] = np.arange(spaces.control_entities.shape[0])
    upos = ctrl_pos[ents]  # (k, 6), all >= 0 by construction

    S_c = _scatter(np.repeat(upos, 6, axis=1), np.tile(upos, (1, 6)), elS,
                   (spaces.n_control // 3, spaces.n_control // 3))
    N_c = sp.kron(S_c, I3, format="csr")
    Cs = _scatter(np.repeat(ents, 6, axis=1), np.tile(upos, (1, 6)), -elS,
                  (ns, spaces.n_control // 3))
    C = sp.kron(Cs, I3, format="csr")

    return OperatorSet(A=A, B=B, C=C, M=M, N_c=N_c, X_v=X_v, X_p=X_p,
                       viscosity=float(viscosity))


# ---------------------------------------------------------------------------
# convection kernel


class ConvectionKernel:
    """Element data for the trilinear form e(a, b, c) = integral (a.grad b).c.

    Exposes the matrices needed by the KKT residual and its Jacobian:

    * ``state_matrix(a)``: entries e(a, phi_j, phi_i) (the advection operator
      linearized in its second slot), block diagonal over components.
    * ``first_slot_matrix(a)``: entries e(phi_j, a, phi_i).
    * ``test_slot_matrix(a)``: entries e(phi_i, phi_j, a).
    """

    def __init__(self, spaces):
        self.spaces = spaces

    def _field_at_qp(self, a, cells, gN):
        ent = self.spaces.cells10[cells]
        coeff = a[(3 * ent[:, :, None] + np.arange(3)).transpose(0, 2, 1)]  # (m,3,10)
        vals = np.einsum("qi,mci->mqc", _TET_N, coeff, optimize=True)  # (m, nq, 3)
        grads = np.einsum("mci,mqid->mqcd", coeff, gN, optimize=True)  # d a_c / d x_d
        return vals, grads

    def _assemble(self, a, which):
        spaces = self.spaces
        if a.shape[0] != spaces.n_velocity:
            raise DimensionMismatch("velocity coefficient length mismatch")
        mesh = spaces.mesh
        ns = spaces.n_scalar
        rows, cols, vals = [], [], []
        scalar = which == "state"
        for cells in _chunks(mesh.tets.shape[0]):
            gradlam, detJ = _tet_geometry(mesh, cells)
            gN = _grad_shapes(gradlam)
            wdet = _TET_WTS[None, :] * detJ[:, None]
            aq, gaq = self._field_at_qp(a, cells, gN)
            ent = spaces.cells10[cells]
            if scalar:
                adv = np.einsum("mqc,mqjc->mqj", aq, gN, optimize=True)
                el = np.einsum("mq,qi,mqj->mij", wdet, _TET_N, adv, optimize=True)
                rows.append(np.repeat(ent, 10, axis=1))
                cols.append(np.tile(ent, (1, 10)))
                vals.append(el)
            elif which == "first_slot":
                # e(phi_j, a, phi_i): (3i+c, 3j+d) -> int N_i N_j  d a_c/d x_d
                m, nq = wdet.shape
                nn = (_TET_N[:, :, None] * _TET_N[:, None, :]).reshape(nq, 100)
                gq = (wdet[:, :, None] * gaq.reshape(m, nq, 9)).transpose(0, 2, 1)
                el = (gq @ nn).reshape(m, 3, 3, 10, 10).transpose(0, 3, 4, 1, 2)
                r = 3 * ent[:, :, None, None, None] + np.arange(3)[None, None, None, :, None]
                c = 3 * ent[:, None, :, None, None] + np.arange(3)[None, None, None, None, :]
                rows.append(np.broadcast_to(r, el.shape))
                cols.append(np.broadcast_to(c, el.shape))
                vals.append(el)
            elif which == "test_slot":
                # e(phi_i, phi_j, a): (3i+c, 3j+d) -> int N_i (d_c N_j) a_d
                m, nq = wdet.shape
                wn = wdet[:, :, None] * _TET_N[None, :, :]  # (m, nq, 10)
                t = (gN[:, :, :, :, None] * aq[:, :, None, None, :]).reshape(m, nq, 90)
                el = (wn.transpose(0, 2, 1) @ t).reshape(m, 10, 10, 3, 3)
                r = 3 * ent[:, :, None, None, None] + np.arange(3)[None, None, None, :, None]
                c = 3 * ent[:, None, :, None, None] + np.arange(3)[None, None, None, None, :]
                rows.append(np.broadcast_to(r, el.shape))
                cols.append(np.broadcast_to(c, el.shape))
                vals.append(el)
            else:
                raise ValueError(which)
        r = np.concatenate([x.ravel() for x in rows])
        c = np.concatenate([x.ravel() for x in cols])
        v = np.concatenate([x.ravel() for x in vals])
        if scalar:
            Es = _scatter(r, c, v, (ns, ns))
            return sp.kron(Es, sp.identity(3, format="csr"), format="csr")
        return _scatter(r, c, v, (spaces.n_velocity, spaces.n_velocity))

    def state_matrix(self, a):
        return self._assemble(np.asarray(a, dtype=float), "state")

    def first_slot_matrix(self, a):
        return self._assemble(np.asarray(a, dtype=float), "first_slot")

    def test_slot_matrix(self, a):
        return self._assemble(np.asarray(a, dtype=float), "test_slot")

    def trilinear(self, a, b, c):
        """Direct evaluation of e(a, b, c)."""
        return float(c @ (self.state_matrix(a) @ b))


def convection_apply(kernel, v, direction="state"):
    """Matrix of the convection operator evaluated at the field ``v``.

    Both the state operator E(v) and the adjoint-side operator at a field w
    share the same functional form e(field, phi_j, phi_i).
    """
    if direction not in ("state", "adjoint"):
        raise ValueError(f"unknown direction {direction!r}")
    v = np.asarray(v, dtype=float)
    if v.shape[0] != kernel.spaces.n_velocity:
        raise DimensionMismatch("velocity coefficient length mismatch")
    return kernel.state_matrix(v)


# ---------------------------------------------------------------------------
# inf-sup diagnostic


def inf_sup_constant(B, X_v, X_p, free_velocity):
    """Smallest inf-sup constant of a divergence pairing.

    beta^2 is the smallest eigenvalue of B Xv^-1 B^T q = beta^2 Xp q with the
    velocity space restricted to ``free_velocity``.
    """
    Bf = sp.csr_matrix(B)[:, free_velocity]
    Xf = sp.csr_matrix(X_v)[free_velocity][:, free_velocity]
    try:
        lu = numerics.factorize(Xf.tocsc())
        Bt = Bf.T.toarray()
        S = Bf @ np.column_stack([lu.solve(Bt[:, k]) for k in range(Bt.shape[1])])
        w = eigh(0.5 * (S + S.T), np.asarray(X_p.todense()), eigvals_only=True)
    except Exception as exc:
        raise SolverFailure(str(exc)) from exc
    lam = max(float(w[0]), 0.0)
    return float(np.sqrt(lam))


def lbb_constant(operators, spaces):
    """LBB constant of the assembled Taylor-Hood pair on the free dofs."""
    return inf_sup_constant(
        operators.B, operators.X_v, operators.X_p, spaces.free_velocity
    )
