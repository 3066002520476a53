import warnings

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ocrom.errors import (
    DimensionMismatch,
    InvariantViolation,
    MissingArtifact,
    ParseError,
    RankDeficiency,
)
from ocrom.rom import (
    FIELDS,
    PodBasis,
    ReducedOperators,
    SnapshotSet,
    _reduced_system,
    _tensor_convection,
    build_offline,
    build_reduced_spaces,
    check_pod_invariants,
    collect_snapshots,
    compute_errors,
    compute_supremizers,
    inner_products_of,
    load_artifact,
    pod_compress,
    project_operators,
    reduced_inf_sup,
    save_artifact,
    solve_reduced,
    training_grid,
    training_random,
    truncate_basis,
)

import oracles


class TestTrainingSets:
    def test_grid_endpoints_and_size(self):
        ts = training_grid([(40.0, 80.0)], 5)
        assert len(ts) == 5
        assert ts.parameters[0, 0] == 40.0 and ts.parameters[-1, 0] == 80.0
        assert np.all(np.diff(ts.parameters[:, 0]) > 0)

    def test_grid_tensor_product(self):
        ts = training_grid([(0.0, 1.0), (2.0, 3.0)], 3)
        assert len(ts) == 9
        assert ts.parameters.shape == (9, 2)

    def test_random_seed_determinism(self):
        a = training_random([(40.0, 80.0)], 7, seed=3)
        b = training_random([(40.0, 80.0)], 7, seed=3)
        c = training_random([(40.0, 80.0)], 7, seed=4)
        assert np.array_equal(a.parameters, b.parameters)
        assert not np.array_equal(a.parameters, c.parameters)
        assert np.all(a.parameters >= 40.0) and np.all(a.parameters <= 80.0)


class TestSnapshots:
    def test_repeated_parameter_identical_columns(self, stokes_model):
        ts = training_grid([(60.0, 60.0)], 2)
        snaps = collect_snapshots(stokes_model, ts)
        for f in FIELDS:
            assert np.array_equal(snaps.matrices[f][:, 0], snaps.matrices[f][:, 1])

    def test_snapshots_satisfy_optimality(self, stokes_model):
        """Each snapshot column re-checked against the full residual."""
        ts = training_grid([(40.0, 80.0)], 3)
        snaps = collect_snapshots(stokes_model, ts)
        for k, mu in enumerate(snaps.parameters):
            x = np.concatenate([
                snaps.matrices["v"][:, k][stokes_model.free],
                snaps.matrices["p"][:, k],
                snaps.matrices["u"][:, k],
                snaps.matrices["w"][:, k][stokes_model.free],
                snaps.matrices["q"][:, k],
            ])
            res = stokes_model.kkt_residual(x, mu, False)
            scale = np.linalg.norm(stokes_model._stokes_rhs(mu))
            assert np.linalg.norm(res) <= 1e-9 * scale

    def test_failures_recorded(self, stokes_model):
        """An out-of-domain sample fails gracefully; the rest survive."""
        from ocrom.rom import TrainingSet

        ts = TrainingSet(np.array([[50.0], [1e6], [70.0]]))
        snaps = collect_snapshots(stokes_model, ts)
        assert len(snaps) == 2
        assert len(snaps.failures) == 1
        assert snaps.failures[0][0] == 1

    def test_all_failed(self, stokes_model):
        from ocrom.errors import AllSnapshotsFailed
        from ocrom.rom import TrainingSet

        with pytest.raises(AllSnapshotsFailed):
            collect_snapshots(stokes_model, TrainingSet(np.array([[1e6]])))


def _identity_products(n):
    eye = sp.identity(n, format="csr")
    return {f: eye for f in FIELDS}


def _synthetic_snapshots(S):
    return SnapshotSet(
        matrices={f: S.copy() for f in FIELDS},
        parameters=np.zeros((S.shape[1], 1)),
        failures=[],
    )


class TestPod:
    def test_two_column_hand_eigensolve(self):
        """Orthogonal columns of Euclidean norms 2 and 1: the correlation
        matrix is diag(4,1)/2 so the eigenvalues are (2, 1/2) and the modes
        are the normalized columns."""
        S = np.zeros((6, 2))
        S[0, 0] = 2.0
        S[3, 1] = 1.0
        basis = pod_compress(_synthetic_snapshots(S), _identity_products(6), 2)
        lam = basis.eigenvalues["v"]
        assert abs(lam[0] - 2.0) <= 1e-14
        assert abs(lam[1] - 0.5) <= 1e-14
        assert np.abs(basis.modes["v"][:, 0] - S[:, 0] / 2.0).max() <= 1e-13
        assert np.abs(basis.modes["v"][:, 1] - S[:, 1]).max() <= 1e-13
        assert basis.energy["v"] == 1.0

    def test_rank_one_mode(self):
        rng = np.random.default_rng(0)
        s = rng.standard_normal(8)
        S = np.column_stack([s, 2 * s, -0.5 * s])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficiency)
            basis = pod_compress(_synthetic_snapshots(S), _identity_products(8), 1)
        m = basis.modes["v"][:, 0]
        ref = s / np.linalg.norm(s)
        assert min(np.abs(m - ref).max(), np.abs(m + ref).max()) <= 1e-12

    def test_rank_deficiency_warning(self):
        s = np.arange(1.0, 6.0)
        S = np.column_stack([s, s])
        with pytest.warns(RankDeficiency):
            pod_compress(_synthetic_snapshots(S), _identity_products(5), 2)

    def test_n_max_exceeds_snapshots(self):
        S = np.eye(4)[:, :2]
        with pytest.raises(DimensionMismatch):
            pod_compress(_synthetic_snapshots(S), _identity_products(4), 3)

    def test_modes_weighted_orthonormal(self, stokes_model):
        ts = training_grid([(40.0, 80.0)], 4)
        snaps = collect_snapshots(stokes_model, ts)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficiency)
            basis = pod_compress(snaps, inner_products_of(stokes_model), 2)
        prods = inner_products_of(stokes_model)
        for f in FIELDS:
            y = basis.modes[f]
            g = y.T @ (prods[f] @ y)
            # raw modes at the numerical-rank boundary lose a few digits;
            # the aggregated bases are re-orthonormalized afterwards
            assert np.abs(g - np.eye(y.shape[1])).max() <= 1e-7


class TestSupremizers:
    def test_riesz_identity(self, stokes_model):
        """The raw representer solves (t, v)_Xv = b(q, v); re-derive it with
        an independent sparse solver and probe the identity with random v."""
        ops = stokes_model.operators
        f = stokes_model.free
        rng = np.random.default_rng(1)
        q = rng.standard_normal(stokes_model.spaces.n_pressure)
        X_ff = ops.X_v[f][:, f].tocsc()
        t_f = spla.spsolve(X_ff, (ops.B.T @ q)[f])
        for _ in range(5):
            v = rng.standard_normal(f.shape[0])
            lhs = t_f @ (X_ff @ v)
            rhs = (ops.B.T @ q)[f] @ v
            assert abs(lhs - rhs) <= 1e-8 * max(abs(rhs), 1.0)

    def test_supremizer_space_contains_representers(self, stokes_model):
        """compute_supremizers spans the Riesz representers of the given
        pressure modes (checked via projection onto the returned basis)."""
        ops = stokes_model.operators
        f = stokes_model.free
        rng = np.random.default_rng(2)
        Q = rng.standard_normal((stokes_model.spaces.n_pressure, 2))
        sup = compute_supremizers(stokes_model, Q)
        assert sup.shape[1] == 2
        g = sup.T @ (ops.X_v @ sup)
        assert np.abs(g - np.eye(2)).max() <= 1e-10
        X_ff = ops.X_v[f][:, f].tocsc()
        for n in range(2):
            t = np.zeros(stokes_model.spaces.n_velocity)
            t[f] = spla.spsolve(X_ff, (ops.B.T @ Q[:, n])[f])
            coeffs = sup.T @ (ops.X_v @ t)
            resid = t - sup @ coeffs
            r = np.sqrt(resid @ (ops.X_v @ resid)) / np.sqrt(t @ (ops.X_v @ t))
            assert r <= 1e-8

    def test_zero_pressure_modes(self, stokes_model):
        sup = compute_supremizers(
            stokes_model, np.zeros((stokes_model.spaces.n_pressure, 0)))
        assert sup.shape == (stokes_model.spaces.n_velocity, 0)


@pytest.fixture(scope="module")
def stokes_offline(stokes_model):
    ts = training_grid([(40.0, 80.0)], 6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficiency)
        snaps, basis, ops = build_offline(
            stokes_model, ts, n_max=2, with_tensor=False)
    ops.training_parameters = snaps.parameters
    return snaps, basis, ops


class TestReducedSpaces:
    def test_aggregated_orthonormality(self, stokes_model, stokes_offline):
        _, basis, _ = stokes_offline
        check_pod_invariants(stokes_model, basis)

    def test_dimension_bookkeeping(self, stokes_offline):
        _, basis, ops = stokes_offline
        n, n_lift = basis.n_max, basis.lifting.shape[1]
        assert basis.reduced_dimension() == 13 * n + n_lift
        assert ops.dimension() == 13 * n
        assert ops.n_extended == ops.n_velocity_modes + n_lift

    def test_invariant_violation_detected(self, stokes_model, stokes_offline):
        import copy

        _, basis, _ = stokes_offline
        bad = copy.deepcopy(basis)
        bad.eigenvalues["v"] = bad.eigenvalues["v"][::-1].copy()
        with pytest.raises(InvariantViolation):
            check_pod_invariants(stokes_model, bad)
        bad2 = copy.deepcopy(basis)
        bad2.y_v[:, 0] *= 2.0
        with pytest.raises(InvariantViolation):
            check_pod_invariants(stokes_model, bad2)

    def test_truncation(self, stokes_model, stokes_offline):
        _, basis, _ = stokes_offline
        small = truncate_basis(stokes_model, basis, 1)
        assert small.n_max == 1
        check_pod_invariants(stokes_model, small)
        with pytest.raises(DimensionMismatch):
            truncate_basis(stokes_model, basis, basis.n_max + 1)

    def test_inf_sup_with_and_without_enrichment(self, stokes_model):
        ts = training_grid([(40.0, 80.0)], 6)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficiency)
            snaps = collect_snapshots(stokes_model, ts)
            basis = pod_compress(snaps, inner_products_of(stokes_model), 2)
            enriched = build_reduced_spaces(stokes_model, basis, enrich=True)
            ops_en = project_operators(stokes_model, enriched, with_tensor=False)
            basis2 = pod_compress(snaps, inner_products_of(stokes_model), 2)
            plain = build_reduced_spaces(stokes_model, basis2, enrich=False)
            ops_pl = project_operators(stokes_model, plain, with_tensor=False)
        beta_en = reduced_inf_sup(ops_en)
        beta_pl = reduced_inf_sup(ops_pl)
        assert beta_en > 1e-3
        assert beta_pl <= 1e-2 * beta_en


class TestReducedTensor:
    def test_matches_trilinear_quadrature(self, stokes_model, stokes_offline):
        _, basis, _ = stokes_offline
        ops = project_operators(stokes_model, basis, with_tensor=True)
        y_ext = np.column_stack([ops.y_v, ops.lifting])
        rng = np.random.default_rng(3)
        n = ops.n_extended
        scale = np.abs(ops.tensor).max()
        for i, j, k in rng.integers(0, n, size=(4, 3)):
            direct = oracles.trilinear_quadrature(
                stokes_model.mesh, stokes_model.spaces,
                y_ext[:, j], y_ext[:, k], y_ext[:, i])
            assert abs(ops.tensor[i, j, k] - direct) <= 1e-9 * max(scale, 1.0)


class TestReducedSolve:
    def test_training_reproduction(self, stokes_model, stokes_offline):
        snaps, _, ops = stokes_offline
        for mu in snaps.parameters:
            full = stokes_model.solve_ocp(mu)
            red = solve_reduced(ops, mu, model=stokes_model)
            rep = compute_errors(full, red, stokes_model.operators)
            assert rep.e_total_rel <= 1e-8
            assert red.newton_iterations == 0

    def test_off_training_parameter(self, stokes_model, stokes_offline):
        """The Stokes problem depends affinely on the parameter, so the
        rank-2 space is exact off the training grid too."""
        _, _, ops = stokes_offline
        mu = np.array([53.7])
        full = stokes_model.solve_ocp(mu)
        red = solve_reduced(ops, mu, model=stokes_model)
        rep = compute_errors(full, red, stokes_model.operators)
        assert rep.e_total_rel <= 1e-8

    def test_objective_agreement(self, stokes_model, stokes_offline):
        _, _, ops = stokes_offline
        mu = np.array([66.0])
        full = stokes_model.solve_ocp(mu)
        red = solve_reduced(ops, mu)
        assert abs(full.objective - red.objective) <= 1e-8 * full.objective

    def test_out_of_domain(self, stokes_offline):
        _, _, ops = stokes_offline
        with pytest.raises(Exception) as exc:
            solve_reduced(ops, np.array([500.0]))
        from ocrom.errors import ParameterOutOfDomain

        assert isinstance(exc.value, ParameterOutOfDomain)

    def test_tensor_mode_requires_tensor(self, stokes_model):
        ts = training_grid([(40.0, 80.0)], 3)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficiency)
            _, basis, ops = build_offline(stokes_model, ts, 2, with_tensor=False)
        ops.equation = "navier-stokes"
        with pytest.raises(MissingArtifact):
            solve_reduced(ops, np.array([50.0]), mode="tensor")


def _random_reduced_operators(rng, nv=3, np_=2, nu=2, nl=1):
    def spd(n):
        a = rng.standard_normal((n, n))
        return a @ a.T + n * np.eye(n)

    ne = nv + nl
    return ReducedOperators(
        y_v=np.zeros((1, nv)), y_p=np.zeros((1, np_)), y_u=np.zeros((1, nu)),
        lifting=np.zeros((1, nl)),
        a=spd(ne), m=spd(ne), b=rng.standard_normal((np_, ne)),
        c=rng.standard_normal((ne, nu)), n_ctrl=spd(nu),
        h=rng.standard_normal(ne), j_const=1.0, alpha=0.5,
        equation="navier-stokes",
        domain_lo=np.array([-10.0] * nl), domain_hi=np.array([10.0] * nl),
        tensor=rng.standard_normal((ne, ne, ne)),
    )


class TestReducedSystem:
    def test_jacobian_matches_finite_differences(self):
        """The hand-coded reduced Jacobian against central differences of the
        reduced residual, including the convection tensor terms."""
        rng = np.random.default_rng(4)
        ops = _random_reduced_operators(rng)
        conv = _tensor_convection(ops)
        mu = np.array([0.7])
        x = rng.standard_normal(ops.dimension()) * 0.3
        res, jac, _ = _reduced_system(ops, mu, x, conv)
        eps = 1e-6
        for k in range(ops.dimension()):
            dx = np.zeros_like(x)
            dx[k] = eps
            rp, _, _ = _reduced_system(ops, mu, x + dx, conv)
            rm, _, _ = _reduced_system(ops, mu, x - dx, conv)
            fd = (rp - rm) / (2 * eps)
            assert np.abs(fd - jac[:, k]).max() <= 1e-6 * max(
                np.abs(jac).max(), 1.0)


class TestErrors:
    def test_identical_solutions(self, stokes_model, stokes_offline):
        _, _, ops = stokes_offline
        mu = np.array([60.0])
        full = stokes_model.solve_ocp(mu)
        rep = compute_errors(full, full, stokes_model.operators)
        assert rep.e_total == 0.0 and rep.e_objective == 0.0

    def test_constructed_perturbation(self, stokes_model):
        import copy

        mu = np.array([60.0])
        full = stokes_model.solve_ocp(mu)
        pert = copy.deepcopy(full)
        ops = stokes_model.operators
        d = np.zeros(stokes_model.spaces.n_velocity)
        d[0] = 1.0
        d /= np.sqrt(d @ (ops.X_v @ d))
        pert.v = full.v + d
        rep = compute_errors(full, pert, ops)
        assert abs(rep.e_v - 1.0) <= 1e-12
        assert rep.e_p == 0.0 and rep.e_u == 0.0
        assert abs(rep.e_state - 1.0) <= 1e-12
        assert abs(rep.e_total - np.sqrt(
            rep.e_v**2 + rep.e_p**2 + rep.e_u**2 + rep.e_w**2 + rep.e_q**2
        )) <= 1e-15


class TestArtifact:
    def test_round_trip_bit_exact(self, stokes_offline, tmp_path):
        _, _, ops = stokes_offline
        path = tmp_path / "rom.bin"
        save_artifact(path, ops)
        back = load_artifact(path)
        for name in ("y_v", "y_p", "y_u", "lifting", "a", "m", "b", "c",
                     "n_ctrl", "h", "domain_lo", "domain_hi",
                     "training_parameters"):
            assert np.array_equal(getattr(ops, name), getattr(back, name)), name
        assert back.alpha == ops.alpha
        assert back.j_const == ops.j_const
        assert back.equation == ops.equation
        for f in FIELDS:
            assert np.array_equal(back.eigenvalues[f], ops.eigenvalues[f])

    def test_loaded_artifact_solves(self, stokes_model, stokes_offline, tmp_path):
        _, _, ops = stokes_offline
        path = tmp_path / "rom.bin"
        save_artifact(path, ops)
        back = load_artifact(path)
        mu = np.array([47.0])
        a = solve_reduced(ops, mu)
        b = solve_reduced(back, mu)
        assert abs(a.objective - b.objective) <= 1e-12 * max(a.objective, 1.0)
        assert np.abs(a.v_N - b.v_N).max() <= 1e-12

    def test_missing_artifact(self, tmp_path):
        with pytest.raises(MissingArtifact):
            load_artifact(tmp_path / "does-not-exist.bin")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"garbage header\n" + b"\x00" * 64)
        with pytest.raises(ParseError):
            load_artifact(path)

    def test_truncated_payload(self, stokes_offline, tmp_path):
        _, _, ops = stokes_offline
        path = tmp_path / "rom.bin"
        save_artifact(path, ops)
        data = path.read_bytes()
        (tmp_path / "cut.bin").write_bytes(data[: len(data) // 2])
        with pytest.raises(ParseError):
            load_artifact(tmp_path / "cut.bin")


@pytest.fixture(scope="module")
def ns_offline(ns_model):
    ts = training_grid([(20.0, 60.0)], 3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficiency)
        snaps, basis, ops = build_offline(ns_model, ts, n_max=3)
    return snaps, ops


class TestNavierStokesRom:

    def test_training_reproduction(self, ns_model, ns_offline):
        snaps, ops = ns_offline
        mu = snaps.parameters[1]
        full = ns_model.solve_ocp(mu)
        red = solve_reduced(ops, mu)
        rep = compute_errors(full, red, ns_model.operators)
        assert rep.e_total_rel <= 1e-6
        assert red.newton_iterations >= 1

    def test_tensor_and_reassembly_agree(self, ns_model, ns_offline):
        _, ops = ns_offline
        mu = np.array([45.0])
        a = solve_reduced(ops, mu, mode="tensor")
        b = solve_reduced(ops, mu, mode="reassemble", model=ns_model)
        assert np.abs(a.v_N - b.v_N).max() <= 1e-9 * max(np.abs(a.v_N).max(), 1.0)
        assert abs(a.objective - b.objective) <= 1e-9 * max(a.objective, 1.0)
