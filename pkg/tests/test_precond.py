import numpy as np
import pytest

from donprec.fem import assemble_diffusion, assemble_helmholtz, build_mesh, interior_block
from donprec.krylov import StopCriteria, fgmres, pcg, random_initial_guess
from donprec.linalg import CsrMatrix, lu_solve, operator_to_dense, spectral_radius_estimate, sym_eig
from donprec.precond import (
    AsmPrec,
    CompositePrec,
    IdentityPrec,
    JacobiPrec,
    LuPrec,
    MgPrec,
    WrappedPrec,
    build_mg_levels,
    composite_apply,
    error_propagation_dense,
    geometric_mesh_hierarchy,
    jacobi_gamma_helmholtz,
    mode_amplification,
    mode_rayleigh,
    partition_graph,
    partition_structured,
)


def poisson_interior(cells):
    mesh = build_mesh(1, cells)
    a = assemble_diffusion(mesh, np.ones(mesh.n_nodes))
    return interior_block(a, mesh.dirichlet_mask), mesh


def helm_interior(cells, k_h):
    mesh = build_mesh(1, cells)
    a = assemble_helmholtz(mesh, k_h, override_resolution=True)
    return interior_block(a, mesh.dirichlet_mask), mesh


class TestJacobiGamma:
    def test_zero_wavenumber_recovers_two_thirds(self):
        assert jacobi_gamma_helmholtz(0.0, 0.1) == pytest.approx(2.0 / 3.0)

    def test_paper_setup_value(self):
        assert jacobi_gamma_helmholtz(60.0, 1.0 / 80.0) == pytest.approx(0.5897435897435898)

    def test_zero_numerator(self):
        assert jacobi_gamma_helmholtz(np.sqrt(2.0), 1.0) == pytest.approx(0.0)

    def test_singular_denominator(self):
        with pytest.raises(ZeroDivisionError):
            jacobi_gamma_helmholtz(np.sqrt(3.0), 1.0)


class TestComposite:
    def test_single_part_identity_weight(self):
        a, _ = poisson_interior(12)
        j = JacobiPrec(a, gamma=0.5)
        c = CompositePrec(a, [(j, 1.0)])
        r = np.linspace(1, 2, a.n_rows)
        assert np.allclose(c.apply(r), j.apply(r), atol=1e-16)

    @pytest.mark.parametrize("n_parts", [2, 3])
    def test_multiplicative_error_factorization(self, n_parts):
        rng = np.random.default_rng(0)
        n = 8
        dense = np.diag(np.linspace(1.0, 3.0, n)) + 0.1 * rng.standard_normal((n, n))
        dense = (dense + dense.T) / 2 + n * np.eye(n)
        a = CsrMatrix.from_dense(dense)
        parts = []
        gammas = [0.7, 1.0, 0.4][:n_parts]
        for i in range(n_parts):
            m_dense = np.diag(1.0 / (np.diag(dense) + i))
            parts.append((WrappedPrec(lambda r, md=m_dense: md @ r, n,
                                      linear=True, spd=True, label=f"p{i}"), gammas[i]))
        comp = CompositePrec(a, parts, "multiplicative")
        m_comp = operator_to_dense(comp.apply, n)
        e_comp = np.eye(n) - dense @ m_comp
        e_expected = np.eye(n)
        for (p, g) in parts:
            m_dense = operator_to_dense(p.apply, n)
            e_expected = (np.eye(n) - g * dense @ m_dense) @ e_expected
        assert np.abs(e_comp - e_expected).max() < 1e-12

    def test_additive_sum(self):
        rng = np.random.default_rng(1)
        n = 8
        dense = np.eye(n) * 4 + 0.2 * rng.standard_normal((n, n))
        a = CsrMatrix.from_dense(dense)
        m1 = WrappedPrec(lambda r: 0.5 * r, n, linear=True, spd=True)
        m2 = WrappedPrec(lambda r: np.flip(r) * 0.0 + 0.25 * r, n, linear=True, spd=True)
        comp = CompositePrec(a, [(m1, 2.0), (m2, 1.0)], "additive")
        r = rng.standard_normal(n)
        assert np.allclose(comp.apply(r), 2.0 * 0.5 * r + 0.25 * r, atol=1e-15)

    def test_additive_pointwise_parts_recover_jacobi(self):
        a, _ = poisson_interior(10)
        n = a.n_rows
        diag = a.diagonal()
        parts = []
        for s in range(n):
            def point_solve(r, s=s):
                z = np.zeros_like(r)
                z[s] = r[s] / diag[s]
                return z
            parts.append((WrappedPrec(point_solve, n, linear=True, spd=True), 1.0))
        comp = CompositePrec(a, parts, "additive")
        r = np.sin(np.arange(n, dtype=float))
        assert np.allclose(comp.apply(r), r / diag, atol=1e-16)

    def test_additive_spd_capture(self):
        a, mesh = poisson_interior(24)
        j = JacobiPrec(a, gamma=0.6)
        lu = LuPrec(a)
        comp = CompositePrec(a, [(j, 0.5), (lu, 1.0)], "additive")
        assert comp.spd
        m_dense = operator_to_dense(comp.apply, a.n_rows)
        assert np.abs(m_dense - m_dense.T).max() < 1e-10
        rng = np.random.default_rng(2)
        for _ in range(100):
            v = rng.standard_normal(a.n_rows)
            assert v @ (m_dense @ v) > 0.0

    def test_multiplicative_palindrome_flags_spd(self):
        a, _ = poisson_interior(16)
        j = JacobiPrec(a, gamma=2.0 / 3.0, steps=3)
        c = LuPrec(a)
        sym = CompositePrec(a, [(j, 1.0), (c, 1.0), (j, 1.0)])
        asym = CompositePrec(a, [(j, 1.0), (c, 1.0)])
        assert sym.spd
        assert not asym.spd


class TestPartition:
    def test_1d_nonoverlapping_blocks(self):
        mesh = build_mesh(1, 11)  # 12 nodes
        part = partition_structured(mesh, 3, overlap=0)
        blocks = [list(b) for b in part.nonoverlapping]
        assert blocks == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11]]
        assert [list(b) for b in part.overlapping] == blocks

    def test_1d_overlap_two(self):
        mesh = build_mesh(1, 11)
        part = partition_structured(mesh, 3, overlap=2)
        assert list(part.overlapping[1]) == [2, 3, 4, 5, 6, 7, 8, 9]

    def test_2d_equal_blocks(self):
        mesh = build_mesh(2, 39)  # 40x40 nodes
        part = partition_structured(mesh, 16)
        assert part.factors == (4, 4)
        sizes = {len(b) for b in part.nonoverlapping}
        assert sizes == {100}
        union = np.concatenate(part.nonoverlapping)
        assert len(union) == mesh.n_nodes
        assert len(np.unique(union)) == mesh.n_nodes

    def test_union_and_disjointness_with_overlap(self):
        mesh = build_mesh(2, 10)
        part = partition_structured(mesh, 4, overlap=1)
        union = np.concatenate(part.nonoverlapping)
        assert len(np.unique(union)) == mesh.n_nodes
        for own, grown in zip(part.nonoverlapping, part.overlapping):
            assert set(own) <= set(grown)

    def test_infeasible_count_raises(self):
        mesh = build_mesh(2, 4)
        with pytest.raises(ValueError):
            partition_structured(mesh, 7)


class TestGraphPartition:
    def test_covers_all_dofs_disjointly(self):
        mesh = build_mesh(2, 10)
        a = assemble_diffusion(mesh, np.ones(mesh.n_nodes))
        part = partition_graph(a, 5, overlap=0, seed=0)
        union = np.concatenate(part.nonoverlapping)
        assert len(union) == mesh.n_nodes
        assert len(np.unique(union)) == mesh.n_nodes

    def test_deterministic_per_seed(self):
        mesh = build_mesh(2, 8)
        a = assemble_diffusion(mesh, np.ones(mesh.n_nodes))
        p1 = partition_graph(a, 4, overlap=1, seed=7)
        p2 = partition_graph(a, 4, overlap=1, seed=7)
        for x, y in zip(p1.overlapping, p2.overlapping):
            assert np.array_equal(x, y)

    def test_overlap_grows_by_adjacency_layers(self):
        mesh = build_mesh(1, 20)
        a = assemble_diffusion(mesh, np.ones(mesh.n_nodes))
        p0 = partition_graph(a, 3, overlap=0, seed=1)
        p1 = partition_graph(a, 3, overlap=1, seed=1)
        for own, grown in zip(p1.nonoverlapping, p1.overlapping):
            assert set(own) <= set(grown)
        assert sum(len(s) for s in p1.overlapping) > sum(len(s) for s in p0.overlapping)

    def test_parts_reasonably_balanced(self):
        mesh = build_mesh(2, 12)
        a = assemble_diffusion(mesh, np.ones(mesh.n_nodes))
        part = partition_graph(a, 4, overlap=0, seed=3)
        sizes = [len(s) for s in part.nonoverlapping]
        assert max(sizes) <= 3 * min(sizes)


class TestAsm:
    def test_single_subdomain_is_exact_solve(self):
        a, mesh = poisson_interior(14)
        # partition over a mesh-like index set: use the full interior mesh
        interior_mesh = build_mesh(1, a.n_rows - 1)
        part = partition_structured(interior_mesh, 1, overlap=0)
        asm = AsmPrec(a, part)
        rng = np.random.default_rng(0)
        r = rng.standard_normal(a.n_rows)
        assert np.allclose(asm.apply(r), lu_solve(a.to_dense(), r), atol=1e-12)

    def test_disjoint_blocks_on_block_diagonal_matrix(self):
        blk = np.array([[4.0, 1.0], [1.0, 3.0]])
        dense = np.zeros((4, 4))
        dense[:2, :2] = blk
        dense[2:, 2:] = 2.0 * blk
        a = CsrMatrix.from_dense(dense)
        grid = build_mesh(1, 3)
        part = partition_structured(grid, 2, overlap=0)
        asm = AsmPrec(a, part)
        r = np.array([1.0, -2.0, 0.5, 3.0])
        assert np.allclose(asm.apply(r), np.linalg.solve(dense, r), atol=1e-13)

    def test_exhaustive_single_node_subdomains_equal_jacobi(self):
        a, _ = poisson_interior(12)
        grid = build_mesh(1, a.n_rows - 1)
        part = partition_structured(grid, a.n_rows, overlap=0)
        asm = AsmPrec(a, part)
        jac = JacobiPrec(a, gamma=1.0)
        rng = np.random.default_rng(3)
        r = rng.standard_normal(a.n_rows)
        assert np.array_equal(asm.apply(r), jac.apply(r))

    def test_singular_local_block_names_subdomain(self):
        dense = np.diag([1.0, 0.0, 1.0, 1.0])
        a = CsrMatrix.from_dense(dense)
        grid = build_mesh(1, 3)
        with pytest.raises(ValueError, match="subdomain"):
            AsmPrec(a, partition_structured(grid, 4, overlap=0))

    def test_asm_spd_flag_tracks_definiteness(self):
        a_spd, _ = poisson_interior(16)
        grid = build_mesh(1, a_spd.n_rows - 1)
        part = partition_structured(grid, 3, overlap=1)
        assert AsmPrec(a_spd, part).spd
        a_ind, _ = helm_interior(50, 60.0)
        grid = build_mesh(1, a_ind.n_rows - 1)
        part = partition_structured(grid, 7, overlap=0)
        assert not AsmPrec(a_ind, part).spd


def make_mg(cells, n_levels, k_h=0.0, nu=1):
    meshes = geometric_mesh_hierarchy(1, cells, n_levels)

    def assemble(mesh):
        if k_h == 0.0:
            return assemble_diffusion(mesh, np.ones(mesh.n_nodes))
        return assemble_helmholtz(mesh, k_h, override_resolution=True)

    def smoother_for(l, mesh, a):
        gamma = 2.0 / 3.0 if k_h == 0.0 else jacobi_gamma_helmholtz(k_h, mesh.h)
        return JacobiPrec(a, gamma=gamma, steps=nu)

    levels = build_mg_levels(meshes, assemble, smoother_for)
    return MgPrec(levels, spd=(k_h == 0.0)), levels


class TestMg:
    def test_single_level_is_exact_solve(self):
        mg, levels = make_mg(16, 1)
        a = levels[0].a
        rng = np.random.default_rng(0)
        f = rng.standard_normal(a.n_rows)
        rep = pcg(a, f, mg, x0=random_initial_guess(a.n_rows, rng))
        assert rep.iterations == 1
        rep2 = fgmres(a, f, mg, restart=10, x0=random_initial_guess(a.n_rows, rng))
        assert rep2.iterations == 1

    def test_vcycle_accelerates_poisson(self):
        mg, levels = make_mg(128, 4)
        a = levels[0].a
        rng = np.random.default_rng(1)
        f = rng.standard_normal(a.n_rows)
        rep = fgmres(a, f, mg, restart=50, x0=random_initial_guess(a.n_rows, rng),
                     stop=StopCriteria(rel_res=1e-9, max_iters=100))
        assert rep.converged
        assert rep.iterations <= 12

    def test_vcycle_spd_for_pcg(self):
        mg, levels = make_mg(64, 3)
        a = levels[0].a
        rng = np.random.default_rng(2)
        f = rng.standard_normal(a.n_rows)
        rep = pcg(a, f, mg, x0=random_initial_guess(a.n_rows, rng),
                  stop=StopCriteria(rel_res=1e-9, max_iters=50))
        assert rep.converged
        assert rep.iterations <= 12

    def test_hierarchy_divisibility_guard(self):
        with pytest.raises(ValueError):
            geometric_mesh_hierarchy(1, 50, 3)


class TestErrorPropagation:
    def test_exact_inverse_gives_zero(self):
        a, _ = poisson_interior(10)
        e = error_propagation_dense(a, LuPrec(a))
        assert np.abs(e).max() < 1e-12

    def test_zero_preconditioner_gives_identity(self):
        a, _ = poisson_interior(10)
        zero = WrappedPrec(lambda r: 0.0 * r, a.n_rows, linear=True, spd=False)
        e = error_propagation_dense(a, zero)
        assert np.allclose(e, np.eye(a.n_rows), atol=1e-16)

    def test_jacobi_spectrum_matches_analytic_symbol(self):
        # oracle: E = I - gamma D^-1 A has eigenvalues 1 - gamma (1 - cos(j pi h))
        cells = 32
        a, mesh = poisson_interior(cells)
        gamma = 2.0 / 3.0
        e = error_propagation_dense(a, JacobiPrec(a, gamma=gamma))
        vals, _ = sym_eig(e)
        j = np.arange(1, cells)
        analytic = np.sort(1.0 - gamma * (1.0 - np.cos(j * np.pi * mesh.h)))
        assert np.allclose(vals, analytic, atol=1e-10)

    def test_rejects_nonlinear(self):
        a, _ = poisson_interior(8)
        bad = WrappedPrec(lambda r: r ** 2, a.n_rows, linear=False, spd=False)
        with pytest.raises(ValueError):
            error_propagation_dense(a, bad)

    def test_spectral_radius_below_one_for_damped_jacobi(self):
        for cells in (10, 50, 200):
            a, _ = poisson_interior(cells)
            jac = JacobiPrec(a, gamma=2.0 / 3.0)
            rho = spectral_radius_estimate(
                lambda v: v - a.scipy @ jac.apply(v), a.n_rows, iters=400, seed=4)
            assert rho < 1.0


class TestModeAmplification:
    def test_uniform_contraction(self):
        e = 0.5 * np.eye(6)
        modes = np.eye(6)
        assert np.allclose(mode_amplification(e, modes), 0.5)

    def test_requires_normalized_modes(self):
        with pytest.raises(ValueError):
            mode_amplification(np.eye(3), 2.0 * np.eye(3))

    def test_jacobi_amplifies_low_helmholtz_modes(self):
        a, mesh = helm_interior(50, 60.0)
        gamma = jacobi_gamma_helmholtz(60.0, mesh.h)
        e = error_propagation_dense(a, JacobiPrec(a, gamma=gamma))
        _, modes = sym_eig(a.to_dense())
        amp = mode_amplification(e, modes)
        assert amp[:10].max() > 1.0

    def test_two_level_with_exact_eigen_coarse_annihilates_modes(self):
        a, _ = poisson_interior(64)
        vals, vecs = sym_eig(a.to_dense())
        k = 8
        p = vecs[:, :k]
        a_c = p.T @ a.to_dense() @ p

        def coarse(r):
            return p @ np.linalg.solve(a_c, p.T @ r)

        c = WrappedPrec(coarse, a.n_rows, linear=True, spd=True, label="eig-coarse")
        j = JacobiPrec(a, gamma=2.0 / 3.0)
        comp = CompositePrec(a, [(j, 1.0), (c, 1.0)])
        e = error_propagation_dense(a, comp)
        amp = mode_amplification(e, vecs)
        assert amp[:k].max() < 1e-8
        assert amp.max() < 1.0

    def test_rayleigh_diagnostic_matches_eigenvalues_for_normal_e(self):
        a, mesh = poisson_interior(16)
        gamma = 0.5
        e = error_propagation_dense(a, JacobiPrec(a, gamma=gamma))
        _, modes = sym_eig(a.to_dense())
        ray = mode_rayleigh(e, modes)
        amp = mode_amplification(e, modes)
        assert np.allclose(np.abs(ray), amp, atol=1e-10)


class TestFlags:
    def test_identity_flags(self):
        ident = IdentityPrec(5)
        assert ident.spd and ident.linear

    def test_jacobi_rejects_zero_diagonal(self):
        a = CsrMatrix.from_dense(np.array([[1.0, 1.0], [1.0, 0.0]]))
        with pytest.raises(ValueError):
            JacobiPrec(a)

    def test_dimension_validation(self):
        ident = IdentityPrec(4)
        with pytest.raises(ValueError):
            ident.apply(np.ones(5))
