"""Solver, error norms, config handling, and the CLI surface."""

import numpy as np
import pytest

from meshes import (
    bfs_agglomeration,
    single_square_element,
    square_block_agg,
    two_triangle_square,
    unit_square_mesh,
)
from polydg.assembly import AssemblyConfig, CSRMatrix, DofMap, assemble_approach2, triplets_to_csr
from polydg.basis import build_basis
from polydg.errors import compute_errors, observed_orders, study_rows_to_csv
from polydg.harness import ConfigError, RunConfig, run_assemble, run_bench, run_study
from polydg.mesh import agglomerate, save_simplicial_mesh
from polydg.model import (
    PdeCoefficients,
    PenaltyConfig,
    classify_boundary_faces,
    constant_scalar,
    isotropic_diffusion,
)
from polydg.solver import BlockJacobiPreconditioner, SolverError, solve


def dense_to_csr(dense):
    rows, cols = np.nonzero(dense)
    return triplets_to_csr(rows, cols, dense[rows, cols], *dense.shape)


def test_solve_identity():
    m = dense_to_csr(np.eye(4))
    rhs = np.array([1.0, 0.0, 0.0, 0.0])
    res = solve(m, rhs)
    assert res.converged and res.iterations <= 1
    np.testing.assert_allclose(res.x, rhs, atol=1e-13)


def test_solve_spd_2x2_hand_case():
    m = dense_to_csr(np.array([[2.0, 1.0], [1.0, 2.0]]))
    res = solve(m, np.array([1.0, 1.0]))
    np.testing.assert_allclose(res.x, [1 / 3, 1 / 3], atol=1e-12)
    assert res.residual <= 1e-10


def test_solve_against_dense_oracle():
    mesh = two_triangle_square()
    pm = agglomerate(mesh, np.array([0, 1]))
    coeffs = PdeCoefficients(
        diffusion=isotropic_diffusion(1.0, 2),
        reaction=constant_scalar(1.0),
        source=constant_scalar(1.0),
        dirichlet_data=constant_scalar(0.0),
    )
    classify_boundary_faces(pm, coeffs)
    specs = build_basis(pm, 2)
    matrix, rhs, _, _ = assemble_approach2(pm, coeffs, specs)
    res = solve(matrix, rhs, tol=1e-12, dof_map=DofMap.from_specs(specs))
    exact = np.linalg.solve(matrix.to_dense(), rhs)
    np.testing.assert_allclose(res.x, exact, atol=1e-10 * max(1, np.abs(exact).max()))


def test_solver_reports_nonconvergence():
    rng = np.random.default_rng(0)
    dense = rng.standard_normal((40, 40)) + np.diag(np.linspace(1, 2, 40))
    m = dense_to_csr(dense)
    res = solve(m, np.ones(40), tol=1e-14, max_iter=1, restart=2)
    assert not res.converged
    assert res.residual > 1e-14


def test_zero_rhs_short_circuit():
    m = dense_to_csr(np.eye(3))
    res = solve(m, np.zeros(3))
    assert res.converged and res.iterations == 0
    np.testing.assert_array_equal(res.x, np.zeros(3))


def test_nonsquare_rejected():
    m = CSRMatrix(2, 3, np.array([0, 0, 0]), np.empty(0, np.int64), np.empty(0))
    with pytest.raises(SolverError):
        solve(m, np.zeros(2))


def test_block_jacobi_is_exact_for_block_diagonal():
    pm = single_square_element()
    specs = build_basis(pm, 2)
    coeffs = PdeCoefficients(reaction=constant_scalar(1.0))
    classify_boundary_faces(pm, PdeCoefficients(diffusion=isotropic_diffusion(1.0, 2)))
    matrix, _, _, _ = assemble_approach2(pm, coeffs, specs)
    pre = BlockJacobiPreconditioner(matrix, DofMap.from_specs(specs))
    rng = np.random.default_rng(1)
    r = rng.standard_normal(matrix.n_rows)
    np.testing.assert_allclose(
        matrix.to_dense() @ pre.apply(r), r, atol=1e-11
    )


# -- error norms ---------------------------------------------------------------

def poisson_setup(n=4, p=1):
    mesh = unit_square_mesh(n)
    pm = agglomerate(mesh, square_block_agg(n, 2))

    def u(pts):
        return 1.0 + 2.0 * pts[:, 0] - 0.5 * pts[:, 1]

    def grad_u(pts):
        out = np.zeros((pts.shape[0], 2))
        out[:, 0] = 2.0
        out[:, 1] = -0.5
        return out

    coeffs = PdeCoefficients(
        diffusion=isotropic_diffusion(1.0, 2),
        source=constant_scalar(0.0),
        dirichlet_data=u,
        exact_solution=u,
        exact_gradient=grad_u,
    )
    classify_boundary_faces(pm, coeffs)
    return pm, coeffs, build_basis(pm, p)


def test_patch_test_reproduces_linear_solution():
    """Pure diffusion with an exact degree-p solution: dG reproduces it."""
    pm, coeffs, specs = poisson_setup()
    config = AssemblyConfig(penalty=PenaltyConfig(constant=10.0))
    matrix, rhs, _, _ = assemble_approach2(pm, coeffs, specs, config)
    res = solve(matrix, rhs, tol=1e-12, dof_map=DofMap.from_specs(specs))
    assert res.converged
    report = compute_errors(pm, specs, res.x, coeffs, config)
    assert report.l2 < 1e-11
    assert report.energy < 1e-9


def test_zero_solution_unit_error():
    pm, _, specs = poisson_setup()
    coeffs = PdeCoefficients(
        diffusion=isotropic_diffusion(1.0, 2),
        exact_solution=lambda p: np.ones(p.shape[0]),
        exact_gradient=lambda p: np.zeros((p.shape[0], 2)),
    )
    report = compute_errors(pm, specs, np.zeros(DofMap.from_specs(specs).n_dofs), coeffs)
    assert report.l2 == pytest.approx(1.0, abs=1e-12)
    assert report.energy >= 0.0


def test_energy_dominates_seminorm():
    pm, coeffs, specs = poisson_setup()
    rng = np.random.default_rng(2)
    vec = rng.standard_normal(DofMap.from_specs(specs).n_dofs)
    report = compute_errors(pm, specs, vec, coeffs)
    assert report.energy**2 >= report.components["seminorm_sq"] - 1e-12


def test_observed_orders_scale_invariant():
    hs = [0.5, 0.25, 0.125]
    errs = [1e-1, 2.5e-2, 6.25e-3]
    base = observed_orders(hs, errs)
    scaled = observed_orders(hs, [7.3 * e for e in errs])
    np.testing.assert_allclose(base, scaled)
    np.testing.assert_allclose(base, [2.0, 2.0])


def test_study_rows_csv_header():
    rows = [
        {"h": 0.5, "dofs": 10, "l2": 1e-2, "energy": 1e-1},
        {"h": 0.25, "dofs": 40, "l2": 2.5e-3, "energy": 5e-2,
         "l2_order": 2.0, "energy_order": 1.0},
    ]
    csv = study_rows_to_csv(rows)
    assert csv.splitlines()[0] == "h,dofs,l2,energy,l2_order,energy_order"
    assert len(csv.splitlines()) == 3


# -- run config -----------------------------------------------------------------

def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nproblem=advdiff3d\ndegree=2\nc_sigma=5\n")
    cfg = RunConfig.from_file(path, {"degree": "3", "workers": "2"})
    assert cfg.degree == 3 and cfg.workers == 2 and cfg.c_sigma == 5.0


def test_config_rejects_unknown_and_invalid(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("definitely_not_a_key=1\n")
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig.from_file(path)
    path.write_text("degree=banana\n")
    with pytest.raises(ConfigError, match="bad value"):
        RunConfig.from_file(path)
    path.write_text("approach=7\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(path)
    path.write_text("mesh=x\nno_equals_sign\n")
    with pytest.raises(ConfigError, match="key=value"):
        RunConfig.from_file(path)


def _write_square_mesh(tmp_path, n=4):
    mesh = unit_square_mesh(n)
    path = tmp_path / f"square{n}.mesh"
    save_simplicial_mesh(path, mesh)
    return path


def test_run_assemble_parabolic_and_files(tmp_path):
    mesh_path = _write_square_mesh(tmp_path)
    cfg = RunConfig.from_file(None, {
        "problem": "parabolic-sine",
        "mesh": str(mesh_path),
        "degree": "1",
        "family": "PQ",
        "time_steps": "4",
        "out": str(tmp_path / "run"),
    })
    matrix, rhs, stats = run_assemble(cfg)
    assert (tmp_path / "run.mtx").exists()
    assert (tmp_path / "run.stats.csv").exists()
    assert matrix.n_rows == rhs.shape[0]


def test_run_bench_direction(tmp_path):
    mesh_path = _write_square_mesh(tmp_path, 6)
    agg = bfs_agglomeration(unit_square_mesh(6), 6)
    agg_path = tmp_path / "agg.txt"
    agg_path.write_text("".join(f"{int(e)}\n" for e in agg))
    cfg = RunConfig.from_file(None, {
        "problem": "parabolic-sine",
        "mesh": str(mesh_path),
        "agg": str(agg_path),
        "family": "PQ",
        "degree": "1",
        "out": str(tmp_path / "bench"),
    })
    stats = run_bench(cfg)
    assert set(stats) == {1, 2}
    assert (tmp_path / "bench.approach1.csv").exists()
    for approach, s in stats.items():
        assert s.total_seconds > 0


def test_cli_smoke(tmp_path, capsys):
    from polydg.cli import main

    mesh_path = _write_square_mesh(tmp_path)
    rc = main([
        "assemble",
        "-o", "problem=parabolic-sine",
        "-o", f"mesh={mesh_path}",
        "-o", "family=PQ",
        "-o", f"out={tmp_path / 'cli'}",
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.startswith("kernel,work_items,seconds,nnz_written")
    rc = main(["assemble", "-o", "problem=no-such-problem"])
    assert rc == 1
    err = capsys.readouterr().err
    assert "unknown problem" in err


def test_cli_march_smoke(tmp_path, capsys):
    from polydg.cli import main

    mesh_path = _write_square_mesh(tmp_path, 2)
    rc = main([
        "march",
        "-o", "problem=parabolic-sine",
        "-o", f"mesh={mesh_path}",
        "-o", "family=PQ",
        "-o", "time_steps=2",
        "-o", "t_final=0.5",
        "-o", f"out={tmp_path / 'march'}",
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "marched 2 slabs" in out
    assert "l2l2_error" in out
    assert (tmp_path / "march.slab0000.bin").exists()


def test_cli_partition_smoke(tmp_path, capsys):
    from polydg.cli import main
    from meshes import unit_cube_mesh

    mesh = unit_cube_mesh(2)
    mesh_path = tmp_path / "cube.mesh"
    save_simplicial_mesh(mesh_path, mesh)
    rc = main([
        "partition",
        "-o", "problem=advdiff3d",
        "-o", f"mesh={mesh_path}",
        "-o", "parts=2",
        "-o", f"out={tmp_path / 'part'}",
    ])
    assert rc == 0
    assert "parts 2" in capsys.readouterr().out
    assert (tmp_path / "part.parts").exists()
    assert (tmp_path / "part.part0.mtx").exists()


def test_study_deterministic_csv(tmp_path):
    meshes = [_write_square_mesh(tmp_path, n) for n in (2, 3, 4)]
    overrides = {
        "problem": "parabolic-sine",
        "family": "PQ",
        "degree": "1",
        "time_steps": "1",
        "t_final": "0.5",
        "study_meshes": ";".join(str(m) for m in meshes),
        "out": str(tmp_path / "study"),
    }
    rows_a = run_study(RunConfig.from_file(None, overrides))
    csv_a = (tmp_path / "study.study.csv").read_text()
    rows_b = run_study(RunConfig.from_file(None, overrides))
    csv_b = (tmp_path / "study.study.csv").read_text()
    assert csv_a == csv_b
    assert len(rows_a) == 3
    assert rows_a[1]["l2_order"] == rows_b[1]["l2_order"]
