"""Run configuration and the orchestration behind the CLI subcommands.

Configs are flat key=value text files; command-line overrides replace file
entries.  Unknown keys are rejected outright.  All reported CSVs except
wall-clock timings are deterministic for a fixed seed in deterministic
accumulation mode.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .assembly import (
    AssemblyConfig,
    assemble_approach1,
    assemble_approach2,
    write_matrix_market,
)
from .basis import Family, build_basis
from .errors import compute_errors, observed_orders, study_rows_to_csv
from .mesh import (
    PolytopicMesh,
    agglomerate,
    identity_agglomeration,
    load_agglomeration_map,
    load_simplicial_mesh,
)
from .model import NAMED_PROBLEMS, ParabolicProblem, PenaltyConfig, classify_boundary_faces
from .solver import solve
from .spacetime import (
    TimePartition,
    march,
    save_solution_vector,
    spacetime_l2_error,
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Validated run parameters; see the README for the key glossary."""

    problem: str = "advdiff3d"
    mesh: str = ""
    agg: str = ""
    degree: int = 1
    family: str = "P"
    approach: int = 2
    mode: str = "deterministic"
    workers: int = 1
    parts: int = 1
    quad_increment: int = 2
    c_sigma: float = 10.0
    t_final: float = 1.0
    time_steps: int = 4
    tol: float = 1e-10
    max_iter: int = 2000
    restart: int = 150
    seed: int = 0
    out: str = "polydg_out"
    study_meshes: str = ""
    study_aggs: str = ""

    def validate(self) -> "RunConfig":
        if self.problem not in NAMED_PROBLEMS:
            raise ConfigError(
                f"unknown problem {self.problem!r}; choices: {sorted(NAMED_PROBLEMS)}"
            )
        if self.degree < 0:
            raise ConfigError("degree must be nonnegative")
        if self.family not in ("P", "PQ"):
            raise ConfigError("family must be P or PQ")
        if self.approach not in (1, 2):
            raise ConfigError("approach must be 1 or 2")
        if self.mode not in ("deterministic", "atomic"):
            raise ConfigError("mode must be deterministic or atomic")
        if self.workers < 1 or self.parts < 1:
            raise ConfigError("workers and parts must be >= 1")
        if self.c_sigma <= 0:
            raise ConfigError("c_sigma must be positive")
        if self.t_final <= 0 or self.time_steps < 1:
            raise ConfigError("time partition must be nonempty")
        if self.tol <= 0:
            raise ConfigError("tol must be positive")
        return self

    @classmethod
    def from_file(cls, path: Optional[str], overrides: Optional[dict] = None) -> "RunConfig":
        values = {}
        if path:
            with open(path, "r", encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.strip()
                    if not line or line.startswith("#"):
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{path}:{lineno}: expected key=value")
                    key, _, val = line.partition("=")
                    values[key.strip()] = val.strip()
        values.update(overrides or {})
        known = {f.name: f.type for f in fields(cls)}
        cfg = cls()
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(cfg, key)
            try:
                if isinstance(current, bool):
                    value = raw in ("1", "true", "yes")
                elif isinstance(current, int):
                    value = int(raw)
                elif isinstance(current, float):
                    value = float(raw)
                else:
                    value = str(raw)
            except ValueError:
                raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
            setattr(cfg, key, value)
        return cfg.validate()

    def assembly_config(self) -> AssemblyConfig:
        return AssemblyConfig(
            quad_increment=self.quad_increment,
            penalty=PenaltyConfig(constant=self.c_sigma),
            n_workers=self.workers,
            mode=self.mode,
        )


def load_mesh(config: RunConfig, mesh_path=None, agg_path=None) -> PolytopicMesh:
    mesh_path = mesh_path or config.mesh
    if not mesh_path:
        raise ConfigError("no mesh path given")
    base = load_simplicial_mesh(mesh_path)
    agg_path = agg_path if agg_path is not None else config.agg
    if agg_path:
        agg = load_agglomeration_map(agg_path, base.n_simplices)
        return agglomerate(base, agg)
    return identity_agglomeration(base)


def load_problem(config: RunConfig):
    return NAMED_PROBLEMS[config.problem]()


def _is_parabolic(problem) -> bool:
    return isinstance(problem, ParabolicProblem)


def run_assemble(config: RunConfig, mesh: Optional[PolytopicMesh] = None):
    """Assemble per the config; writes <out>.mtx and <out>.stats.csv."""
    problem = load_problem(config)
    if _is_parabolic(problem):
        from .spacetime import assemble_slab, build_slab

        spatial = mesh if mesh is not None else load_mesh(config)
        tau = config.t_final / config.time_steps
        slab, specs = build_slab(spatial, (0.0, tau), config.degree, Family(config.family))
        matrix, rhs, stats = assemble_slab(
            slab, problem.coeffs, specs, problem.initial, config.assembly_config(),
            approach=config.approach,
        )
    else:
        coeffs = problem
        pmesh = mesh if mesh is not None else load_mesh(config)
        classify_boundary_faces(pmesh, coeffs)
        specs = build_basis(pmesh, config.degree, Family(config.family))
        if config.approach == 1:
            matrix, rhs, stats = assemble_approach1(
                pmesh, coeffs, specs, config.assembly_config()
            )
        else:
            matrix, rhs, stats, _ = assemble_approach2(
                pmesh, coeffs, specs, config.assembly_config()
            )
    write_matrix_market(f"{config.out}.mtx", matrix)
    with open(f"{config.out}.stats.csv", "w", encoding="utf-8") as fh:
        fh.write(stats.to_csv())
    return matrix, rhs, stats


def run_solve(config: RunConfig):
    """Assemble + solve + (if the exact solution is known) error report."""
    problem = load_problem(config)
    if _is_parabolic(problem):
        raise ConfigError("use the march command for parabolic problems")
    pmesh = load_mesh(config)
    coeffs = problem
    classify_boundary_faces(pmesh, coeffs)
    specs = build_basis(pmesh, config.degree, Family(config.family))
    if config.approach == 1:
        matrix, rhs, stats = assemble_approach1(pmesh, coeffs, specs,
                                                config.assembly_config())
    else:
        matrix, rhs, stats, _ = assemble_approach2(pmesh, coeffs, specs,
                                                   config.assembly_config())
    from .assembly import DofMap

    result = solve(matrix, rhs, tol=config.tol, max_iter=config.max_iter,
                   restart=config.restart, dof_map=DofMap.from_specs(specs))
    save_solution_vector(f"{config.out}.solution.bin", result.x)
    report = None
    if coeffs.exact_solution is not None:
        report = compute_errors(pmesh, specs, result.x, coeffs,
                                config.assembly_config())
    return result, report


def run_march(config: RunConfig):
    problem = load_problem(config)
    if not _is_parabolic(problem):
        raise ConfigError("march needs a parabolic problem")
    spatial = load_mesh(config)
    tp = TimePartition.uniform(config.t_final, config.time_steps)
    solutions, slabs = march(
        spatial, tp, problem, config.degree, Family(config.family),
        config.assembly_config(), dump_path=config.out,
    )
    err = None
    if problem.coeffs.exact_solution is not None:
        err = spacetime_l2_error(slabs, solutions, problem.coeffs.exact_solution)
    return solutions, err


def run_partition(config: RunConfig):
    """Partition, assemble each part independently, verify the stack."""
    from .distribute import (
        assemble_partition,
        gather_and_verify,
        partition_mesh,
        quadrature_cost_weights,
        save_partial_matrix,
        save_partition_map,
    )
    from .assembly import DofMap

    problem = load_problem(config)
    if _is_parabolic(problem):
        raise ConfigError("partitioned assembly applies to the d-dimensional path")
    pmesh = load_mesh(config)
    classify_boundary_faces(pmesh, problem)
    specs = build_basis(pmesh, config.degree, Family(config.family))
    weights = quadrature_cost_weights(pmesh, specs, config.quad_increment)
    partition = partition_mesh(pmesh, config.parts, weights, seed=config.seed)
    save_partition_map(f"{config.out}.parts", partition)
    partials = []
    for part in range(config.parts):
        partial, load, _ = assemble_partition(
            pmesh, partition, part, problem, specs, config.assembly_config()
        )
        save_partial_matrix(f"{config.out}.part{part}", partial)
        partials.append(partial)
    gathered = gather_and_verify(partials, DofMap.from_specs(specs).n_dofs)
    write_matrix_market(f"{config.out}.mtx", gathered)
    return partition, partials, gathered


def run_study(config: RunConfig):
    """Convergence study over a mesh sequence (>= 3 meshes).

    For parabolic problems the time step halves with each level, starting
    from t_final / time_steps.
    """
    mesh_paths = [p for p in config.study_meshes.split(";") if p]
    agg_paths = [p for p in config.study_aggs.split(";") if p]
    if len(mesh_paths) < 3:
        raise ConfigError("a study needs at least 3 meshes (study_meshes=a;b;c)")
    if agg_paths and len(agg_paths) != len(mesh_paths):
        raise ConfigError("study_aggs must match study_meshes")
    problem = load_problem(config)
    rows = []
    for level, mesh_path in enumerate(mesh_paths):
        agg = agg_paths[level] if agg_paths else ""
        pmesh = load_mesh(config, mesh_path, agg)
        if _is_parabolic(problem):
            tp = TimePartition.uniform(config.t_final, config.time_steps * 2**level)
            try:
                solutions, slabs = march(
                    pmesh, tp, problem, config.degree, Family(config.family),
                    config.assembly_config(),
                )
            except RuntimeError as exc:
                rows.append({"h": float(pmesh.element_diameters().max()),
                             "dofs": 0, "l2": float("nan"),
                             "energy": float("nan"), "note": str(exc)})
                continue
            l2 = spacetime_l2_error(slabs, solutions, problem.coeffs.exact_solution)
            dofs = sum(len(v) for v in solutions)
            rows.append({
                "h": float(pmesh.element_diameters().max()),
                "dofs": dofs, "l2": l2, "energy": float("nan"),
            })
        else:
            classify_boundary_faces(pmesh, problem)
            specs = build_basis(pmesh, config.degree, Family(config.family))
            matrix, rhs, _ = assemble_approach1(pmesh, problem, specs,
                                                config.assembly_config())
            from .assembly import DofMap

            result = solve(matrix, rhs, tol=config.tol, max_iter=config.max_iter,
                           restart=config.restart, dof_map=DofMap.from_specs(specs))
            if not result.converged:
                rows.append({"h": float(pmesh.element_diameters().max()),
                             "dofs": matrix.n_rows, "l2": float("nan"),
                             "energy": float("nan"),
                             "note": f"solver stalled at {result.residual:.2e}"})
                continue
            report = compute_errors(pmesh, specs, result.x, problem,
                                    config.assembly_config())
            rows.append({"h": report.h_max, "dofs": report.dofs,
                         "l2": report.l2, "energy": report.energy})

    hs = [r["h"] for r in rows]
    l2s = [r["l2"] for r in rows]
    energies = [r["energy"] for r in rows]
    for k, order in enumerate(observed_orders(hs, l2s)):
        rows[k + 1]["l2_order"] = order
    if not any(np.isnan(energies)):
        for k, order in enumerate(observed_orders(hs, energies)):
            rows[k + 1]["energy_order"] = order
    csv = study_rows_to_csv(rows)
    with open(f"{config.out}.study.csv", "w", encoding="utf-8") as fh:
        fh.write(csv)
    return rows


def run_bench(config: RunConfig):
    """Assemble with both approaches and write their timing CSVs."""
    pmesh = load_mesh(config)
    problem = load_problem(config)
    out = {}
    if _is_parabolic(problem):
        from .spacetime import assemble_slab, build_slab

        tau = config.t_final / config.time_steps
        slab, specs = build_slab(pmesh, (0.0, tau), config.degree, Family(config.family))
        for approach in (1, 2):
            _, _, stats = assemble_slab(
                slab, problem.coeffs, specs, problem.initial,
                config.assembly_config(), approach=approach,
            )
            out[approach] = stats
    else:
        classify_boundary_faces(pmesh, problem)
        specs = build_basis(pmesh, config.degree, Family(config.family))
        _, _, stats1 = assemble_approach1(pmesh, problem, specs,
                                          config.assembly_config())
        _, _, stats2, _ = assemble_approach2(pmesh, problem, specs,
                                             config.assembly_config())
        out = {1: stats1, 2: stats2}
    for approach, stats in out.items():
        with open(f"{config.out}.approach{approach}.csv", "w", encoding="utf-8") as fh:
            fh.write(stats.to_csv())
    return out
