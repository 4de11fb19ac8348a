"""Command-line surface: simulate data, fit or ingest reference models,
rank and validate feature subsets, project onto chosen subsets, and run
the gain-identity verification.  Every command writes machine-readable
CSV/NDJSON outputs plus a manifest recording the resolved configuration,
seeds, and input digests; identical manifests reproduce identical bytes.

Exit codes: 2 flag validation, 3 input parsing, 4 numerical failure.
"""

from __future__ import annotations

import functools
import hashlib
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .errors import ProjkitError
from .gains import verify_expected_gain, verify_gain_identity
from .glm import Family
from .projection import ProjectedSubmodel, cluster_draws, project
from .reference import (
    ReferenceModel,
    SpcConfig,
    SpcTransform,
    fit_spc_reference,
    ingest_draws,
    write_design_csv,
    write_draws_ndjson,
)
from .search import SearchConfig, SelectionPath, build_path
from .simdata import ToyConfig, generate_toy
from .validation import cv_varsel, weighted_mean_se

EXIT_PARSE = 3
EXIT_NUMERIC = 4


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            click.echo(f"input error: {exc}", err=True)
            sys.exit(EXIT_PARSE)
        except (ProjkitError, np.linalg.LinAlgError, FloatingPointError) as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)

    return wrapper


# ---------------------------------------------------------------------------
# file helpers


def fmt(x: float) -> str:
    """Round-trip decimal formatting, locale independent."""
    return repr(float(x))


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def read_table(path) -> np.ndarray:
    """Numeric CSV with one header row."""
    with open(path) as fh:
        header = fh.readline()
        if not header.strip():
            raise ValueError(f"{path}: missing header")
        rows = []
        ncol = len(header.strip().split(","))
        for ln, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != ncol:
                raise ValueError(f"{path}:{ln}: expected {ncol} columns")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise ValueError(f"{path}:{ln}: non-numeric value") from exc
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return np.asarray(rows)


def read_vector(path) -> np.ndarray:
    arr = read_table(path)
    if arr.shape[1] != 1:
        raise ValueError(f"{path}: expected a single column")
    return arr[:, 0]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outdir: Path, command: str, config: dict, inputs: list) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "version": __version__,
    }
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def ensure_outdir(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# reference model persistence


def save_reference(outdir: Path, model: ReferenceModel, spc_config: SpcConfig | None) -> None:
    write_design_csv(outdir / "design.csv", model.draws.ref_design)
    write_draws_ndjson(outdir / "draws.ndjson", model.draws)
    if model.transform is not None:
        meta = {
            "family": model.family.kind,
            "gamma_chosen": model.gamma_chosen,
            "mask": [int(j) for j in model.transform.mask],
            "center": [float(v) for v in model.transform.center],
            "rotation": [[float(v) for v in row] for row in model.transform.rotation],
        }
        if spc_config is not None:
            meta["config"] = {
                "n_components": spc_config.n_components,
                "n_gamma": spc_config.n_gamma,
                "cv_folds": spc_config.cv_folds,
                "n_draws": spc_config.n_draws,
                "seed": spc_config.seed,
            }
        with open(outdir / "spc.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_reference(ref_dir: str, family: Family) -> tuple[ReferenceModel, SpcConfig | None]:
    ref_dir = Path(ref_dir)
    model = ingest_draws(ref_dir / "design.csv", ref_dir / "draws.ndjson", family)
    spc_path = ref_dir / "spc.json"
    if not spc_path.exists():
        return model, None
    with open(spc_path) as fh:
        meta = json.load(fh)
    if meta.get("family") != family.kind:
        raise ValueError(f"reference was fit for family {meta.get('family')!r}, not {family.kind!r}")
    transform = SpcTransform(
        mask=np.asarray(meta["mask"], dtype=int),
        center=np.asarray(meta["center"], dtype=float),
        rotation=np.asarray(meta["rotation"], dtype=float),
    )
    model = ReferenceModel(
        draws=model.draws,
        family=family,
        transform=transform,
        gamma_chosen=meta.get("gamma_chosen"),
    )
    cfg = None
    if "config" in meta:
        cfg = SpcConfig(**meta["config"])
    return model, cfg


# ---------------------------------------------------------------------------
# shared option parsing


def _positive(name):
    def check(ctx, param, value):
        if value is not None and value <= 0:
            raise click.BadParameter(f"{name} must be positive")
        return value

    return check


def _check_rho(ctx, param, value):
    if not 0.0 <= value < 1.0:
        raise click.BadParameter("--rho must lie in [0, 1): feature noise variance is 1 - rho")
    return value


def _family_option(fn):
    return click.option(
        "--family",
        type=click.Choice(["gaussian", "bernoulli", "poisson"]),
        default="gaussian",
        show_default=True,
    )(fn)


def _seed_option(fn):
    return click.option(
        "--seed", type=int, default=0, envvar="PROJKIT_SEED", show_default=True
    )(fn)


def _search_options(fn):
    for opt in reversed(
        [
            click.option("--method", type=click.Choice(["forward", "l1"]), default="l1", show_default=True),
            click.option("--alpha", type=float, default=1.0, show_default=True),
            click.option("--nlambda", type=int, default=100, show_default=True),
            click.option("--max-size", type=int, default=None),
            click.option("--relax/--no-relax", default=True, show_default=True),
            click.option("--relax-ridge", type=float, default=0.0, show_default=True),
            click.option("--clusters-pred", type=int, default=10, show_default=True),
        ]
    ):
        fn = opt(fn)
    return fn


def _search_config(method, alpha, nlambda, max_size, relax, relax_ridge) -> SearchConfig:
    try:
        return SearchConfig(
            method=method,
            alpha=alpha,
            nlambda=nlambda,
            max_size=max_size,
            relax=relax,
            relax_ridge=relax_ridge,
        )
    except ValueError as exc:
        raise click.BadParameter(str(exc))


@click.group()
@click.version_option(version=__version__, prog_name="projkit")
def main():
    """Projection-based feature selection against a reference model."""


# ---------------------------------------------------------------------------
# simulate


@main.command()
@click.option("--n", type=int, required=True, callback=_positive("--n"))
@click.option("--p", type=int, required=True, callback=_positive("--p"))
@click.option("--p-rel", type=int, required=True)
@click.option("--rho", type=float, required=True, callback=_check_rho)
@click.option("--task", type=click.Choice(["regression", "classification"]), default="regression", show_default=True)
@_seed_option
@click.option("--out", required=True)
@handle_errors
def simulate(n, p, p_rel, rho, task, seed, out):
    """Draw one latent-factor data set and write X.csv, y.csv, f.csv."""
    try:
        config = ToyConfig(n=n, p=p, p_rel=p_rel, rho=rho, seed=seed, task=task)
    except ValueError as exc:
        raise click.BadParameter(str(exc))
    data = generate_toy(config)
    outdir = ensure_outdir(out)
    write_csv(outdir / "X.csv", [f"x{j}" for j in range(1, p + 1)], data.X.tolist())
    write_csv(outdir / "y.csv", ["y"], [[v] for v in data.y])
    write_csv(outdir / "f.csv", ["f"], [[v] for v in data.f])
    write_manifest(
        outdir,
        "simulate",
        {"n": n, "p": p, "p_rel": p_rel, "rho": rho, "task": task, "seed": seed},
        [],
    )
    click.echo(f"wrote {n}x{p} data set to {outdir}")


# ---------------------------------------------------------------------------
# fit-ref


@main.command("fit-ref")
@click.option("--x", "x_path", required=True)
@click.option("--y", "y_path", required=True)
@_family_option
@click.option("--n-components", type=int, default=3, show_default=True)
@click.option("--n-gamma", type=int, default=7, show_default=True)
@click.option("--cv-folds", type=int, default=5, show_default=True)
@click.option("--draws", "n_draws", type=int, default=4000, show_default=True)
@_seed_option
@click.option("--out", required=True)
@handle_errors
def fit_ref(x_path, y_path, family, n_components, n_gamma, cv_folds, n_draws, seed, out):
    """Fit the supervised-principal-components reference model."""
    X = read_table(x_path)
    y = read_vector(y_path)
    fam = Family.of(family)
    try:
        config = SpcConfig(
            n_components=n_components, n_gamma=n_gamma, cv_folds=cv_folds, n_draws=n_draws, seed=seed
        )
    except ValueError as exc:
        raise click.BadParameter(str(exc))
    model = fit_spc_reference(X, y, fam, config)
    outdir = ensure_outdir(out)
    save_reference(outdir, model, config)
    write_manifest(
        outdir,
        "fit-ref",
        {
            "family": family,
            "n_components": n_components,
            "n_gamma": n_gamma,
            "cv_folds": cv_folds,
            "n_draws": n_draws,
            "seed": seed,
        },
        [x_path, y_path],
    )
    kept = model.screening_mask.size
    click.echo(f"reference fit: gamma={model.gamma_chosen:.6g}, {kept} features screened in")


# ---------------------------------------------------------------------------
# varsel / cv-varsel


def _submodel_record(k: int, sub: ProjectedSubmodel) -> dict:
    rec = {
        "k": k,
        "features": [int(j) for j in sub.feature_set],
        "loss": float(sub.loss),
        "clusters": [],
    }
    for c in range(sub.weights.size):
        cl = {
            "weight": float(sub.weights[c]),
            "intercept": float(sub.coeffs[c, 0]),
            "coefs": [float(v) for v in sub.coeffs[c, 1:]],
        }
        if sub.dispersions is not None:
            cl["dispersion"] = float(sub.dispersions[c])
        rec["clusters"].append(cl)
    return rec


def _write_path(outdir: Path, path: SelectionPath) -> None:
    write_csv(outdir / "order.csv", ["rank", "feature"], [[r + 1, int(j)] for r, j in enumerate(path.order)])
    write_csv(outdir / "path.csv", ["k", "loss"], [[k, float(l)] for k, l in enumerate(path.losses)])
    with open(outdir / "submodels.ndjson", "w") as fh:
        for k, sub in enumerate(path.submodels):
            fh.write(json.dumps(_submodel_record(k, sub), sort_keys=True) + "\n")


@main.command()
@click.option("--x", "x_path", required=True)
@click.option("--y", "y_path", required=True)
@click.option("--ref-dir", required=True)
@_family_option
@_search_options
@_seed_option
@click.option("--out", required=True)
@handle_errors
def varsel(x_path, y_path, ref_dir, family, method, alpha, nlambda, max_size, relax, relax_ridge, clusters_pred, seed, out):
    """Rank features and project every path size on the full data."""
    X = read_table(x_path)
    y = read_vector(y_path)
    fam = Family.of(family)
    fam.validate_response(y)
    config = _search_config(method, alpha, nlambda, max_size, relax, relax_ridge)
    model, _ = load_reference(ref_dir, fam)
    draws = model.draws
    ref_select = cluster_draws(draws, fam, 1)
    ref_predict = cluster_draws(draws, fam, min(clusters_pred, draws.n_draws), seed)
    path = build_path(fam, X, ref_select, ref_predict, config)
    outdir = ensure_outdir(out)
    _write_path(outdir, path)
    write_manifest(
        outdir,
        "varsel",
        {
            "family": family,
            "method": method,
            "alpha": alpha,
            "nlambda": nlambda,
            "max_size": max_size,
            "relax": relax,
            "relax_ridge": relax_ridge,
            "clusters_pred": clusters_pred,
            "seed": seed,
        },
        [x_path, y_path, Path(ref_dir) / "design.csv", Path(ref_dir) / "draws.ndjson"],
    )
    click.echo(f"path over {path.max_size} sizes written to {outdir}")


@main.command("cv-varsel")
@click.option("--x", "x_path", required=True)
@click.option("--y", "y_path", required=True)
@click.option("--ref-dir", required=True)
@_family_option
@click.option("--scheme", type=click.Choice(["kfold", "loo", "loo-subsample"]), default="loo", show_default=True)
@click.option("--folds", type=int, default=10, show_default=True)
@click.option("--subsample", type=int, default=None)
@click.option("--rule", type=click.Choice(["ref-1se", "best-1se"]), default="ref-1se", show_default=True)
@click.option("--threads", type=int, default=None, help="worker cap; default: hardware parallelism")
@_search_options
@_seed_option
@click.option("--out", required=True)
@handle_errors
def cv_varsel_cmd(
    x_path, y_path, ref_dir, family, scheme, folds, subsample, rule, threads,
    method, alpha, nlambda, max_size, relax, relax_ridge, clusters_pred, seed, out,
):
    """Cross-validated selection with per-size relative utilities."""
    X = read_table(x_path)
    y = read_vector(y_path)
    fam = Family.of(family)
    fam.validate_response(y)
    config = _search_config(method, alpha, nlambda, max_size, relax, relax_ridge)
    model, spc_config = load_reference(ref_dir, fam)
    scheme_key = scheme.replace("-", "_")
    if scheme_key == "loo_subsample" and subsample is None:
        raise click.BadParameter("--scheme loo-subsample requires --subsample")
    if scheme_key == "kfold":
        if spc_config is None:
            raise click.BadParameter("--scheme kfold refits the reference; --ref-dir must hold an spc.json")

        def builder(X_tr, y_tr):
            return fit_spc_reference(X_tr, y_tr, fam, spc_config)

        reference = builder
    else:
        reference = model
    threads = threads or os.cpu_count() or 1
    result = cv_varsel(
        fam,
        X,
        y,
        reference,
        config,
        scheme=scheme_key,
        folds=folds,
        subsample=subsample,
        clusters_pred=clusters_pred,
        seed=seed,
        threads=threads,
    )
    summary = result.summary
    n_bad = (
        int(np.sum(summary.pointwise.khat > 0.7)) if summary.pointwise.khat is not None else 0
    )
    outdir = ensure_outdir(out)
    rows = []
    for idx, k in enumerate(summary.sizes):
        rows.append(
            [
                str(int(k)),
                float(summary.delta_mean[idx]),
                float(summary.delta_se[idx]),
                float(summary.abs_mean[idx]),
                float(summary.abs_se[idx]),
                n_bad,
            ]
        )
    # self-comparison row: the reference against itself
    _, ref_se = weighted_mean_se(summary.pointwise.u_ref, summary.pointwise.weights)
    rows.append(["full", 0.0, 0.0, float(summary.ref_mean), float(ref_se), n_bad])
    write_csv(outdir / "sizes.csv", ["k", "delta_mlpd", "se", "mlpd", "se_abs", "n_khat_gt_07"], rows)
    chosen = {
        "rule": rule,
        "size": int(summary.selected_size[rule.replace("-", "_")]),
        "ref_1se": int(summary.selected_size["ref_1se"]),
        "best_1se": int(summary.selected_size["best_1se"]),
    }
    with open(outdir / "chosen.json", "w") as fh:
        json.dump(chosen, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_path(outdir, result.path)
    write_manifest(
        outdir,
        "cv-varsel",
        {
            "family": family,
            "scheme": scheme,
            "folds": folds,
            "subsample": subsample,
            "rule": rule,
            "method": method,
            "alpha": alpha,
            "nlambda": nlambda,
            "max_size": max_size,
            "relax": relax,
            "relax_ridge": relax_ridge,
            "clusters_pred": clusters_pred,
            "seed": seed,
        },
        [x_path, y_path, Path(ref_dir) / "design.csv", Path(ref_dir) / "draws.ndjson"],
    )
    click.echo(f"chosen size ({rule}): {chosen['size']}")


# ---------------------------------------------------------------------------
# project


@main.command("project")
@click.option("--x", "x_path", required=True)
@click.option("--ref-dir", required=True)
@_family_option
@click.option("--features", default=None, help="comma-separated candidate indices")
@click.option("--size", type=int, default=None, help="prefix length of a saved order")
@click.option("--path-dir", default=None, help="varsel output holding order.csv")
@click.option("--clusters", type=int, default=10, show_default=True)
@click.option("--ridge", type=float, default=0.0, show_default=True)
@_seed_option
@click.option("--out", required=True)
@handle_errors
def project_cmd(x_path, ref_dir, family, features, size, path_dir, clusters, ridge, seed, out):
    """Project the reference onto one feature subset."""
    if (features is None) == (size is None):
        raise click.BadParameter("give exactly one of --features or --size")
    X = read_table(x_path)
    fam = Family.of(family)
    model, _ = load_reference(ref_dir, fam)
    if features is not None:
        try:
            feature_set = [int(tok) for tok in features.split(",") if tok.strip() != ""]
        except ValueError:
            raise click.BadParameter("--features must be comma-separated integers")
    else:
        if path_dir is None:
            raise click.BadParameter("--size needs --path-dir pointing at a varsel output")
        order = read_table(Path(path_dir) / "order.csv")[:, 1].astype(int)
        if size > order.size:
            raise click.BadParameter(f"--size exceeds the saved order length {order.size}")
        feature_set = order[:size].tolist()
    ref = cluster_draws(model.draws, fam, min(clusters, model.draws.n_draws), seed)
    sub = project(fam, X, feature_set, ref, ridge)
    outdir = ensure_outdir(out)
    header = ["cluster", "weight", "intercept"] + [f"coef_x{j + 1}" for j in sub.feature_set]
    if sub.dispersions is not None:
        header.append("dispersion")
    rows = []
    for c in range(sub.weights.size):
        row = [c, float(sub.weights[c]), float(sub.coeffs[c, 0])] + [float(v) for v in sub.coeffs[c, 1:]]
        if sub.dispersions is not None:
            row.append(float(sub.dispersions[c]))
        rows.append(row)
    write_csv(outdir / "coefficients.csv", header, rows)
    with open(outdir / "projection.json", "w") as fh:
        json.dump(
            {"features": [int(j) for j in sub.feature_set], "loss": float(sub.loss)},
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    write_manifest(
        outdir,
        "project",
        {
            "family": family,
            "features": [int(j) for j in feature_set],
            "clusters": clusters,
            "ridge": ridge,
            "seed": seed,
        },
        [x_path, Path(ref_dir) / "design.csv", Path(ref_dir) / "draws.ndjson"],
    )
    click.echo(f"projection loss {sub.loss:.6g}")


# ---------------------------------------------------------------------------
# theory-check


@main.command("theory-check")
@click.option("--instances", type=int, default=1000, show_default=True)
@click.option("--mc-instances", type=int, default=20, show_default=True)
@click.option("--mc-reps", type=int, default=100_000, show_default=True)
@_seed_option
@click.option("--out", required=True)
@handle_errors
def theory_check(instances, mc_instances, mc_reps, seed, out):
    """Verify the gain identities numerically and write a report."""
    identity = verify_gain_identity(instances, seed)
    mc = verify_expected_gain(mc_instances, mc_reps, seed + 1)
    outdir = ensure_outdir(out)
    write_csv(
        outdir / "report.csv",
        ["check", "instances", "discrepancy", "passed"],
        [
            [identity["check"], identity["instances"], float(identity["max_abs_discrepancy"]), identity["passed"]],
            ["projection_trace_equals_dim", identity["instances"], float(identity["trace_discrepancy"]), identity["passed"]],
            [mc["check"], mc["instances"], float(mc["max_abs_z"]), mc["passed"]],
        ],
    )
    write_manifest(
        outdir,
        "theory-check",
        {"instances": instances, "mc_instances": mc_instances, "mc_reps": mc_reps, "seed": seed},
        [],
    )
    ok = identity["passed"] and mc["passed"]
    click.echo(
        f"identity max discrepancy {identity['max_abs_discrepancy']:.3e}; "
        f"expected-gain max |z| {mc['max_abs_z']:.3f}; {'all checks passed' if ok else 'CHECK FAILED'}"
    )
    if not ok:
        sys.exit(EXIT_NUMERIC)


if __name__ == "__main__":
    main()
