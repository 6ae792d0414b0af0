"""Experiment harness.

Subcommands:

    generate-data   build the dataset files for a config
    train           train the score networks the approach needs
    evaluate        per-SNR learned bounds for every k_eval, JSON + CSV
    diagnose        measured errors and theoretical error budgets per SNR
    reproduce       desk-scale result tables behind the standard figures

Exit codes: 0 success, 2 config error, 3 numerical failure (divergence or
singular FIM with no usable rows), 4 partial results.
"""

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import bound, data, diagnostics, kernels, linalg, models, nets, physenc, scorematch
from .config import ConfigError, load_config
from .linalg import NotPositiveDefiniteError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_PARTIAL = 4


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _dataset_base(cfg):
    return cfg.out_dir / "dataset"


def _ckpt_path(cfg, role):
    return cfg.out_dir / "checkpoints" / f"{role}.ckpt"


def _sanitize(obj):
    """Strict-JSON payloads: arrays to lists, non-finite floats to None."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, linalg.SymMatrix):
        return _sanitize(obj.entries.tolist())
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _write_json(path, payload, cfg=None):
    if cfg is not None:
        payload = {"config_hash": cfg.config_hash, "seed": cfg.seed, **payload}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_sanitize(payload), indent=2, sort_keys=True,
                               allow_nan=False) + "\n")
    return path


def _load_dataset(cfg):
    base = _dataset_base(cfg)
    manifest = base.parent / f"{base.name}.manifest.json"
    if not manifest.exists():
        raise ConfigError(
            f"dataset not found at {manifest}; run generate-data first")
    return data.load_dataset(base)


def _model_for(cfg, dataset=None):
    model = cfg.build_model()
    if dataset is not None and dataset.model_descriptor != model.descriptor():
        raise ConfigError("dataset manifest model does not match the config model")
    return model


def _build_score_model(cfg, model, dataset, role):
    nc = cfg.net_config(role)
    d_theta, d_x = dataset.d_theta, dataset.d_x
    if role == "prior":
        return nets.PriorScoreNet(d_theta, nc.n_blocks, nc.width, seed=cfg.seed)
    if role == "posterior":
        return nets.PosteriorScoreNet(d_theta, d_x, dataset.m_d, nc.n_blocks,
                                      nc.width, cond_dim=1, seed=cfg.seed)
    if role == "fisher":
        if nc.physics_encoded:
            return physenc.PhysicsEncodedNet(model, nc.n_blocks, nc.width,
                                             cond_dim=1,
                                             residual_feature=nc.residual_feature,
                                             seed=cfg.seed)
        return nets.FisherScoreNet(d_theta, d_x, nc.n_blocks, nc.width,
                                   cond_dim=1, seed=cfg.seed)
    raise ConfigError(f"unknown net role {role!r}")


def _ckpt_kind(score_model):
    if isinstance(score_model, physenc.PhysicsEncodedNet):
        return "physics_encoded"
    if isinstance(score_model, nets.PriorScoreNet):
        return "prior"
    if isinstance(score_model, nets.PosteriorScoreNet):
        return "posterior"
    return "fisher"


def _oracle_scores(model, dataset):
    """Analytic score functions when the model admits them, else None."""
    try:
        g = dataset.groups[0]
        model.fisher_score(g.measurements[:1, 0, :], g.theta[:1],
                           snr_db=g.snr_db)
    except (models.NoAnalyticScoreError, models.ModelError):
        return None
    return {
        "fisher": bound.analytic_fisher_score(model),
        "prior": bound.analytic_prior_score(model),
        "posterior": bound.analytic_posterior_score(model),
    }


# ---------------------------------------------------------------------------
# generate-data
# ---------------------------------------------------------------------------

def cmd_generate_data(cfg):
    model = _model_for(cfg)
    ds = data.generate_dataset(model, cfg.snr_db, cfg.n_per_snr, cfg.m_d, cfg.seed)
    manifest = data.save_dataset(ds, _dataset_base(cfg))
    _write_json(cfg.out_dir / "generate_report.json",
                {"manifest": manifest.name,
                 "n_per_snr": cfg.n_per_snr, "m_d": cfg.m_d,
                 "snr_db": cfg.snr_db}, cfg)
    print(f"wrote {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(cfg):
    dataset = _load_dataset(cfg)
    model = _model_for(cfg, dataset)
    trained = {}

    def run(role, prior_fn=None):
        sm = _build_score_model(cfg, model, dataset, role)
        kind = "fisher" if role == "fisher" else role
        report = scorematch.train(sm, kind, dataset, cfg.train_config(role),
                                  prior_score_fn=prior_fn)
        path = _ckpt_path(cfg, role)
        scorematch.save_score_model(path, sm, _ckpt_kind(sm))
        _write_json(cfg.out_dir / f"train_report_{role}.json",
                    report.as_dict(), cfg)
        trained[role] = sm
        print(f"trained {role}: final loss {report.final_loss:.6g} -> {path}")
        return sm

    try:
        if cfg.approach in ("measurement-prior", "both"):
            prior_model = run("prior")
            prior_fn = bound.learned_prior_score(prior_model)
            run("fisher", prior_fn=prior_fn)
        if cfg.approach in ("posterior", "both"):
            run("posterior")
    except scorematch.TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _load_score_fns(cfg, model, dataset):
    """Score callables for evaluation, per the configured source."""
    if cfg.score_source == "analytic":
        oracle = _oracle_scores(model, dataset)
        if oracle is None:
            raise ConfigError(
                "score_source='analytic' but the model has no analytic score")
        return oracle
    fns = {}
    if cfg.approach in ("measurement-prior", "both"):
        prior_sm = scorematch.load_score_model(_ckpt_path(cfg, "prior"))
        fisher_sm = scorematch.load_score_model(_ckpt_path(cfg, "fisher"), model=model)
        fns["prior"] = bound.learned_prior_score(prior_sm)
        fns["fisher"] = bound.learned_fisher_score(fisher_sm)
    if cfg.approach in ("posterior", "both"):
        post_sm = scorematch.load_score_model(_ckpt_path(cfg, "posterior"))
        fns["posterior"] = bound.learned_posterior_score(post_sm)
    return fns


def evaluate_bounds(cfg, model, dataset, fns):
    """Per-SNR LBCRB rows for each approach and k_eval."""
    rows = []
    if "fisher" in fns and cfg.approach in ("measurement-prior", "both"):
        prior_est = bound.estimate_prior_fim(fns["prior"], dataset,
                                             subtract_mean=cfg.subtract_mean)
        for snr in cfg.snr_db:
            meas_est = bound.estimate_measurement_fim(
                fns["fisher"], dataset, snr, subtract_mean=cfg.subtract_mean)
            for k in cfg.k_eval:
                rows.append(_bound_row("measurement-prior", snr, k,
                                       bound.assemble_lbfim(meas_est, prior_est, k)))
    if "posterior" in fns and cfg.approach in ("posterior", "both"):
        for snr in cfg.snr_db:
            est = bound.estimate_posterior_fim(fns["posterior"], dataset, snr,
                                               subtract_mean=cfg.subtract_mean)
            rows.append(_bound_row("posterior", snr, dataset.m_d, est.matrix))
    return rows


def _bound_row(approach, snr, k, lbfim):
    row = {"approach": approach, "snr_db": snr, "k_eval": k,
           "lbfim": lbfim.entries, "singular": False,
           "lbcrb": None, "trace_lbcrb": math.nan}
    try:
        crb = bound.lbcrb(lbfim)
        row["lbcrb"] = crb.entries
        row["trace_lbcrb"] = float(np.trace(crb.entries))
    except NotPositiveDefiniteError as exc:
        row["singular"] = True
        row["failure"] = str(exc)
    return row


def _write_csv(path, rows, d_theta):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["approach", "snr_db", "k_eval", "singular", "trace_lbcrb"]
    cols += [f"lbcrb_{i}_{j}" for i in range(d_theta) for j in range(d_theta)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            flat = [""] * (d_theta * d_theta)
            if r["lbcrb"] is not None:
                flat = [f"{v:.12g}" for v in np.asarray(r["lbcrb"]).ravel()]
            w.writerow([r["approach"], r["snr_db"], r["k_eval"],
                        int(r["singular"]),
                        "" if math.isnan(r["trace_lbcrb"]) else f"{r['trace_lbcrb']:.12g}"]
                       + flat)
    return path


def cmd_evaluate(cfg):
    dataset = _load_dataset(cfg)
    model = _model_for(cfg, dataset)
    fns = _load_score_fns(cfg, model, dataset)
    rows = evaluate_bounds(cfg, model, dataset, fns)
    _write_json(cfg.out_dir / "bound_report.json",
                {"score_source": cfg.score_source, "rows": rows}, cfg)
    csv_path = _write_csv(cfg.out_dir / "results.csv", rows, dataset.d_theta)
    n_singular = sum(r["singular"] for r in rows)
    print(f"wrote {csv_path} ({len(rows)} rows, {n_singular} singular)")
    if n_singular == len(rows):
        return EXIT_NUMERIC
    return EXIT_PARTIAL if n_singular else EXIT_OK


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------

def _posterior_budget(cfg, model, dataset, fns, oracle, snr):
    g = dataset.group(snr)
    n = g.n_records
    scores = fns["posterior"](g.theta, g.measurements, snr)
    fim_hat = linalg.SymMatrix(kernels.kahan_mean_outer(scores))
    c_b = diagnostics.realized_score_bounds("posterior", scores=scores)
    d_bar = linalg.intrinsic_dim(fim_hat)
    emp = diagnostics.empirical_error_bound_posterior(
        c_b, float(np.trace(fim_hat.entries)), d_bar, cfg.u, n)
    budget = diagnostics.ErrorBudget(
        snr_db=snr, approach="posterior", u=cfg.u,
        eta_empirical=emp.eta, n_threshold=emp.n_threshold,
        empirical_valid=emp.valid, c_bound={"c_B": c_b},
        intrinsic_dim=d_bar, plug_in=oracle is None)
    try:
        budget.condition_number = linalg.condition_number(fim_hat)
    except NotPositiveDefiniteError:
        pass
    eta_a = math.nan
    fb_norm = linalg.spectral_norm(fim_hat)
    fb_cond = None
    if oracle is not None:
        ref_scores = oracle["posterior"](g.theta, g.measurements, snr)
        if isinstance(model, models.LinearModel):
            fb_ref = (dataset.m_d * model.measurement_fim(snr).entries
                      + model.prior.fim().entries)
        else:
            fb_ref = kernels.kahan_mean_outer(ref_scores)
        tr_ref = float(np.trace(fb_ref))
        sre_b = diagnostics.score_relative_error(scores, ref_scores, tr_ref)
        budget.sre["sRE_B"] = sre_b
        approx = diagnostics.approx_error_bound_posterior(
            sre_b, linalg.intrinsic_dim(fb_ref))
        budget.eta_approx, budget.eta_approx_valid = approx.value, approx.valid
        eta_a = approx.value if approx.valid else math.nan
        budget.measured_fim_re = diagnostics.relative_error(fim_hat.entries, fb_ref)
        fb_norm = linalg.spectral_norm(fb_ref)
        fb_cond = linalg.condition_number(fb_ref)
        try:
            budget.measured_re = diagnostics.relative_error(
                bound.lbcrb(fim_hat).entries, np.linalg.inv(fb_ref))
        except NotPositiveDefiniteError:
            pass
    if math.isfinite(eta_a):
        inv = diagnostics.inversion_error_bound(
            "posterior", fim_hat.entries, linalg.spectral_norm(fim_hat),
            fb_norm, emp.eta, eta_a, fb_condition=fb_cond)
        budget.re_bound = inv.re_bound
        budget.invertibility_ok = inv.invertibility_ok
    return budget


def _mp_budget(cfg, model, dataset, fns, oracle, snr, k):
    g = dataset.group(snr)
    n = g.n_records
    m = dataset.m_d
    theta_rep = np.repeat(g.theta, m, axis=0)
    x_flat = g.measurements.reshape(-1, dataset.d_x)
    f_scores = fns["fisher"](x_flat, theta_rep, snr)
    p_scores = fns["prior"](dataset.all_theta())
    fm_hat = kernels.kahan_mean_outer(f_scores)
    fp_hat = kernels.kahan_mean_outer(p_scores)
    lbfim_hat = linalg.SymMatrix(k * fm_hat + fp_hat)
    c_m = diagnostics.realized_score_bounds(
        "measurement",
        fisher_scores_by_record=f_scores.reshape(n, m, dataset.d_theta))
    c_p = diagnostics.realized_score_bounds("prior", scores=p_scores)
    d_bar = linalg.intrinsic_dim(lbfim_hat)
    emp = diagnostics.empirical_error_bound_mp(
        c_m, c_p, float(np.trace(fm_hat)), float(np.trace(fp_hat)),
        d_bar, cfg.u, n, k)
    budget = diagnostics.ErrorBudget(
        snr_db=snr, approach="measurement-prior", u=cfg.u,
        eta_empirical=emp.eta, n_threshold=emp.n_threshold,
        empirical_valid=emp.valid, c_bound={"c_M": c_m, "c_P": c_p},
        intrinsic_dim=d_bar, plug_in=oracle is None)
    try:
        budget.condition_number = linalg.condition_number(lbfim_hat)
    except NotPositiveDefiniteError:
        pass
    eta_a = math.nan
    fb_norm = linalg.spectral_norm(lbfim_hat)
    fb_cond = None
    if oracle is not None:
        ref_f = oracle["fisher"](x_flat, theta_rep, snr)
        ref_p = oracle["prior"](dataset.all_theta())
        if isinstance(model, models.LinearModel):
            fm_ref = model.measurement_fim(snr).entries
        else:
            fm_ref = kernels.kahan_mean_outer(ref_f)
        fp_ref = model.prior.fim().entries
        fb_ref = k * fm_ref + fp_ref
        sre_m = diagnostics.score_relative_error(f_scores, ref_f,
                                                 float(np.trace(fm_ref)))
        sre_p = diagnostics.score_relative_error(p_scores, ref_p,
                                                 float(np.trace(fp_ref)))
        budget.sre["sRE_M"] = sre_m
        budget.sre["sRE_P"] = sre_p
        approx = diagnostics.approx_error_bound_mp(
            sre_m, sre_p, linalg.intrinsic_dim(fm_ref),
            linalg.intrinsic_dim(fp_ref),
            linalg.spectral_norm(k * fm_ref), linalg.spectral_norm(fp_ref),
            linalg.spectral_norm(fb_ref))
        budget.eta_approx, budget.eta_approx_valid = approx.value, approx.valid
        eta_a = approx.value if approx.valid else math.nan
        budget.measured_fim_re = diagnostics.relative_error(lbfim_hat.entries, fb_ref)
        fb_norm = linalg.spectral_norm(fb_ref)
        fb_cond = linalg.condition_number(fb_ref)
        try:
            budget.measured_re = diagnostics.relative_error(
                bound.lbcrb(lbfim_hat).entries, np.linalg.inv(fb_ref))
        except NotPositiveDefiniteError:
            pass
    if math.isfinite(eta_a):
        inv = diagnostics.inversion_error_bound(
            "measurement-prior", lbfim_hat.entries,
            linalg.spectral_norm(lbfim_hat), fb_norm, emp.eta, eta_a,
            fb_condition=fb_cond)
        budget.re_bound = inv.re_bound
        budget.invertibility_ok = inv.invertibility_ok
    return budget, k


def cmd_diagnose(cfg):
    dataset = _load_dataset(cfg)
    model = _model_for(cfg, dataset)
    fns = _load_score_fns(cfg, model, dataset)
    oracle = _oracle_scores(model, dataset)
    budgets = []
    if cfg.approach in ("measurement-prior", "both"):
        for snr in cfg.snr_db:
            for k in cfg.k_eval:
                budget, k_used = _mp_budget(cfg, model, dataset, fns, oracle, snr, k)
                entry = budget.as_dict()
                entry["k_eval"] = k_used
                budgets.append(entry)
    if cfg.approach in ("posterior", "both"):
        for snr in cfg.snr_db:
            budget = _posterior_budget(cfg, model, dataset, fns, oracle, snr)
            entry = budget.as_dict()
            entry["k_eval"] = dataset.m_d
            budgets.append(entry)
    _write_json(cfg.out_dir / "diagnostics.json",
                {"u": cfg.u, "oracle_available": oracle is not None,
                 "budgets": budgets}, cfg)
    print(f"wrote {cfg.out_dir / 'diagnostics.json'} ({len(budgets)} budgets)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reproduce
# ---------------------------------------------------------------------------

def cmd_reproduce(figure_id, scale, out_dir, seed, threads):
    from . import reproduce
    if figure_id not in reproduce.FIGURES:
        print(f"unknown figure id {figure_id!r}; valid ids: "
              f"{', '.join(sorted(reproduce.FIGURES))}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(out_dir)
    result = reproduce.FIGURES[figure_id](scale=scale, seed=seed, threads=threads)
    payload = {"figure_id": figure_id, "scale": scale, "seed": seed, **result}
    _write_json(out_dir / f"{figure_id}.json", payload)
    rows = result.get("rows", [])
    if rows:
        cols = list(rows[0].keys())
        with open(out_dir / f"{figure_id}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)
    print(f"wrote {out_dir / (figure_id + '.json')} ({len(rows)} rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(
        prog="lbcrb",
        description="Learned Bayesian Cramer-Rao bound toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required,
                        help="experiment config (TOML)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory override")

    for name in ("generate-data", "train", "evaluate", "diagnose"):
        common(sub.add_parser(name))
    rp = sub.add_parser("reproduce")
    rp.add_argument("figure_id")
    rp.add_argument("--scale", choices=("smoke", "small", "paper"),
                    default="small")
    rp.add_argument("--seed", type=int, default=0)
    rp.add_argument("--threads", type=int, default=1)
    rp.add_argument("--out", default="reproduce_out")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "reproduce":
            return cmd_reproduce(args.figure_id, args.scale, args.out,
                                 args.seed, args.threads)
        cfg = load_config(args.config, seed=args.seed, out=args.out,
                          threads=args.threads)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        command = {
            "generate-data": cmd_generate_data,
            "train": cmd_train,
            "evaluate": cmd_evaluate,
            "diagnose": cmd_diagnose,
        }[args.command]
        return command(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NotPositiveDefiniteError, scorematch.TrainingDivergedError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
