"""Desk-scale recipes behind the standard result figures.

Each recipe emits the table a plot would be drawn from (rows of plain
scalars) plus a summary block.  Scales:

    smoke  seconds; sanity only, tolerances not meaningful
    small  minutes; the desk-scale defaults quoted in the acceptance suite
    paper  the full-size protocol (hours; provided for completeness)

All recipes are deterministic for a given seed: Monte-Carlo trial t uses
an independent Philox stream keyed by (seed, t), and reductions collect
results by trial index, so ``threads`` changes wall time only.
"""

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import integrate, stats

from . import bound, data, diagnostics, kernels, linalg, models, nets, physenc, scorematch


def _map_trials(fn, n_trials, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(n_trials)))
    return [fn(t) for t in range(n_trials)]


# ---------------------------------------------------------------------------
# Analytic-score Monte-Carlo machinery (linear Gaussian model)
# ---------------------------------------------------------------------------

def linear_trial(model, n, m, snr, trial_seed, u=diagnostics.DEFAULT_U):
    """One Monte-Carlo draw of the learned bound with analytic scores.

    Returns FIM-level empirical-mean errors, bound-level errors, and the
    per-trial high-probability error bounds for both approaches.
    """
    ds = data.generate_dataset(model, [snr], n, m, seed=trial_seed)
    fisher_fn = bound.analytic_fisher_score(model)
    prior_fn = bound.analytic_prior_score(model)
    post_fn = bound.analytic_posterior_score(model)

    fm_ref = model.measurement_fim(snr).entries
    fp_ref = model.prior.fim().entries
    fb_ref = m * fm_ref + fp_ref
    bcrb_ref = np.linalg.inv(fb_ref)

    post_est = bound.estimate_posterior_fim(post_fn, ds, snr)
    meas_est = bound.estimate_measurement_fim(fisher_fn, ds, snr)
    prior_est = bound.estimate_prior_fim(prior_fn, ds)
    lbfim_mp = bound.assemble_lbfim(meas_est, prior_est, m)

    out = {
        "re_b_fim": diagnostics.relative_error(post_est.matrix.entries, fb_ref),
        "re_mp_fim": diagnostics.relative_error(lbfim_mp.entries, fb_ref),
    }
    for label, mat in (("re_b", post_est.matrix), ("re_mp", lbfim_mp)):
        try:
            out[label] = diagnostics.relative_error(
                bound.lbcrb(mat).entries, bcrb_ref)
        except linalg.NotPositiveDefiniteError:
            out[label] = math.nan

    g = ds.group(snr)
    post_scores = post_fn(g.theta, g.measurements, snr)
    c_b = diagnostics.realized_score_bounds("posterior", scores=post_scores)
    f_scores = fisher_fn(g.measurements.reshape(-1, ds.d_x),
                         np.repeat(g.theta, m, axis=0), snr)
    c_m = diagnostics.realized_score_bounds(
        "measurement",
        fisher_scores_by_record=f_scores.reshape(n, m, ds.d_theta))
    c_p = diagnostics.realized_score_bounds(
        "prior", scores=prior_fn(ds.all_theta()))
    d_bar = linalg.intrinsic_dim(fb_ref)
    out["eta_b"] = diagnostics.empirical_error_bound_posterior(
        c_b, float(np.trace(fb_ref)), d_bar, u, n).eta
    out["eta_mp"] = diagnostics.empirical_error_bound_mp(
        c_m, c_p, float(np.trace(fm_ref)), float(np.trace(fp_ref)),
        d_bar, u, n, m).eta
    return out


_HIST_SCALE = {"smoke": (20, 1000), "small": (200, 8000), "paper": (1000, 64000)}


def fig_hist_m(scale="small", seed=0, threads=1):
    """Error histograms across parameter dimensions (analytic scores)."""
    trials, n = _HIST_SCALE[scale]
    rows = []
    for d_theta in (2, 4, 8):
        model = models.make_linear_model(16, d_theta, 6.25, static_seed=11)
        res = _map_trials(
            lambda t: linear_trial(model, n, 10, 0.0, seed * 1_000_003 + t),
            trials, threads)
        for t, r in enumerate(res):
            rows.append({"d_theta": d_theta, "trial": t,
                         "re_posterior": r["re_b"], "re_mp": r["re_mp"]})
    summary = _hist_summary(rows, "d_theta")
    return {"rows": rows, "summary": summary,
            "params": {"n_per_snr": n, "m_d": 10, "snr_db": 0.0, "trials": trials}}


def fig_hist_snr(scale="small", seed=0, threads=1):
    """Error histograms across SNR (analytic scores, d_theta=4)."""
    trials, n = _HIST_SCALE[scale]
    model = models.make_linear_model(16, 4, 6.25, static_seed=11)
    rows = []
    for snr in (-10.0, 0.0, 10.0):
        res = _map_trials(
            lambda t: linear_trial(model, n, 10, snr, seed * 1_000_003 + t),
            trials, threads)
        for t, r in enumerate(res):
            rows.append({"snr_db": snr, "trial": t,
                         "re_posterior": r["re_b"], "re_mp": r["re_mp"]})
    summary = _hist_summary(rows, "snr_db")
    return {"rows": rows, "summary": summary,
            "params": {"n_per_snr": n, "m_d": 10, "d_theta": 4, "trials": trials}}


def _hist_summary(rows, key):
    summary = {}
    for val in sorted({r[key] for r in rows}):
        sub_b = [r["re_posterior"] for r in rows if r[key] == val]
        sub_mp = [r["re_mp"] for r in rows if r[key] == val]
        summary[str(val)] = {
            "mean_re_posterior": float(np.nanmean(sub_b)),
            "mean_re_mp": float(np.nanmean(sub_mp)),
            "p95_re_posterior": float(np.nanpercentile(sub_b, 95)),
            "p95_re_mp": float(np.nanpercentile(sub_mp, 95)),
        }
    return summary


_VSND_SCALE = {
    "smoke": (20, [1000, 2000, 4000]),
    "small": (100, [8000, 16000, 32000]),
    "paper": (1000, [32000, 64000, 128000, 256000]),
}


def sweep_vs_nd(n_list, trials, seed, threads=1, m=10, snr=20.0,
                d_theta=4, d_x=16, prior_var=6.25, u=diagnostics.DEFAULT_U):
    """Empirical-mean error vs dataset size, with per-trial bounds."""
    model = models.make_linear_model(d_x, d_theta, prior_var, static_seed=11)
    rows = []
    for n in n_list:
        res = _map_trials(
            lambda t: linear_trial(model, n, m, snr,
                                   seed * 1_000_003 + 7919 * n + t, u=u),
            trials, threads)
        for t, r in enumerate(res):
            rows.append({"n_d": n, "trial": t,
                         "re_b_fim": r["re_b_fim"], "re_mp_fim": r["re_mp_fim"],
                         "eta_b": r["eta_b"], "eta_mp": r["eta_mp"]})
    summary = {"mean_re": {}, "coverage": {}, "slope": {}}
    for label in ("b", "mp"):
        means = [float(np.mean([r[f"re_{label}_fim"] for r in rows if r["n_d"] == n]))
                 for n in n_list]
        summary["mean_re"][label] = dict(zip(map(str, n_list), means))
        cover = np.mean([r[f"re_{label}_fim"] <= r[f"eta_{label}"] for r in rows])
        summary["coverage"][label] = float(cover)
        slope = np.polyfit(np.log(n_list), np.log(means), 1)[0]
        summary["slope"][label] = float(slope)
    return rows, summary


def fig_vs_nd(scale="small", seed=0, threads=1):
    trials, n_list = _VSND_SCALE[scale]
    rows, summary = sweep_vs_nd(n_list, trials, seed, threads)
    return {"rows": rows, "summary": summary,
            "params": {"trials": trials, "n_list": n_list, "m_d": 10,
                       "snr_db": 20.0}}


_VSMD_SCALE = {"smoke": (20, 1000), "small": (100, 8000), "paper": (1000, 64000)}


def sweep_vs_md(m_list, trials, n, seed, threads=1, snr=20.0,
                d_theta=4, d_x=16, prior_var=6.25):
    model = models.make_linear_model(d_x, d_theta, prior_var, static_seed=11)
    rows = []
    for m in m_list:
        res = _map_trials(
            lambda t: linear_trial(model, n, m, snr,
                                   seed * 1_000_003 + 104729 * m + t),
            trials, threads)
        for t, r in enumerate(res):
            rows.append({"m_d": m, "trial": t,
                         "re_b_fim": r["re_b_fim"], "re_mp_fim": r["re_mp_fim"],
                         "eta_b": r["eta_b"], "eta_mp": r["eta_mp"]})
    summary = {}
    for label in ("b", "mp"):
        summary[label] = {str(m): float(np.mean(
            [r[f"re_{label}_fim"] for r in rows if r["m_d"] == m]))
            for m in m_list}
    return rows, summary


def fig_vs_md(scale="small", seed=0, threads=1):
    trials, n = _VSMD_SCALE[scale]
    rows, summary = sweep_vs_md([1, 2, 5, 10], trials, n, seed, threads)
    return {"rows": rows, "summary": summary,
            "params": {"trials": trials, "n_per_snr": n, "snr_db": 20.0}}


# ---------------------------------------------------------------------------
# Trained recipes
# ---------------------------------------------------------------------------

_VSK_SCALE = {"smoke": (1500, 12), "small": (4000, 60), "paper": (60000, 200)}


def fig_vs_k(scale="small", seed=0, threads=1):
    """Trained posterior vs measurement-prior as m_d (= k_eval) grows."""
    n, epochs = _VSK_SCALE[scale]
    model = models.make_linear_model(10, 4, 6.25, static_seed=11)
    snr_list = [-20.0, -10.0, 0.0, 10.0, 20.0]
    tc = scorematch.TrainConfig(epochs=epochs, seed=seed)
    rows = []
    for k in (1, 2, 3, 4, 5):
        ds = data.generate_dataset(model, snr_list, n, k, seed=seed * 31 + k)
        re_by = {"posterior": [], "measurement-prior": []}

        prior_sm = nets.PriorScoreNet(4, seed=seed)
        scorematch.train(prior_sm, "prior", ds, tc)
        fisher_sm = nets.FisherScoreNet(4, 10, cond_dim=1, seed=seed)
        scorematch.train(fisher_sm, "fisher", ds, tc,
                         prior_score_fn=bound.learned_prior_score(prior_sm))
        post_sm = nets.PosteriorScoreNet(4, 10, k, cond_dim=1, seed=seed)
        scorematch.train(post_sm, "posterior", ds, tc)

        prior_est = bound.estimate_prior_fim(
            bound.learned_prior_score(prior_sm), ds)
        for snr in snr_list:
            bcrb_ref = model.bcrb(k, snr).entries
            meas_est = bound.estimate_measurement_fim(
                bound.learned_fisher_score(fisher_sm), ds, snr)
            lbfim = bound.assemble_lbfim(meas_est, prior_est, k)
            re_by["measurement-prior"].append(diagnostics.relative_error(
                bound.lbcrb(lbfim).entries, bcrb_ref))
            post_est = bound.estimate_posterior_fim(
                bound.learned_posterior_score(post_sm), ds, snr)
            re_by["posterior"].append(diagnostics.relative_error(
                bound.lbcrb(post_est.matrix).entries, bcrb_ref))
        for approach, res in re_by.items():
            rows.append({"k_eval": k, "approach": approach,
                         "mre": diagnostics.mean_relative_error(res)})
    return {"rows": rows, "summary": {},
            "params": {"n_per_snr": n, "epochs": epochs, "snr_db": snr_list}}


_PE_SCALE = {"smoke": ([6000], 30), "small": ([12000, 48000], 120),
             "paper": ([12000, 120000, 1200000], 200)}


def pe_comparison(n_total, epochs, seed, n_samples=16, alpha=100.0,
                  snr_list=(-10.0, -5.0, 0.0, 5.0, 10.0)):
    """mRE of physics-encoded vs plain Fisher nets at one dataset size.

    The reference bound uses the analytic scores on the same dataset, so
    the comparison isolates approximation error.
    """
    model = models.make_frequency_model(n_samples, alpha)
    snr_list = list(snr_list)
    n_per = n_total // len(snr_list)
    ds = data.generate_dataset(model, snr_list, n_per, 1, seed=seed * 7 + 1)
    tc = scorematch.TrainConfig(epochs=epochs, seed=seed)

    prior_sm = nets.PriorScoreNet(1, n_blocks=3, width=96, seed=seed)
    scorematch.train(prior_sm, "prior", ds, tc)
    prior_fn = bound.learned_prior_score(prior_sm)

    pe_sm = physenc.PhysicsEncodedNet(model, n_blocks=1, cond_dim=1, seed=seed)
    scorematch.train(pe_sm, "fisher", ds, tc, prior_score_fn=prior_fn)
    plain_sm = nets.FisherScoreNet(1, n_samples, n_blocks=3, width=96,
                                   cond_dim=1, seed=seed)
    scorematch.train(plain_sm, "fisher", ds, tc, prior_score_fn=prior_fn)

    ref_prior = bound.estimate_prior_fim(bound.analytic_prior_score(model), ds)
    est_prior = bound.estimate_prior_fim(prior_fn, ds)
    mre = {}
    for label, sm in (("encoded", pe_sm), ("plain", plain_sm)):
        fn = bound.learned_fisher_score(sm)
        res = []
        for snr in snr_list:
            ref_meas = bound.estimate_measurement_fim(
                bound.analytic_fisher_score(model), ds, snr)
            ref = bound.lbcrb(bound.assemble_lbfim(ref_meas, ref_prior, 1))
            est = bound.lbcrb(bound.assemble_lbfim(
                bound.estimate_measurement_fim(fn, ds, snr), est_prior, 1))
            res.append(diagnostics.relative_error(est.entries, ref.entries))
        mre[label] = diagnostics.mean_relative_error(res)
    return mre


def fig_pe_ablation(scale="small", seed=0, threads=1):
    sizes, epochs = _PE_SCALE[scale]
    rows = []
    for n_total in sizes:
        mre = pe_comparison(n_total, epochs, seed)
        for label, value in mre.items():
            rows.append({"n_total": n_total, "variant": label, "mre": value})
    return {"rows": rows, "summary": {},
            "params": {"sizes": sizes, "epochs": epochs}}


_QUANT_SCALE = {"smoke": (1200, 30), "small": (4000, 150), "paper": (60000, 200)}


def quantized_sweep(rho, n_per_snr, epochs, seed,
                    snr_list=(-16.0, -8.0, 0.0, 8.0, 16.0),
                    d_x=12, d_theta=2, prior_var=1.0):
    """Learned bound for the one-bit model; true-score bound when rho=0."""
    model = models.make_quantized_model(d_x, d_theta, prior_var,
                                        static_seed=11, rho=rho)
    snr_list = list(snr_list)
    ds = data.generate_dataset(model, snr_list, n_per_snr, 1, seed=seed * 13 + 5)
    tc = scorematch.TrainConfig(epochs=epochs, seed=seed)

    prior_sm = nets.PriorScoreNet(d_theta, seed=seed)
    scorematch.train(prior_sm, "prior", ds, tc)
    prior_fn = bound.learned_prior_score(prior_sm)
    fisher_sm = nets.FisherScoreNet(d_theta, d_x, n_blocks=3, width=96,
                                    cond_dim=1, seed=seed)
    scorematch.train(fisher_sm, "fisher", ds, tc, prior_score_fn=prior_fn)

    est_prior = bound.estimate_prior_fim(prior_fn, ds)
    rows = []
    oracle = rho == 0.0
    if oracle:
        true_prior = bound.estimate_prior_fim(bound.analytic_prior_score(model), ds)
    for snr in snr_list:
        est = bound.lbcrb(bound.assemble_lbfim(
            bound.estimate_measurement_fim(
                bound.learned_fisher_score(fisher_sm), ds, snr),
            est_prior, 1))
        row = {"rho": rho, "snr_db": snr,
               "trace_learned": float(np.trace(est.entries)),
               "trace_true_score": math.nan}
        if oracle:
            ref = bound.lbcrb(bound.assemble_lbfim(
                bound.estimate_measurement_fim(
                    bound.analytic_fisher_score(model), ds, snr),
                true_prior, 1))
            row["trace_true_score"] = float(np.trace(ref.entries))
        rows.append(row)
    return rows


def fig_quantized(scale="small", seed=0, threads=1):
    n, epochs = _QUANT_SCALE[scale]
    rows = quantized_sweep(0.0, n, epochs, seed)
    if scale != "smoke":
        rows += quantized_sweep(0.9, n, epochs, seed)
    gaps = [abs(r["trace_learned"] - r["trace_true_score"]) / r["trace_true_score"]
            for r in rows if r["rho"] == 0.0]
    return {"rows": rows, "summary": {"max_rel_gap_rho0": float(max(gaps))},
            "params": {"n_per_snr": n, "epochs": epochs}}


_FREQ_SCALE = {"smoke": (1200, 30), "small": (6000, 150), "paper": (60000, 200)}


def beta_measurement_fim_quadrature(model, snr):
    """True expected measurement FIM by quadrature over the Beta prior."""
    prior = model.prior
    c = model.noise_scale(snr)
    sigma_inv = model.noise._inv / c
    n_vec = np.arange(model.n_samples, dtype=np.float64)
    pdf = stats.beta(prior.alpha, prior.beta, loc=prior.lower,
                     scale=prior.upper - prior.lower).pdf

    def integrand(theta):
        d = -n_vec * np.sin(theta * n_vec)
        return float(d @ sigma_inv @ d) * pdf(theta)

    val, _ = integrate.quad(integrand, prior.lower, prior.upper, limit=200)
    return val


def fig_frequency(scale="small", seed=0, threads=1):
    """Frequency-estimation bounds vs SNR (white Gaussian noise)."""
    n, epochs = _FREQ_SCALE[scale]
    snr_list = [-10.0, -5.0, 0.0, 5.0, 10.0]
    model = models.make_frequency_model(16, 100.0)
    ds = data.generate_dataset(model, snr_list, n, 1, seed=seed * 17 + 3)
    tc = scorematch.TrainConfig(epochs=epochs, seed=seed)

    prior_sm = nets.PriorScoreNet(1, n_blocks=3, width=96, seed=seed)
    scorematch.train(prior_sm, "prior", ds, tc)
    prior_fn = bound.learned_prior_score(prior_sm)
    pe_sm = physenc.PhysicsEncodedNet(model, n_blocks=1, cond_dim=1, seed=seed)
    scorematch.train(pe_sm, "fisher", ds, tc, prior_score_fn=prior_fn)

    est_prior = bound.estimate_prior_fim(prior_fn, ds)
    ana_prior = bound.estimate_prior_fim(bound.analytic_prior_score(model), ds)
    fp_true = float(model.prior.fim().entries[0, 0])
    rows = []
    for snr in snr_list:
        learned = bound.lbcrb(bound.assemble_lbfim(
            bound.estimate_measurement_fim(
                bound.learned_fisher_score(pe_sm), ds, snr), est_prior, 1))
        ana = bound.lbcrb(bound.assemble_lbfim(
            bound.estimate_measurement_fim(
                bound.analytic_fisher_score(model), ds, snr), ana_prior, 1))
        fm_true = beta_measurement_fim_quadrature(model, snr)
        rows.append({
            "snr_db": snr,
            "trace_lbcrb_learned": float(np.trace(learned.entries)),
            "trace_lbcrb_analytic_score": float(np.trace(ana.entries)),
            "trace_bcrb_quadrature": 1.0 / (fm_true + fp_true),
        })
    return {"rows": rows, "summary": {},
            "params": {"n_per_snr": n, "epochs": epochs}}


FIGURES = {
    "hist_m": fig_hist_m,
    "hist_snr": fig_hist_snr,
    "vs_nd": fig_vs_nd,
    "vs_md": fig_vs_md,
    "vs_k": fig_vs_k,
    "pe_ablation": fig_pe_ablation,
    "quantized": fig_quantized,
    "frequency": fig_frequency,
}
