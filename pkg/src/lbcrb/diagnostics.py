"""Numerical versions of the learning-error analysis.

Two error sources are tracked for the learned bound: the approximation
error (the trained score differs from the true score) and the
empirical-mean error (a finite dataset average differs from the
expectation).  Each bound below carries a validity gate; when the gate
fails the result is marked "assumption violated" rather than clamped,
because outside its assumptions the formula is not a bound at all.
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import linalg

#: Products intdim * sRE above this make the approximation-error bound vacuous.
APPROX_GATE = 0.16

#: Default confidence parameter: failure probability exp(-3) ~ 5%.
DEFAULT_U = 3.0


class DiagnosticsError(ValueError):
    pass


@dataclass
class BoundValue:
    value: float
    valid: bool
    reason: str = ""

    def __float__(self):
        return self.value


@dataclass
class EmpiricalBound:
    eta: float
    n_threshold: float
    valid: bool


@dataclass
class InversionBound:
    re_bound: float
    invertibility_ok: bool


# ---------------------------------------------------------------------------
# Approximation error
# ---------------------------------------------------------------------------

def approx_error_bound_posterior(sre_b, d_b):
    """Spectral-norm relative FIM error from the posterior score mismatch."""
    if sre_b < 0 or d_b < 0:
        raise DiagnosticsError("inputs must be non-negative")
    product = d_b * sre_b
    if product > APPROX_GATE:
        return BoundValue(math.nan, False,
                          f"assumption violated: intdim*sRE={product:.4g} > {APPROX_GATE}")
    return BoundValue(2.4 * math.sqrt(product), True)


def approx_error_bound_mp(sre_m, sre_p, d_m, d_p, norm_k_fm, norm_fp, norm_fb):
    """Measurement-prior variant; norms weight the two mismatch terms."""
    if min(sre_m, sre_p, d_m, d_p, norm_k_fm, norm_fp, norm_fb) < 0:
        raise DiagnosticsError("inputs must be non-negative")
    pm, pp = d_m * sre_m, d_p * sre_p
    if pm > APPROX_GATE or pp > APPROX_GATE:
        return BoundValue(math.nan, False,
                          f"assumption violated: intdim*sRE=({pm:.4g}, {pp:.4g})")
    value = 2.4 * (norm_k_fm / norm_fb * math.sqrt(pm)
                   + norm_fp / norm_fb * math.sqrt(pp))
    return BoundValue(value, True)


# ---------------------------------------------------------------------------
# Empirical-mean error
# ---------------------------------------------------------------------------

def empirical_error_bound_posterior(c_b, trace_lbfim, d_bar, u, n_d):
    """High-probability bound 1.5*sqrt(n_threshold/N) at confidence u."""
    if u <= 0:
        raise DiagnosticsError("u must be positive")
    n_threshold = (4.0 / 3.0) * (u + math.log(8.0 * d_bar)) \
        * (c_b / trace_lbfim * d_bar + 1.0)
    eta = 1.5 * math.sqrt(n_threshold / n_d)
    return EmpiricalBound(eta=eta, n_threshold=n_threshold, valid=n_d >= n_threshold)


def empirical_error_bound_mp(c_m, c_p, trace_fm, trace_fp, d_bar, u, n_d, k_eval):
    if u <= 0:
        raise DiagnosticsError("u must be positive")
    ratio = (c_m + c_p / k_eval) / (trace_fm + trace_fp / k_eval)
    n_threshold = (4.0 / 3.0) * (u + math.log(8.0 * d_bar)) * (ratio * d_bar + 1.0)
    eta = 1.5 * math.sqrt(n_threshold / n_d)
    return EmpiricalBound(eta=eta, n_threshold=n_threshold, valid=n_d >= n_threshold)


def expected_error_bound(kind, c, trace, d_bar, n_d):
    """In-expectation version of the empirical-mean error bound.

    ``kind`` selects only the label; the arithmetic is shared, with ``c``
    and ``trace`` already combined by the caller for the MP form.
    """
    if kind not in ("posterior", "measurement-prior"):
        raise DiagnosticsError(f"unknown kind {kind!r}")
    log_term = math.log(1.0 + 2.0 * d_bar)
    n_tilde = (log_term + 0.52) * (d_bar * c / trace + 1.0)
    if n_d < n_tilde:
        return BoundValue(math.nan, False,
                          f"assumption violated: N={n_d} < threshold {n_tilde:.4g}")
    constant = (6.0 + 1.5 * math.sqrt(2.0 * log_term)) / math.sqrt(log_term + 0.52)
    return BoundValue(constant * math.sqrt(n_tilde / n_d), True)


# ---------------------------------------------------------------------------
# Inversion: from FIM error to bound error
# ---------------------------------------------------------------------------

def inversion_error_bound(kind, lbfim_hat, lbfim_bar_norm, fb_norm, eta_e, eta_a,
                          fb_condition=None):
    """Relative error of the inverted bound, plus the invertibility gate.

    ``fb_condition`` is the condition number of the true FIM; when no
    oracle exists the plug-in value from the estimated FIM is used.
    """
    if min(eta_e, eta_a, lbfim_bar_norm, fb_norm) < 0:
        raise DiagnosticsError("norms and error levels must be non-negative")
    if kind not in ("posterior", "measurement-prior"):
        raise DiagnosticsError(f"unknown kind {kind!r}")
    hat = np.asarray(lbfim_hat, dtype=np.float64)
    hat_norm = linalg.spectral_norm(hat)
    kappa_hat = linalg.condition_number(hat)
    kappa_fb = fb_condition if fb_condition is not None else kappa_hat
    re_bound = kappa_hat * (lbfim_bar_norm / hat_norm * eta_e
                            + fb_norm / hat_norm * eta_a)
    ok = (lbfim_bar_norm / fb_norm) * eta_e + eta_a < 1.0 / kappa_fb
    return InversionBound(re_bound=re_bound, invertibility_ok=bool(ok))


# ---------------------------------------------------------------------------
# Measured quantities
# ---------------------------------------------------------------------------

def relative_error(learned, reference):
    """Spectral-norm relative error ||A_hat - A|| / ||A||."""
    learned = np.asarray(learned, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    ref_norm = linalg.spectral_norm(reference)
    if ref_norm == 0.0:
        raise DiagnosticsError("reference matrix is zero")
    return linalg.spectral_norm(learned - reference) / ref_norm


def score_relative_error(learned_scores, reference_scores, trace_reference):
    """Monte-Carlo E||s_hat - s0||^2 normalized by the reference FIM trace."""
    diff = np.asarray(learned_scores) - np.asarray(reference_scores)
    return float(np.mean(np.sum(diff ** 2, axis=1))) / trace_reference


def mean_relative_error(per_snr_re):
    return float(np.mean(list(per_snr_re)))


def measured_relative_errors(learned_by_snr, reference_by_snr):
    """Per-SNR spectral relative errors plus their mean over SNRs."""
    if set(learned_by_snr) != set(reference_by_snr):
        raise DiagnosticsError("learned and reference SNR grids differ")
    if not learned_by_snr:
        raise DiagnosticsError("missing reference")
    per_snr = {snr: relative_error(learned_by_snr[snr], reference_by_snr[snr])
               for snr in learned_by_snr}
    return per_snr, mean_relative_error(per_snr.values())


def realized_score_bounds(kind, scores=None, fisher_scores_by_record=None):
    """Realized score-bound constants over an observed dataset.

    posterior/prior: max ||s||^2 over records.
    measurement: max over records of || (1/m) sum_j s_j s_j^T ||_2 where
    ``fisher_scores_by_record`` has shape (N, m, d).
    """
    if kind in ("posterior", "prior"):
        s = np.asarray(scores, dtype=np.float64)
        return float(np.max(np.sum(s ** 2, axis=1)))
    if kind == "measurement":
        s = np.asarray(fisher_scores_by_record, dtype=np.float64)
        n, m, d = s.shape
        outer = np.einsum("nmi,nmj->nij", s, s) / m
        return float(max(linalg.spectral_norm(outer[i]) for i in range(n)))
    raise DiagnosticsError(f"unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# Per-SNR error budget (the diagnostics block of a bound report)
# ---------------------------------------------------------------------------

@dataclass
class ErrorBudget:
    snr_db: float
    approach: str
    u: float = DEFAULT_U
    sre: dict = field(default_factory=dict)
    eta_approx: float = math.nan
    eta_approx_valid: bool = False
    eta_empirical: float = math.nan
    n_threshold: float = math.nan
    empirical_valid: bool = False
    measured_re: float = math.nan
    measured_fim_re: float = math.nan
    re_bound: float = math.nan
    invertibility_ok: bool = False
    condition_number: float = math.nan
    intrinsic_dim: float = math.nan
    c_bound: dict = field(default_factory=dict)
    plug_in: bool = False

    def as_dict(self):
        return asdict(self)
