"""FIM estimation from score functions and the learned bound itself.

Estimators consume vectorized score callables:

    posterior_fn(theta (N,d), X (N,m,d_x), snr_db) -> (N,d)
    fisher_fn(x (N,d_x), theta (N,d), snr_db)      -> (N,d)
    prior_fn(theta (N,d))                          -> (N,d)

Factories below wrap trained nets and analytic models into that shape;
each callable carries a ``score_source`` attribute so FIM estimates keep
their provenance.  Accumulation of the score outer products uses
compensated summation, so record order is immaterial well below 1e-10.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from . import linalg, nets
from .linalg import SymMatrix
from .scorematch import encode_condition

#: A FIM whose smallest eigenvalue falls below this fraction of its
#: spectral norm is treated as singular and refuses inversion.
PD_GATE = 1e-12

_CHUNK = 8192


class BoundError(ValueError):
    pass


@dataclass
class FimEstimate:
    matrix: SymMatrix
    kind: str                  # posterior | measurement | prior
    n_records: int
    m_d: int
    snr_db: float
    score_source: str          # learned | analytic | unknown

    @property
    def trace(self):
        return float(np.trace(self.matrix.entries))


# ---------------------------------------------------------------------------
# Score-function factories
# ---------------------------------------------------------------------------

def _tag(fn, source):
    fn.score_source = source
    return fn


def learned_prior_score(score_model):
    def fn(theta):
        return _chunked(lambda t: score_model.score(t), theta)
    return _tag(fn, "learned")


def learned_fisher_score(score_model):
    def fn(x, theta, snr_db):
        cond = None
        if getattr(score_model.net, "cond_dim", 0):
            cond = np.repeat(encode_condition(snr_db), x.shape[0], axis=0)
        return _chunked(
            lambda xt, th, cd: score_model.score(xt, th, cd), x, theta, cond)
    return _tag(fn, "learned")


def learned_posterior_score(score_model):
    def fn(theta, X, snr_db):
        cond = None
        if getattr(score_model.net, "cond_dim", 0):
            cond = np.repeat(encode_condition(snr_db), theta.shape[0], axis=0)
        return _chunked(
            lambda th, xs, cd: score_model.score(th, xs, cd), theta, X, cond)
    return _tag(fn, "learned")


def analytic_prior_score(model):
    return _tag(lambda theta: model.prior_score(theta), "analytic")


def analytic_fisher_score(model):
    return _tag(
        lambda x, theta, snr_db: model.fisher_score(x, theta, snr_db=snr_db),
        "analytic")


def analytic_posterior_score(model):
    """Sum of per-measurement Fisher scores plus the prior score."""
    def fn(theta, X, snr_db):
        total = model.prior_score(theta)
        for j in range(X.shape[1]):
            total = total + model.fisher_score(X[:, j, :], theta, snr_db=snr_db)
        return total
    return _tag(fn, "analytic")


def _chunked(fn, *arrays):
    n = arrays[0].shape[0]
    if n <= _CHUNK:
        return fn(*arrays)
    parts = []
    for start in range(0, n, _CHUNK):
        parts.append(fn(*(a[start:start + _CHUNK] if a is not None else None
                          for a in arrays)))
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# FIM estimators (empirical means of score outer products)
# ---------------------------------------------------------------------------

def _source_of(fn):
    return getattr(fn, "score_source", "unknown")


def _mean_outer(scores, subtract_mean):
    if subtract_mean:
        scores = scores - K.kahan_colmean(scores)[None, :]
    return SymMatrix(K.kahan_mean_outer(scores))


def estimate_posterior_fim(score_fn, dataset, snr_db, subtract_mean=False):
    group = dataset.group(snr_db)
    if group.n_records == 0:
        raise BoundError("empty SNR group")
    scores = score_fn(group.theta, group.measurements, snr_db)
    return FimEstimate(matrix=_mean_outer(scores, subtract_mean),
                       kind="posterior", n_records=group.n_records,
                       m_d=dataset.m_d, snr_db=snr_db,
                       score_source=_source_of(score_fn))


def estimate_measurement_fim(score_fn, dataset, snr_db, subtract_mean=False):
    """Mean of s_F s_F^T over all (theta, x) pairs in the SNR group."""
    group = dataset.group(snr_db)
    if group.n_records == 0:
        raise BoundError("empty SNR group")
    m = dataset.m_d
    theta = np.repeat(group.theta, m, axis=0)
    x = group.measurements.reshape(-1, dataset.d_x)
    scores = score_fn(x, theta, snr_db)
    return FimEstimate(matrix=_mean_outer(scores, subtract_mean),
                       kind="measurement", n_records=group.n_records,
                       m_d=m, snr_db=snr_db, score_source=_source_of(score_fn))


def estimate_prior_fim(score_fn, dataset, subtract_mean=False):
    """Prior FIM from theta samples pooled across SNR groups."""
    theta = dataset.all_theta()
    if theta.shape[0] == 0:
        raise BoundError("empty dataset")
    scores = score_fn(theta)
    return FimEstimate(matrix=_mean_outer(scores, subtract_mean),
                       kind="prior", n_records=theta.shape[0],
                       m_d=dataset.m_d, snr_db=math.nan,
                       score_source=_source_of(score_fn))


# ---------------------------------------------------------------------------
# Bound assembly
# ---------------------------------------------------------------------------

def assemble_lbfim(measurement, prior, k_eval):
    """k_eval * F_M + F_P from per-part estimates."""
    if measurement.kind != "measurement" or prior.kind != "prior":
        raise BoundError(
            f"expected (measurement, prior) estimates, got "
            f"({measurement.kind}, {prior.kind})")
    if measurement.matrix.dim != prior.matrix.dim:
        raise BoundError("FIM dimension mismatch")
    return SymMatrix(k_eval * measurement.matrix.entries + prior.matrix.entries)


def lbcrb(lbfim):
    """Inverse of the learned FIM, refused when it fails the PD gate."""
    mat = lbfim.entries if isinstance(lbfim, SymMatrix) else np.asarray(lbfim)
    norm = linalg.spectral_norm(mat)
    if norm == 0.0 or linalg.min_eigenvalue(mat) <= PD_GATE * norm:
        raise linalg.NotPositiveDefiniteError("singular or indefinite FIM")
    return linalg.invert_pd(SymMatrix(mat))


# ---------------------------------------------------------------------------
# MMSE baseline: a regressor trained with squared error
# ---------------------------------------------------------------------------

@dataclass
class MmseResult:
    mse_matrix: SymMatrix
    n_train: int
    n_heldout: int
    loss_trace: list


def mmse_baseline(dataset, snr_db, net_config=None, hyperparams=None,
                  holdout_fraction=0.2):
    """Trains theta-from-X regression and reports the held-out E[ee^T]."""
    from .scorematch import TrainConfig, TrainingDivergedError  # cycle guard

    group = dataset.group(snr_db)
    config = hyperparams or TrainConfig()
    net_config = net_config or {"n_blocks": 3, "width": 64}
    n = group.n_records
    n_hold = max(1, int(round(holdout_fraction * n)))
    n_train = n - n_hold
    if n_train < 1:
        raise BoundError("not enough records for an MMSE train/holdout split")
    x_all = group.measurements.reshape(n, -1)
    y_all = group.theta
    d_theta = y_all.shape[1]
    net = nets.BasicBlockNet(x_all.shape[1], d_theta, d_theta,
                             n_blocks=net_config["n_blocks"],
                             width=net_config["width"], cond_dim=0,
                             inject_theta=False, seed=config.seed)
    rng = np.random.Generator(
        np.random.Philox(key=np.array([config.seed, 9], dtype=np.uint64)))
    adam = nets.AdamWState(net.n_params)
    ema = nets.EmaState(net.params, config.ema_decay)
    trace = []

    def predict(x):
        # the net has no theta path; it still wants a placeholder argument
        return net.forward(x, np.zeros((x.shape[0], d_theta)), None)

    for epoch in range(config.epochs):
        perm = rng.permutation(n_train)
        losses = []
        for start in range(0, n_train, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            pred, _, cache = net.forward_tan(
                xb, None, np.zeros((xb.shape[0], d_theta)), None, None)
            err = pred - yb
            loss = float(np.mean(np.sum(err ** 2, axis=1)))
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, f"mse={loss}")
            grad = net.backward_tan(cache, (2.0 / xb.shape[0]) * err, None)
            nets.optimizer_step(net.params, grad, adam, config.lr,
                                config.weight_decay)
            nets.ema_update(ema, net.params)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    nets.ema_swap(ema, net.params)
    err = predict(x_all[n_train:]) - y_all[n_train:]
    mse = SymMatrix(K.kahan_mean_outer(err))
    return net, MmseResult(mse_matrix=mse, n_train=n_train, n_heldout=n_hold,
                           loss_trace=trace)
