"""Score-matching objectives and training.

Three losses, all of the implicit form that avoids the unknown true
score: squared norm of the model score plus twice the trace of its
parameter-Jacobian, with the Fisher variant adding a cross term against
the prior score,

    prior:     mean ||s_P(th)||^2 + 2 tr(ds_P/dth)
    posterior: mean ||s_B(th|X,c)||^2 + 2 tr(ds_B/dth)
    fisher:    mean ||s_F(x|th,c)||^2 + 2 s_F^T s_P(th) + 2 tr(ds_F/dth)

Minimizing each differs from minimizing the direct squared error to the
true score only by an additive constant, so on realizable problems the
optimum recovers the true score.  Fisher-loss batches flatten the m_d
measurements per record into independent (theta, x) pairs.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import models, nets, physenc

#: Relative margin that keeps bounded-support prior samples away from the
#: support boundary during training; records inside it are dropped.
BOUNDARY_MARGIN_REL = 1e-9


class ScoreMatchError(ValueError):
    pass


class TrainingDivergedError(ScoreMatchError):
    def __init__(self, epoch, message):
        super().__init__(f"training diverged in epoch {epoch}: {message}")
        self.epoch = epoch


def encode_condition(snr_db):
    """SNR conditioning input used by the conditioned nets."""
    snr_db = np.asarray(snr_db, dtype=np.float64)
    return np.atleast_1d(snr_db)[:, None] / 20.0


@dataclass
class LossBreakdown:
    norm_term: float
    trace_term: float
    cross_term: float = 0.0

    @property
    def total(self):
        return self.norm_term + 2.0 * self.trace_term + 2.0 * self.cross_term


def _check_finite(per_record):
    if not np.all(np.isfinite(per_record)):
        idx = int(np.argmax(~np.isfinite(per_record)))
        raise ScoreMatchError(f"non-finite loss at record {idx}")


def _breakdown(out, dout, cross_with=None):
    B = out.shape[0]
    norms = np.einsum("bi,bi->b", out, out)
    traces = np.einsum("tbt->b", dout)
    per_record = norms + 2.0 * traces
    cross = None
    if cross_with is not None:
        cross = np.einsum("bi,bi->b", out, cross_with)
        per_record = per_record + 2.0 * cross
    _check_finite(per_record)
    return LossBreakdown(
        norm_term=float(norms.mean()),
        trace_term=float(traces.mean()),
        cross_term=float(cross.mean()) if cross is not None else 0.0,
    )


def _head_adjoints(out, cross_with=None):
    B, d = out.shape
    out_bar = (2.0 / B) * out
    if cross_with is not None:
        out_bar = out_bar + (2.0 / B) * cross_with
    dout_bar = np.zeros((d, B, d))
    for t in range(d):
        dout_bar[t, :, t] = 2.0 / B
    return out_bar, dout_bar


# ---------------------------------------------------------------------------
# Loss evaluators
# ---------------------------------------------------------------------------

class PriorSMLoss:
    """Implicit score matching on prior samples; batch is theta (B, d)."""

    def evaluate(self, score_model, theta):
        out, dout, _ = score_model.score_tan(theta)
        return _breakdown(out, dout)

    def gradient(self, score_model, theta):
        out, dout, cache = score_model.score_tan(theta)
        bd = _breakdown(out, dout)
        out_bar, dout_bar = _head_adjoints(out)
        return bd, score_model.backward(cache, out_bar, dout_bar)


class PosteriorSMLoss:
    """Conditional score matching; batch is (theta, X, cond)."""

    def evaluate(self, score_model, batch):
        theta, x, cond = batch
        out, dout, _ = score_model.score_tan(theta, x, cond)
        return _breakdown(out, dout)

    def gradient(self, score_model, batch):
        theta, x, cond = batch
        out, dout, cache = score_model.score_tan(theta, x, cond)
        bd = _breakdown(out, dout)
        out_bar, dout_bar = _head_adjoints(out)
        return bd, score_model.backward(cache, out_bar, dout_bar)


class FisherSMLoss:
    """Fisher score matching; batch is (x, theta, cond).

    ``prior_score_fn`` maps theta (B, d) to the prior score (B, d); it is
    either the trained prior net or an analytic oracle, and is treated as
    a constant during differentiation.
    """

    def __init__(self, prior_score_fn):
        self.prior_score_fn = prior_score_fn

    def evaluate(self, score_model, batch):
        x, theta, cond = batch
        sp = self.prior_score_fn(np.atleast_2d(theta))
        out, dout, _ = score_model.score_tan(x, theta, cond)
        return _breakdown(out, dout, cross_with=sp)

    def gradient(self, score_model, batch):
        x, theta, cond = batch
        sp = self.prior_score_fn(np.atleast_2d(theta))
        out, dout, cache = score_model.score_tan(x, theta, cond)
        bd = _breakdown(out, dout, cross_with=sp)
        out_bar, dout_bar = _head_adjoints(out, cross_with=sp)
        return bd, score_model.backward(cache, out_bar, dout_bar)


def prior_sm_loss(score_model, theta):
    return PriorSMLoss().evaluate(score_model, theta)


def posterior_sm_loss(score_model, theta, x, cond=None):
    return PosteriorSMLoss().evaluate(score_model, (theta, x, cond))


def fisher_sm_loss(score_model, prior_score_fn, x, theta, cond=None):
    return FisherSMLoss(prior_score_fn).evaluate(score_model, (x, theta, cond))


# ---------------------------------------------------------------------------
# Training-set assembly
# ---------------------------------------------------------------------------

def _interior_mask(prior, theta):
    if isinstance(prior, models.BetaPrior):
        return prior.interior(theta, margin_rel=BOUNDARY_MARGIN_REL)
    return np.ones(theta.shape[0], dtype=bool)


def _flatten_for_loss(dataset, kind):
    """Concatenates SNR groups into flat arrays for the given loss kind.

    Returns (arrays tuple, n_rejected) where rejected records are prior
    draws inside the boundary margin of a bounded-support prior.
    """
    prior = models.prior_from_descriptor(dataset.model_descriptor["prior"])
    thetas, xs, conds = [], [], []
    rejected = 0
    for g in dataset.groups:
        keep = _interior_mask(prior, g.theta)
        rejected += int(np.sum(~keep))
        th = g.theta[keep]
        if kind == "prior":
            thetas.append(th)
            continue
        cond = np.full(th.shape[0], g.snr_db)
        if kind == "posterior":
            thetas.append(th)
            xs.append(g.measurements[keep])
            conds.append(cond)
        elif kind == "fisher":
            m = dataset.m_d
            thetas.append(np.repeat(th, m, axis=0))
            xs.append(g.measurements[keep].reshape(-1, dataset.d_x))
            conds.append(np.repeat(cond, m))
        else:
            raise ScoreMatchError(f"unknown loss kind {kind!r}")
    theta = np.concatenate(thetas, axis=0)
    if kind == "prior":
        return (theta,), rejected
    x = np.concatenate(xs, axis=0)
    cond = encode_condition(np.concatenate(conds))
    if kind == "fisher":
        return (x, theta, cond), rejected
    return (theta, x, cond), rejected


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 512
    lr: float = 4e-4
    weight_decay: float = 1e-4
    ema_decay: float = 0.999
    seed: int = 0

    def as_dict(self):
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "lr": self.lr, "weight_decay": self.weight_decay,
                "ema_decay": self.ema_decay, "seed": self.seed}


@dataclass
class TrainReport:
    kind: str
    loss_trace: list
    hyperparams: dict
    n_records: int
    rejected_records: int
    final_loss: float = field(init=False)

    def __post_init__(self):
        self.final_loss = self.loss_trace[-1] if self.loss_trace else math.nan

    def as_dict(self):
        return {"kind": self.kind, "loss_trace": self.loss_trace,
                "hyperparams": self.hyperparams, "n_records": self.n_records,
                "rejected_records": self.rejected_records,
                "final_loss": self.final_loss}


def _make_loss(kind, prior_score_fn):
    if kind == "prior":
        return PriorSMLoss()
    if kind == "posterior":
        return PosteriorSMLoss()
    if kind == "fisher":
        if prior_score_fn is None:
            raise ScoreMatchError("fisher training needs a prior score function")
        return FisherSMLoss(prior_score_fn)
    raise ScoreMatchError(f"unknown loss kind {kind!r}")


def train(score_model, kind, dataset, config=None, prior_score_fn=None):
    """Trains in place and installs the final EMA weights.

    Deterministic for a fixed config seed; raises TrainingDivergedError
    (with the epoch index) if the loss stops being finite.
    """
    config = config or TrainConfig()
    arrays, rejected = _flatten_for_loss(dataset, kind)
    n = arrays[0].shape[0]
    if n == 0:
        raise ScoreMatchError("no training records after boundary rejection")
    loss = _make_loss(kind, prior_score_fn)
    rng = np.random.Generator(
        np.random.Philox(key=np.array([config.seed, 3], dtype=np.uint64)))
    adam = nets.AdamWState(score_model.n_params)
    ema = nets.EmaState(score_model.params, config.ema_decay)
    trace = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch = arrays[0][idx] if kind == "prior" else tuple(a[idx] for a in arrays)
            try:
                bd, grad = loss.gradient(score_model, batch)
            except (ScoreMatchError, FloatingPointError) as exc:
                raise TrainingDivergedError(epoch, str(exc)) from exc
            if not math.isfinite(bd.total):
                raise TrainingDivergedError(epoch, f"loss={bd.total}")
            nets.optimizer_step(score_model.params, grad, adam,
                                config.lr, config.weight_decay)
            nets.ema_update(ema, score_model.params)
            epoch_losses.append(bd.total)
        trace.append(float(np.mean(epoch_losses)))
        if not math.isfinite(trace[-1]):
            raise TrainingDivergedError(epoch, f"epoch mean loss={trace[-1]}")
    nets.ema_swap(ema, score_model.params)
    return TrainReport(kind=kind, loss_trace=trace,
                       hyperparams=config.as_dict(), n_records=n,
                       rejected_records=rejected)


# ---------------------------------------------------------------------------
# Score-model persistence (checkpoint = JSON header + weight blob)
# ---------------------------------------------------------------------------

def save_score_model(path, score_model, kind):
    extra = {"kind": kind}
    if isinstance(score_model, physenc.PhysicsEncodedNet):
        extra["model_fn"] = score_model.model.descriptor()
        extra["residual_feature"] = score_model.residual_feature
    elif isinstance(score_model, nets.PosteriorScoreNet):
        extra["d_x"] = score_model.d_x
        extra["m_d"] = score_model.m_d
    elif isinstance(score_model, nets.FisherScoreNet):
        extra["d_x"] = score_model.d_x
    return nets.save_checkpoint(path, score_model.net.arch(),
                                score_model.params, extra=extra)


def load_score_model(path, model=None):
    header, params = nets.load_checkpoint(path)
    arch = header["arch"]
    extra = header.get("extra", {})
    kind = extra.get("kind")
    if kind == "prior":
        sm = nets.PriorScoreNet(arch["d_theta"], arch["n_blocks"], arch["width"],
                                seed=arch["seed"])
    elif kind == "posterior":
        sm = nets.PosteriorScoreNet(arch["d_theta"], extra["d_x"], extra["m_d"],
                                    arch["n_blocks"], arch["width"],
                                    cond_dim=arch["cond_dim"], seed=arch["seed"])
    elif kind == "fisher":
        sm = nets.FisherScoreNet(arch["d_theta"], extra["d_x"],
                                 arch["n_blocks"], arch["width"],
                                 cond_dim=arch["cond_dim"], seed=arch["seed"])
    elif kind == "physics_encoded":
        if model is None:
            model = models.model_from_descriptor(extra["model_fn"])
        sm = physenc.PhysicsEncodedNet(model, arch["n_blocks"], arch["width"],
                                       cond_dim=arch["cond_dim"],
                                       residual_feature=extra.get(
                                           "residual_feature", False),
                                       seed=arch["seed"])
    else:
        raise ScoreMatchError(f"unknown checkpoint kind {kind!r}")
    sm.set_params(params)
    return sm
