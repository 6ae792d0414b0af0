"""Measurement models, priors, and their analytic scores and FIMs.

These serve two roles: data generators for the learned-bound pipeline, and
ground-truth oracles on the model families where closed forms exist
(linear always; frequency estimation with Gaussian noise; one-bit
quantized linear with diagonal noise covariance).

SNR convention (shared by generation and evaluation):

    SNR_dB = 10*log10( E||signal||^2 / E||noise||^2 )

implemented by rescaling the noise covariance ``Sigma -> c*Sigma`` with
``c = signal_power / (tr(Sigma) * 10^(SNR_dB/10))``.  Signal power is
``sigma_P^2 * ||A||_F^2`` for the (quantized) linear models and ``N/2``
for the frequency model.  ``snr_db=None`` means "use Sigma as built"
(c = 1) and ``snr_db=inf`` means noiseless (c = 0).
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import erfcx

from .linalg import SymMatrix

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class ModelError(ValueError):
    pass


class NoAnalyticScoreError(ModelError):
    pass


def _rng_from(seed, stream):
    return np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------

class GaussianPrior:
    """Isotropic zero-mean Gaussian prior N(0, var * I)."""

    def __init__(self, d_theta, var):
        if var < 0:
            raise ModelError("prior variance must be >= 0")
        self.d_theta = int(d_theta)
        self.var = float(var)

    def sample(self, rng, n):
        if self.var == 0.0:
            return np.zeros((n, self.d_theta))
        return math.sqrt(self.var) * rng.standard_normal((n, self.d_theta))

    def score(self, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        if self.var == 0.0:
            raise ModelError("degenerate prior (var=0) has no score")
        return -theta / self.var

    def fim(self):
        if self.var == 0.0:
            raise ModelError("prior FIM diverges for var=0")
        return SymMatrix(np.eye(self.d_theta) / self.var)

    def interior(self, theta):
        return np.ones(np.atleast_2d(theta).shape[0], dtype=bool)

    def descriptor(self):
        return {"kind": "gaussian", "d_theta": self.d_theta, "var": self.var}


class BetaPrior:
    """Four-parameter Beta prior on a scalar parameter.

    PDF proportional to (x-l)^(alpha-1) * (u-x)^(beta-1) on (l, u).
    """

    d_theta = 1

    def __init__(self, alpha, beta, lower, upper):
        if alpha <= 0 or beta <= 0:
            raise ModelError("Beta shapes must be positive")
        if upper <= lower:
            raise ModelError("Beta support requires upper > lower")
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.lower = float(lower)
        self.upper = float(upper)

    def sample(self, rng, n):
        z = rng.beta(self.alpha, self.beta, size=n)
        return (self.lower + (self.upper - self.lower) * z)[:, None]

    def score(self, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        t = theta[:, 0]
        if np.any(t <= self.lower) or np.any(t >= self.upper):
            raise ModelError("score singular at boundary")
        s = (self.alpha - 1.0) / (t - self.lower) - (self.beta - 1.0) / (self.upper - t)
        return s[:, None]

    def fim(self):
        a, b = self.alpha, self.beta
        if a <= 2 or b <= 2:
            raise ModelError("prior FIM diverges (requires alpha > 2 and beta > 2)")
        width2 = (self.upper - self.lower) ** 2
        value = (a + b - 1.0) * (a + b - 2.0) / width2 * (1.0 / (a - 2.0) + 1.0 / (b - 2.0))
        return SymMatrix(np.array([[value]]))

    def interior(self, theta, margin_rel=0.0):
        t = np.atleast_2d(theta)[:, 0]
        margin = margin_rel * (self.upper - self.lower)
        return (t > self.lower + margin) & (t < self.upper - margin)

    def descriptor(self):
        return {"kind": "beta", "alpha": self.alpha, "beta": self.beta,
                "lower": self.lower, "upper": self.upper}


def prior_from_descriptor(desc):
    kind = desc["kind"]
    if kind == "gaussian":
        return GaussianPrior(desc["d_theta"], desc["var"])
    if kind == "beta":
        return BetaPrior(desc["alpha"], desc["beta"], desc["lower"], desc["upper"])
    raise ModelError(f"unknown prior kind {kind!r}")


def prior_fim(prior):
    return prior.fim()


# ---------------------------------------------------------------------------
# Noise sources for the frequency model
# ---------------------------------------------------------------------------

class NoiseSource:
    """Gaussian noise with a fixed covariance, or an empirical sample bank."""

    def __init__(self, kind, sigma=None, bank=None, bank_path=None):
        if kind not in ("gaussian", "bank"):
            raise ModelError(f"unknown noise kind {kind!r}")
        self.kind = kind
        self.sigma = None
        self.bank = None
        self.bank_path = bank_path
        if kind == "gaussian":
            self.sigma = np.asarray(sigma, dtype=np.float64)
            self._chol = np.linalg.cholesky(self.sigma)
            self._inv = np.linalg.inv(self.sigma)
            self.trace = float(np.trace(self.sigma))
        else:
            self.bank = np.asarray(bank, dtype=np.float64)
            if self.bank.ndim != 2 or self.bank.shape[0] == 0:
                raise ModelError("noise bank must be a non-empty (n, d_x) array")
            self.mean_power = float(np.mean(np.sum(self.bank ** 2, axis=1)))

    @classmethod
    def gaussian(cls, sigma):
        return cls("gaussian", sigma=sigma)

    @classmethod
    def from_bank(cls, samples, path=None):
        return cls("bank", bank=samples, bank_path=path)

    def draw(self, rng, shape, scale):
        """Noise draws of leading shape ``shape`` scaled to variance ``scale``."""
        if self.kind == "gaussian":
            w = rng.standard_normal(shape + (self.sigma.shape[0],))
            return math.sqrt(scale) * (w @ self._chol.T)
        idx = rng.integers(0, self.bank.shape[0], size=shape)
        return math.sqrt(scale) * self.bank[idx]

    def descriptor(self):
        if self.kind == "gaussian":
            return {"kind": "gaussian", "sigma": self.sigma.tolist()}
        return {"kind": "bank", "bank_path": self.bank_path,
                "n_bank": int(self.bank.shape[0])}


# ---------------------------------------------------------------------------
# Linear observation model: x = A theta + w,  w ~ N(0, Sigma)
# ---------------------------------------------------------------------------

class LinearModel:
    kind = "linear"

    def __init__(self, A, sigma, prior, static_seed=None):
        self.A = np.ascontiguousarray(A, dtype=np.float64)
        self.sigma = np.ascontiguousarray(sigma, dtype=np.float64)
        self.prior = prior
        self.static_seed = static_seed
        self.d_x, self.d_theta = self.A.shape
        if prior.d_theta != self.d_theta:
            raise ModelError("prior dimension does not match the mixing matrix")
        try:
            self._chol = np.linalg.cholesky(self.sigma)
        except np.linalg.LinAlgError as exc:
            raise ModelError("noise covariance is not positive definite") from exc
        self._sigma_inv = scipy.linalg.cho_solve((self._chol, True), np.eye(self.d_x))
        self._sigma_trace = float(np.trace(self.sigma))
        self.signal_power = prior.var * float(np.sum(self.A ** 2))
        if self.d_x < self.d_theta:
            import warnings
            warnings.warn("d_x < d_theta: parameters are not identifiable from "
                          "a single measurement", stacklevel=2)

    # -- SNR handling ------------------------------------------------------
    def noise_scale(self, snr_db):
        if snr_db is None:
            return 1.0
        if math.isinf(snr_db) and snr_db > 0:
            return 0.0
        return self.signal_power / (self._sigma_trace * 10.0 ** (snr_db / 10.0))

    def sigma_inv_at(self, snr_db):
        c = self.noise_scale(snr_db)
        if c == 0.0:
            raise ModelError("noiseless model has no finite Fisher score")
        return self._sigma_inv / c

    # -- sampling ----------------------------------------------------------
    def sample(self, theta, snr_db, rng, size=1):
        """``size`` i.i.d. measurement draws for one parameter value."""
        return self.sample_batch(np.atleast_2d(theta), snr_db, rng, size)[0]

    def sample_batch(self, thetas, snr_db, rng, m):
        thetas = np.atleast_2d(thetas)
        clean = thetas @ self.A.T
        c = self.noise_scale(snr_db)
        x = np.repeat(clean[:, None, :], m, axis=1)
        if c > 0.0:
            w = rng.standard_normal((thetas.shape[0], m, self.d_x))
            x += math.sqrt(c) * (w @ self._chol.T)
        return x

    # -- analytic pieces ----------------------------------------------------
    def fisher_score(self, x, theta, snr_db=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        resid = x - theta @ self.A.T
        return resid @ (self.sigma_inv_at(snr_db) @ self.A)

    def prior_score(self, theta):
        return self.prior.score(theta)

    def measurement_fim(self, snr_db=None):
        return SymMatrix(self.A.T @ self.sigma_inv_at(snr_db) @ self.A)

    def bcrb(self, k_eval, snr_db=None):
        fim = k_eval * self.measurement_fim(snr_db).entries + self.prior.fim().entries
        return SymMatrix(np.linalg.inv(fim))

    def model_function(self, theta):
        theta = np.atleast_2d(theta)
        m = theta @ self.A.T
        jac = np.broadcast_to(self.A, (theta.shape[0],) + self.A.shape)
        return m, jac

    def model_hessian(self, theta):
        theta = np.atleast_2d(theta)
        return np.zeros((theta.shape[0], self.d_x, self.d_theta, self.d_theta))

    def descriptor(self):
        return {"kind": self.kind, "d_x": self.d_x, "d_theta": self.d_theta,
                "prior": self.prior.descriptor(), "static_seed": self.static_seed}


# ---------------------------------------------------------------------------
# One-bit quantized linear model: x = sign(A theta + 1*b + w)
# ---------------------------------------------------------------------------

class QuantizedLinearModel:
    kind = "quantized"

    def __init__(self, base, shift_b=0.0):
        self.base = base
        self.shift_b = float(shift_b)
        self.prior = base.prior
        self.d_x = base.d_x
        self.d_theta = base.d_theta
        self.static_seed = base.static_seed

    def noise_scale(self, snr_db):
        return self.base.noise_scale(snr_db)

    def _unquantized(self, thetas):
        return np.atleast_2d(thetas) @ self.base.A.T + self.shift_b

    def sample(self, theta, snr_db, rng, size=1):
        return self.sample_batch(np.atleast_2d(theta), snr_db, rng, size)[0]

    def sample_batch(self, thetas, snr_db, rng, m):
        thetas = np.atleast_2d(thetas)
        u = self._unquantized(thetas)
        c = self.base.noise_scale(snr_db)
        pre = np.repeat(u[:, None, :], m, axis=1)
        if c > 0.0:
            w = rng.standard_normal((thetas.shape[0], m, self.d_x))
            pre += math.sqrt(c) * (w @ self.base._chol.T)
        return np.where(pre >= 0.0, 1.0, -1.0)

    def fisher_score(self, x, theta, snr_db=None):
        """Closed-form score; diagonal noise covariance only.

        Per component, with v = x_i * u_i / sigma_i, the ratio
        pdf(v)/cdf(v) is evaluated as sqrt(2/pi) / erfcx(-v/sqrt(2)) to
        stay finite deep in the tails.
        """
        sigma = self.base.sigma * self.base.noise_scale(snr_db)
        if self.base.noise_scale(snr_db) == 0.0:
            raise ModelError("noiseless quantizer has no finite Fisher score")
        off_diag = sigma - np.diag(np.diag(sigma))
        if np.abs(off_diag).max() > 1e-12 * max(np.abs(sigma).max(), 1e-300):
            raise NoAnalyticScoreError(
                "no analytic score: quantized model requires diagonal noise covariance")
        sig = np.sqrt(np.diag(sigma))
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        u = self._unquantized(theta)
        v = x * u / sig
        mills = SQRT_2_OVER_PI / erfcx(-v / math.sqrt(2.0))
        rho = x / sig * mills
        return rho @ self.base.A

    def prior_score(self, theta):
        return self.prior.score(theta)

    def model_function(self, theta):
        theta = np.atleast_2d(theta)
        u = self._unquantized(theta)
        jac = np.broadcast_to(self.base.A, (theta.shape[0],) + self.base.A.shape)
        return u, jac

    def model_hessian(self, theta):
        return self.base.model_hessian(theta)

    def descriptor(self):
        d = self.base.descriptor()
        d.update({"kind": self.kind, "shift_b": self.shift_b})
        return d


# ---------------------------------------------------------------------------
# Frequency estimation model: x_n = cos(theta * n) + w_n,  n = 0..N-1
# ---------------------------------------------------------------------------

class FrequencyModel:
    kind = "frequency"

    def __init__(self, n_samples, noise, prior, static_seed=None):
        if n_samples < 2:
            raise ModelError("frequency model needs at least 2 time samples")
        self.n_samples = int(n_samples)
        self.noise = noise
        self.prior = prior
        self.static_seed = static_seed
        self.d_x = self.n_samples
        self.d_theta = 1
        self._n = np.arange(self.n_samples, dtype=np.float64)
        self.signal_power = self.n_samples / 2.0

    def noise_scale(self, snr_db):
        if snr_db is None:
            return 1.0
        if math.isinf(snr_db) and snr_db > 0:
            return 0.0
        if self.noise.kind == "gaussian":
            base_power = self.noise.trace
        else:
            base_power = self.noise.mean_power
        return self.signal_power / (base_power * 10.0 ** (snr_db / 10.0))

    def sample(self, theta, snr_db, rng, size=1):
        return self.sample_batch(np.atleast_2d(theta), snr_db, rng, size)[0]

    def sample_batch(self, thetas, snr_db, rng, m):
        thetas = np.atleast_2d(thetas)
        clean = np.cos(thetas[:, :1] * self._n[None, :])
        x = np.repeat(clean[:, None, :], m, axis=1)
        c = self.noise_scale(snr_db)
        if c > 0.0:
            x += self.noise.draw(rng, (thetas.shape[0], m), c)
        return x

    def fisher_score(self, x, theta, snr_db=None):
        if self.noise.kind != "gaussian":
            raise NoAnalyticScoreError(
                "no analytic score: frequency model with an empirical noise bank")
        c = self.noise_scale(snr_db)
        if c == 0.0:
            raise ModelError("noiseless model has no finite Fisher score")
        sigma_inv = self.noise._inv / c
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        m, jac = self.model_function(theta)
        resid = (x - m) @ sigma_inv
        return np.einsum("bxp,bx->bp", jac, resid)

    def prior_score(self, theta):
        return self.prior.score(theta)

    def measurement_fim_at(self, theta, snr_db=None):
        """Non-Bayesian FIM J(theta)^T Sigma^-1 J(theta) at fixed theta."""
        if self.noise.kind != "gaussian":
            raise NoAnalyticScoreError("no analytic FIM for a noise bank")
        c = self.noise_scale(snr_db)
        sigma_inv = self.noise._inv / c
        _, jac = self.model_function(theta)
        return np.einsum("bxp,xy,byq->bpq", jac, sigma_inv, jac)

    def model_function(self, theta):
        theta = np.atleast_2d(theta)
        phase = theta[:, :1] * self._n[None, :]
        m = np.cos(phase)
        jac = (-self._n[None, :] * np.sin(phase))[:, :, None]
        return m, jac

    def model_hessian(self, theta):
        theta = np.atleast_2d(theta)
        phase = theta[:, :1] * self._n[None, :]
        h = (-self._n[None, :] ** 2 * np.cos(phase))[:, :, None, None]
        return h

    def descriptor(self):
        return {"kind": self.kind, "n_samples": self.n_samples,
                "noise": self.noise.descriptor(),
                "prior": self.prior.descriptor(), "static_seed": self.static_seed}


# ---------------------------------------------------------------------------
# Static-parameter factories (A and Sigma drawn once per experiment)
# ---------------------------------------------------------------------------

def random_mixing(d_x, d_theta, seed):
    rng = _rng_from(seed, 0)
    return rng.standard_normal((d_x, d_theta))


def random_covariance(d_x, seed):
    rng = _rng_from(seed, 1)
    u = rng.standard_normal((d_x, d_x))
    s = u @ u.T
    return s / np.trace(s)


def make_linear_model(d_x, d_theta, prior_var, static_seed):
    return LinearModel(
        A=random_mixing(d_x, d_theta, static_seed),
        sigma=random_covariance(d_x, static_seed),
        prior=GaussianPrior(d_theta, prior_var),
        static_seed=static_seed,
    )


def make_quantized_model(d_x, d_theta, prior_var, static_seed, rho=0.0, shift_b=0.0):
    """Quantized linear model with pairwise noise correlation ``rho``."""
    var = np.diag(random_covariance(d_x, static_seed))
    sig = np.sqrt(var)
    sigma = rho * np.outer(sig, sig)
    np.fill_diagonal(sigma, var)
    base = LinearModel(
        A=random_mixing(d_x, d_theta, static_seed),
        sigma=sigma,
        prior=GaussianPrior(d_theta, prior_var),
        static_seed=static_seed,
    )
    return QuantizedLinearModel(base, shift_b=shift_b)


def make_frequency_model(n_samples, prior_alpha, prior_beta=None, lower=0.0,
                         upper=math.pi, noise=None, static_seed=None):
    if prior_beta is None:
        prior_beta = prior_alpha
    if noise is None:
        noise = NoiseSource.gaussian(np.eye(n_samples))
    return FrequencyModel(
        n_samples=n_samples,
        noise=noise,
        prior=BetaPrior(prior_alpha, prior_beta, lower, upper),
        static_seed=static_seed,
    )


def model_from_descriptor(desc, bank=None):
    kind = desc["kind"]
    if kind == "linear":
        prior = prior_from_descriptor(desc["prior"])
        return LinearModel(
            A=random_mixing(desc["d_x"], desc["d_theta"], desc["static_seed"]),
            sigma=random_covariance(desc["d_x"], desc["static_seed"]),
            prior=prior, static_seed=desc["static_seed"])
    if kind == "quantized":
        prior = prior_from_descriptor(desc["prior"])
        rho = desc.get("rho", 0.0)
        m = make_quantized_model(desc["d_x"], desc["d_theta"], prior.var,
                                 desc["static_seed"], rho=rho,
                                 shift_b=desc.get("shift_b", 0.0))
        return m
    if kind == "frequency":
        nd = desc["noise"]
        if nd["kind"] == "gaussian":
            noise = NoiseSource.gaussian(np.array(nd["sigma"]))
        else:
            if bank is None:
                bank = np.load(nd["bank_path"])
            noise = NoiseSource.from_bank(bank, path=nd.get("bank_path"))
        prior = prior_from_descriptor(desc["prior"])
        return FrequencyModel(desc["n_samples"], noise, prior,
                              static_seed=desc.get("static_seed"))
    raise ModelError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# Operation-style entry points
# ---------------------------------------------------------------------------

def sample_prior(model, rng, n=1):
    return model.prior.sample(rng, n)


def sample_measurement(model, theta, snr_db, rng, size=1):
    return model.sample(theta, snr_db, rng, size=size)


def true_fisher_score(model, x, theta, snr_db=None):
    return model.fisher_score(x, theta, snr_db=snr_db)


def true_prior_score(model, theta):
    return model.prior_score(theta)


def analytic_bcrb(model, k_eval, snr_db=None):
    if not isinstance(model, LinearModel):
        raise NoAnalyticScoreError("closed-form BCRB exists only for the linear model")
    return model.bcrb(k_eval, snr_db=snr_db)


def model_function(model, theta):
    return model.model_function(theta)
