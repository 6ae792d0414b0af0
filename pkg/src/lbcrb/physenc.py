"""Physics-encoded Fisher score network.

Wraps an inner network s_I(x, tau, cond) with a known deterministic model
function M: the composed score is

    s(x | theta) = (dM/dtheta)^T s_I(x, M(theta), cond),

so only the measurement-noise behavior has to be learned while the
parameter dependence rides on M.  The wrapper needs M's first and second
derivatives from the measurement model (analytic for the model families
here: the cosine map and affine maps), because the score-matching trace
term differentiates the composition once more.

The inner network never sees theta directly: tau = M(theta) is computed
on the fly for every forward pass, and tangent directions of theta reach
the inner network only through tau.
"""

import numpy as np

from .nets import BasicBlockNet, NetError, _AdapterBase


class PhysicsEncodedNet(_AdapterBase):
    """Fisher score model (dM/dtheta)^T s_I(x, M(theta), cond)."""

    def __init__(self, model, n_blocks=1, width=0, cond_dim=1,
                 residual_feature=False, seed=0):
        if not hasattr(model, "model_hessian"):
            raise NetError(
                "physics encoding needs a model with analytic first and "
                "second derivatives of M")
        self.model = model
        self.d_theta = model.d_theta
        self.d_x = model.d_x
        self.residual_feature = bool(residual_feature)
        n_features = (3 if residual_feature else 2) * model.d_x
        self.net = BasicBlockNet(n_features, model.d_x, model.d_theta,
                                 n_blocks, width, cond_dim=cond_dim,
                                 inject_theta=False, seed=seed)

    # kept under both names: `inner` is how the wrapper reads at call sites,
    # `net` is what _AdapterBase expects.
    @property
    def inner(self):
        return self.net

    def _assemble(self, x, tau):
        parts = [x, tau]
        if self.residual_feature:
            parts.append(x - tau)
        return np.concatenate(parts, axis=1)

    def score(self, x, theta, cond=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        tau, jac = self.model.model_function(theta)
        s_inner = self.net.forward(self._assemble(x, tau), theta, cond)
        return np.einsum("bxp,bx->bp", jac, s_inner)

    def score_tan(self, x, theta, cond=None):
        """Score, its theta-tangents, and a cache for the reverse pass."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        B = x.shape[0]
        T = self.d_theta
        tau, jac = self.model.model_function(theta)
        hess = self.model.model_hessian(theta)
        z0 = self._assemble(x, tau)
        dz0 = np.zeros((T, B, z0.shape[1]))
        dtau = np.moveaxis(jac, 2, 0)                    # (T, B, d_x)
        dz0[:, :, self.d_x:2 * self.d_x] = dtau
        if self.residual_feature:
            dz0[:, :, 2 * self.d_x:] = -dtau
        s_inner, ds_inner, inner_cache = self.net.forward_tan(
            z0, dz0, theta, None, cond)
        out = np.einsum("bxp,bx->bp", jac, s_inner)
        dout = (np.einsum("bxpt,bx->tbp", hess, s_inner)
                + np.einsum("bxp,tbx->tbp", jac, ds_inner))
        cache = {"inner": inner_cache, "jac": jac, "hess": hess}
        return out, dout, cache

    def backward(self, cache, out_bar, dout_bar=None):
        """Gradient w.r.t. the inner weights; the wrapper itself has none."""
        jac, hess = cache["jac"], cache["hess"]
        s_inner_bar = np.einsum("bxp,bp->bx", jac, out_bar)
        ds_inner_bar = None
        if dout_bar is not None:
            s_inner_bar = s_inner_bar + np.einsum(
                "bxpt,tbp->bx", hess, dout_bar)
            ds_inner_bar = np.einsum("bxp,tbp->tbx", jac, dout_bar)
        return self.net.backward_tan(cache["inner"], s_inner_bar, ds_inner_bar)

    def jacobian(self, x, theta, cond=None):
        """Exact d(score)/d(theta), shape (B, d_theta, d_theta)."""
        _, dout, _ = self.score_tan(x, theta, cond)
        return np.ascontiguousarray(np.moveaxis(dout, 0, 2))


def pe_forward(net, x, theta, cond=None):
    return net.score(x, theta, cond)


def pe_input_jacobian(net, x, theta, cond=None):
    return net.jacobian(x, theta, cond)
