"""Score-network architecture and its exact differentiation machinery.

The network is a stack of basic blocks, each applying (i) parameter
injection (scale and shift computed from theta), (ii) an affine map,
(iii) condition injection (scale computed from the conditioning vector),
and (iv) a Swish nonlinearity (omitted on the final block).

Besides the plain forward pass, the stack supports a forward pass with
tangents: T directions of theta are propagated alongside the primal
values, which yields columns of the input Jacobian d(out)/d(theta)
exactly.  The reverse pass differentiates any function of the outputs
*and* their tangents with respect to all weights, which is what the
score-matching losses need for their trace terms.

Parameter dimension is small (d_theta <= ~8), so exact tangent columns
are cheap and no stochastic trace estimation is used anywhere.
"""

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import kernels as K


class NetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Architecture and parameter layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockSpec:
    n_in: int
    n_out: int
    swish: bool
    inject_theta: bool
    inject_cond: bool


def _block_param_shapes(spec, d_theta, cond_dim):
    shapes = []
    if spec.inject_theta:
        shapes += [("Ws", (spec.n_in, d_theta)), ("bs", (spec.n_in,)),
                   ("Wt", (spec.n_in, d_theta)), ("bt", (spec.n_in,))]
    shapes += [("W", (spec.n_out, spec.n_in)), ("b", (spec.n_out,))]
    if spec.inject_cond:
        shapes += [("Wc", (spec.n_out, cond_dim)), ("bc", (spec.n_out,))]
    return shapes


class BasicBlockNet:
    """Stack of basic blocks mapping (input, theta, cond) -> output."""

    def __init__(self, input_dim, output_dim, d_theta, n_blocks=1, width=0,
                 cond_dim=0, inject_theta=True, seed=0):
        if n_blocks < 1:
            raise NetError("need at least one block")
        if n_blocks > 1 and width < 1:
            raise NetError("multi-block nets need a positive width")
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.d_theta = int(d_theta)
        self.cond_dim = int(cond_dim)
        self.n_blocks = int(n_blocks)
        self.width = int(width)
        self.inject_theta = bool(inject_theta)
        self.seed = int(seed)

        dims = [input_dim] + [width] * (n_blocks - 1) + [output_dim]
        self.blocks = [
            BlockSpec(n_in=dims[i], n_out=dims[i + 1],
                      swish=(i < n_blocks - 1),
                      inject_theta=self.inject_theta,
                      inject_cond=cond_dim > 0)
            for i in range(n_blocks)
        ]

        self._layout = []
        offset = 0
        for bi, spec in enumerate(self.blocks):
            for name, shape in _block_param_shapes(spec, d_theta, cond_dim):
                size = int(np.prod(shape))
                self._layout.append((bi, name, shape, offset, size))
                offset += size
        self.n_params = offset
        self.params = np.zeros(self.n_params)
        self._init_params()

    # -- parameters ----------------------------------------------------------
    def _views(self, vec):
        """Per-block named views into a flat vector (shared memory)."""
        out = [SimpleNamespace() for _ in self.blocks]
        for bi, name, shape, offset, size in self._layout:
            setattr(out[bi], name, vec[offset:offset + size].reshape(shape))
        return out

    def _init_params(self):
        rng = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, 77], dtype=np.uint64)))
        views = self._views(self.params)
        for spec, bp in zip(self.blocks, views):
            std = np.sqrt(2.0 / (spec.n_in + spec.n_out))
            bp.W[:] = std * rng.standard_normal(bp.W.shape)
            bp.b[:] = 0.0
            if spec.inject_theta:
                bp.Ws[:] = 0.0
                bp.bs[:] = 1.0
                bp.Wt[:] = 0.0
                bp.bt[:] = 0.0
            if spec.inject_cond:
                bp.Wc[:] = 0.0
                bp.bc[:] = 1.0

    def get_params(self):
        return self.params.copy()

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise NetError(f"expected {self.n_params} parameters, got {flat.shape}")
        self.params[:] = flat

    def named_params(self):
        """(block_index, name) -> view mapping, for inspection in tests."""
        return {(bi, name): self.params[off:off + size].reshape(shape)
                for bi, name, shape, off, size in self._layout}

    def clone(self):
        other = BasicBlockNet(self.input_dim, self.output_dim, self.d_theta,
                              self.n_blocks, self.width, self.cond_dim,
                              self.inject_theta, self.seed)
        other.set_params(self.params)
        return other

    def arch(self):
        return {"input_dim": self.input_dim, "output_dim": self.output_dim,
                "d_theta": self.d_theta, "n_blocks": self.n_blocks,
                "width": self.width, "cond_dim": self.cond_dim,
                "inject_theta": self.inject_theta, "seed": self.seed}

    @classmethod
    def from_arch(cls, arch):
        return cls(**arch)

    # -- forward -------------------------------------------------------------
    def _check(self, z0, theta, cond):
        if z0.shape[1] != self.input_dim:
            raise NetError(f"input dim {z0.shape[1]} != {self.input_dim}")
        if theta.shape[1] != self.d_theta:
            raise NetError(f"theta dim {theta.shape[1]} != {self.d_theta}")
        if self.cond_dim and (cond is None or cond.shape[1] != self.cond_dim):
            raise NetError("conditioning input missing or wrong width")

    def forward(self, z0, theta, cond=None):
        z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        self._check(z0, theta, cond)
        z = z0
        views = self._views(self.params)
        for spec, bp in zip(self.blocks, views):
            if spec.inject_theta:
                z = K.inject_fwd(z, theta @ bp.Ws.T + bp.bs,
                                 theta @ bp.Wt.T + bp.bt)
            z = z @ bp.W.T + bp.b
            if spec.inject_cond:
                z = K.scale_fwd(z, cond @ bp.Wc.T + bp.bc)
            if spec.swish:
                z, _ = K.swish_fwd(z)
        return z

    def forward_tan(self, z0, dz0, theta, dtheta, cond=None):
        """Primal and tangent forward pass with a cache for the backward.

        dz0: (T, B, input_dim) tangents of the input, or None for zeros.
        dtheta: (T, d_theta) tangent directions of theta, or None for zeros.
        With both None the pass is tangent-free (plain forward plus cache).
        """
        z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        self._check(z0, theta, cond)
        B = z0.shape[0]
        T = 0
        if dz0 is not None:
            T = dz0.shape[0]
        elif dtheta is not None:
            T = dtheta.shape[0]
        if T and dz0 is None:
            dz0 = np.zeros((T, B, self.input_dim))
        views = self._views(self.params)
        z, dz = z0, (dz0 if T else None)
        caches = []
        for spec, bp in zip(self.blocks, views):
            c = SimpleNamespace(z=z, dz=dz, sp=None, dsp=None, a=None, da=None,
                                sc=None, sig=None)
            if spec.inject_theta:
                c.sp = theta @ bp.Ws.T + bp.bs
                tp = theta @ bp.Wt.T + bp.bt
                h = K.inject_fwd(z, c.sp, tp)
                dh = None
                if T:
                    if dtheta is not None:
                        c.dsp = dtheta @ bp.Ws.T
                        dtp = dtheta @ bp.Wt.T
                    else:
                        c.dsp = np.zeros((T, spec.n_in))
                        dtp = c.dsp
                    dh = K.inject_jvp(z, dz, c.sp, c.dsp, dtp)
            else:
                h, dh = z, dz
            c.h, c.dh = h, dh
            a = h @ bp.W.T + bp.b
            da = None
            if T:
                da = (dh.reshape(T * B, -1) @ bp.W.T).reshape(T, B, spec.n_out)
            if spec.inject_cond:
                c.sc = cond @ bp.Wc.T + bp.bc
                g = K.scale_fwd(a, c.sc)
                dg = K.scale_jvp(da, c.sc) if T else None
                c.a, c.da = a, da
            else:
                g, dg = a, da
            c.g, c.dg = g, dg
            if spec.swish:
                y, c.sig = K.swish_fwd(g)
                dy = K.swish_jvp(g, c.sig, dg) if T else None
            else:
                y, dy = g, dg
            caches.append(c)
            z, dz = y, dy
        cache = SimpleNamespace(blocks=caches, theta=theta, dtheta=dtheta,
                                cond=cond, T=T, B=B)
        return z, dz, cache

    # -- backward ------------------------------------------------------------
    def backward_tan(self, cache, out_bar, dout_bar, return_input_grads=False):
        """Gradient of sum(out*out_bar) + sum(dout*dout_bar) w.r.t. weights.

        Returns the flat gradient vector; with return_input_grads=True also
        returns (z0_bar, dz0_bar) for composition by wrappers.
        """
        grad = np.zeros(self.n_params)
        gviews = self._views(grad)
        views = self._views(self.params)
        theta, dtheta, cond = cache.theta, cache.dtheta, cache.cond
        T, B = cache.T, cache.B
        ybar = out_bar
        dybar = dout_bar if T else None
        for spec, bp, gp, c in zip(reversed(self.blocks), reversed(views),
                                   reversed(gviews), reversed(cache.blocks)):
            if spec.swish:
                gbar, dgbar = K.swish_bwd(c.g, c.sig, c.dg, ybar, dybar)
            else:
                gbar, dgbar = ybar, dybar
            if spec.inject_cond:
                abar, dabar, scbar = K.scale_bwd(c.a, c.da, c.sc, gbar, dgbar)
                gp.Wc += scbar.T @ cond
                gp.bc += scbar.sum(axis=0)
            else:
                abar, dabar = gbar, dgbar
            gp.W += abar.T @ c.h
            gp.b += abar.sum(axis=0)
            hbar = abar @ bp.W
            if dabar is not None:
                gp.W += np.einsum("tbo,tbn->on", dabar, c.dh)
                dhbar = (dabar.reshape(T * B, -1) @ bp.W).reshape(T, B, spec.n_in)
            else:
                dhbar = None
            if spec.inject_theta:
                zbar, dzbar, spbar, dspbar, dtpbar = K.inject_bwd(
                    c.z, c.dz, c.sp, c.dsp, hbar, dhbar, need_dzbar=True)
                gp.Ws += spbar.T @ theta
                gp.bs += spbar.sum(axis=0)
                gp.Wt += hbar.T @ theta
                gp.bt += hbar.sum(axis=0)
                if dtheta is not None and dspbar is not None:
                    gp.Ws += dspbar.T @ dtheta
                    gp.Wt += dtpbar.T @ dtheta
            else:
                zbar, dzbar = hbar, dhbar
            ybar, dybar = zbar, dzbar
        if return_input_grads:
            return grad, ybar, dybar
        return grad

    # -- Jacobian ------------------------------------------------------------
    def input_jacobian(self, z0, theta, cond=None, dz0_dtheta=None):
        """Exact Jacobian d(out)/d(theta), shape (B, output_dim, d_theta).

        theta reaches the output through the injections and, when
        ``dz0_dtheta`` (B, input_dim, d_theta) is given, through the input.
        """
        z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        dtheta = np.eye(self.d_theta) if self.inject_theta else None
        dz0 = None
        if dz0_dtheta is not None:
            dz0 = np.ascontiguousarray(np.moveaxis(dz0_dtheta, 2, 0))
            if dtheta is None:
                dtheta = np.zeros((self.d_theta, self.d_theta))
        elif dtheta is None:
            return np.zeros((z0.shape[0], self.output_dim, self.d_theta))
        _, dout, _ = self.forward_tan(z0, dz0, theta, dtheta, cond)
        return np.ascontiguousarray(np.moveaxis(dout, 0, 2))


# ---------------------------------------------------------------------------
# Score-model adapters: input assembly per score kind
# ---------------------------------------------------------------------------

class _AdapterBase:
    """Shared plumbing: flat-parameter access and the reverse pass."""

    @property
    def params(self):
        return self.net.params

    @property
    def n_params(self):
        return self.net.n_params

    def get_params(self):
        return self.net.get_params()

    def set_params(self, flat):
        self.net.set_params(flat)

    def backward(self, cache, out_bar, dout_bar=None):
        return self.net.backward_tan(cache, out_bar, dout_bar)


class PriorScoreNet(_AdapterBase):
    """Models the prior score s_P(theta); the input is theta itself."""

    def __init__(self, d_theta, n_blocks=1, width=0, seed=0):
        self.net = BasicBlockNet(d_theta, d_theta, d_theta, n_blocks, width,
                                 cond_dim=0, inject_theta=True, seed=seed)
        self.d_theta = d_theta

    def score(self, theta):
        theta = np.atleast_2d(theta)
        return self.net.forward(theta, theta)

    def score_tan(self, theta):
        theta = np.atleast_2d(theta)
        T = self.d_theta
        eye = np.eye(T)
        dz0 = np.broadcast_to(eye[:, None, :], (T, theta.shape[0], T))
        return self.net.forward_tan(theta, np.ascontiguousarray(dz0), theta, eye)

    def jacobian(self, theta):
        theta = np.atleast_2d(theta)
        eye = np.broadcast_to(np.eye(self.d_theta),
                              (theta.shape[0], self.d_theta, self.d_theta))
        return self.net.input_jacobian(theta, theta, dz0_dtheta=eye)


class PosteriorScoreNet(_AdapterBase):
    """Models the posterior score s_B(theta | x_1..x_m, cond).

    The network input is the concatenation [theta, x_1, ..., x_m]; theta
    additionally feeds the per-block injections.
    """

    def __init__(self, d_theta, d_x, m_d, n_blocks=1, width=0, cond_dim=1, seed=0):
        self.d_theta = d_theta
        self.d_x = d_x
        self.m_d = m_d
        self.net = BasicBlockNet(d_theta + m_d * d_x, d_theta, d_theta,
                                 n_blocks, width, cond_dim=cond_dim,
                                 inject_theta=True, seed=seed)

    def _assemble(self, theta, x):
        theta = np.atleast_2d(theta)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, None, :]
        if x.shape[1] != self.m_d:
            raise NetError(f"record has {x.shape[1]} measurements, net expects {self.m_d}")
        return np.concatenate([theta, x.reshape(x.shape[0], -1)], axis=1)

    def _dz0(self, batch_size):
        T = self.d_theta
        dz0 = np.zeros((T, batch_size, self.net.input_dim))
        dz0[:, :, :T] = np.eye(T)[:, None, :]
        return dz0

    def score(self, theta, x, cond=None):
        return self.net.forward(self._assemble(theta, x), np.atleast_2d(theta), cond)

    def score_tan(self, theta, x, cond=None):
        z0 = self._assemble(theta, x)
        return self.net.forward_tan(z0, self._dz0(z0.shape[0]),
                                    np.atleast_2d(theta), np.eye(self.d_theta), cond)

    def jacobian(self, theta, x, cond=None):
        _, dout, _ = self.score_tan(theta, x, cond)
        return np.ascontiguousarray(np.moveaxis(dout, 0, 2))


class FisherScoreNet(_AdapterBase):
    """Models the measurement (Fisher) score s_F(x | theta, cond).

    The network input is x alone; theta enters only via the injections.
    """

    def __init__(self, d_theta, d_x, n_blocks=1, width=0, cond_dim=1, seed=0):
        self.d_theta = d_theta
        self.d_x = d_x
        self.net = BasicBlockNet(d_x, d_theta, d_theta, n_blocks, width,
                                 cond_dim=cond_dim, inject_theta=True, seed=seed)

    def score(self, x, theta, cond=None):
        return self.net.forward(np.atleast_2d(x), np.atleast_2d(theta), cond)

    def score_tan(self, x, theta, cond=None):
        return self.net.forward_tan(np.atleast_2d(x), None, np.atleast_2d(theta),
                                    np.eye(self.d_theta), cond)

    def jacobian(self, x, theta, cond=None):
        return self.net.input_jacobian(np.atleast_2d(x), np.atleast_2d(theta), cond)


# ---------------------------------------------------------------------------
# Losses' parameter gradients (generic entry point)
# ---------------------------------------------------------------------------

def loss_param_gradient(score_model, loss_evaluator, batch):
    """Exact gradient of the batch loss w.r.t. all weights.

    ``loss_evaluator`` is one of the scorematch loss objects; the heavy
    lifting (trace-term reverse pass included) happens in its
    ``gradient`` method.
    """
    _, grad = loss_evaluator.gradient(score_model, batch)
    return grad


# ---------------------------------------------------------------------------
# Optimizer (adaptive moments with decoupled weight decay) and EMA
# ---------------------------------------------------------------------------

class AdamWState:
    def __init__(self, n_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.step = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def optimizer_step(params, grad, state, lr, weight_decay=0.0):
    """One AdamW update, in place on ``params``."""
    if params.shape != grad.shape:
        raise NetError("parameter/gradient length mismatch")
    if not np.all(np.isfinite(grad)):
        raise NetError("non-finite gradient")
    state.step += 1
    K.adamw_update(params, grad, state.m, state.v, state.step, lr,
                   state.beta1, state.beta2, state.eps, weight_decay)
    return params


class EmaState:
    def __init__(self, params, decay):
        if not 0.0 <= decay <= 1.0:
            raise NetError("EMA decay must lie in [0, 1]")
        self.shadow = np.array(params, dtype=np.float64, copy=True)
        self.decay = float(decay)


def ema_update(ema, params):
    if ema.shadow.shape != params.shape:
        raise NetError("EMA length mismatch")
    ema.shadow *= ema.decay
    ema.shadow += (1.0 - ema.decay) * params


def ema_swap(ema, params):
    """Exchanges shadow and live weights (installs the EMA for evaluation)."""
    if ema.shadow.shape != params.shape:
        raise NetError("EMA length mismatch")
    tmp = params.copy()
    params[:] = ema.shadow
    ema.shadow[:] = tmp


# ---------------------------------------------------------------------------
# Checkpoints: JSON header + float64 blob, CRC32
# ---------------------------------------------------------------------------

_MAGIC = b"LBCK"


def save_checkpoint(path, arch, params, extra=None):
    payload = np.ascontiguousarray(params, dtype="<f8").tobytes()
    header = {"arch": arch, "n_params": int(params.shape[0]),
              "crc32": zlib.crc32(payload)}
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(hbytes).to_bytes(4, "little"))
        fh.write(hbytes)
        fh.write(payload)
    return path


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise NetError(f"{path} is not a checkpoint file")
    hlen = int.from_bytes(raw[4:8], "little")
    header = json.loads(raw[8:8 + hlen].decode())
    payload = raw[8 + hlen:]
    if zlib.crc32(payload) != header["crc32"]:
        raise NetError(f"checkpoint {path} failed its checksum")
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if params.shape[0] != header["n_params"]:
        raise NetError(f"checkpoint {path} is truncated")
    return header, params
