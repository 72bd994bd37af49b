"""Backend-generic LANO rollout with forward-mode tangents.

The same code runs on numpy arrays (reference inference path) and on torch
tensors (training, where autograd differentiates through the tangent
recursion). Tangents carry an extra axis of length R = r_m, so every
Jacobian is exact and costs one pass.

Shapes: beta_m (B, r_m); beta_f0 (r_F,) or (B, r_F). Outputs
``bF``/``bJ`` (B, K+1, r_F) and ``dF``/``dJ`` (B, K, r_F, r_m), the
latter being d(beta_{k+1})/d(beta_m) for k = 0..K-1.
"""

from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5


class NumpyOps:
    einsum = staticmethod(np.einsum)
    tanh = staticmethod(np.tanh)
    exp = staticmethod(np.exp)
    expm1 = staticmethod(np.expm1)
    sqrt = staticmethod(np.sqrt)
    where = staticmethod(np.where)
    minimum = staticmethod(np.minimum)

    @staticmethod
    def sum(x, axis, keepdims=False):
        return np.sum(x, axis=axis, keepdims=keepdims)

    @staticmethod
    def mean(x, axis, keepdims=False):
        return np.mean(x, axis=axis, keepdims=keepdims)

    @staticmethod
    def amax(x, axis, keepdims=False):
        return np.max(x, axis=axis, keepdims=keepdims)

    @staticmethod
    def stack(xs, axis):
        return np.stack(xs, axis=axis)

    @staticmethod
    def cat(xs, axis):
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def expand(x, shape):
        return np.broadcast_to(x, shape)

    @staticmethod
    def zeros(shape, like):
        return np.zeros(shape, dtype=like.dtype)

    @staticmethod
    def eye(n, like):
        return np.eye(n, dtype=like.dtype)

    @staticmethod
    def isfinite_all(x):
        return bool(np.all(np.isfinite(x)))


class TorchOps:
    def __init__(self):
        import torch

        self.t = torch
        self.einsum = torch.einsum
        self.tanh = torch.tanh
        self.exp = torch.exp
        self.expm1 = torch.expm1
        self.sqrt = torch.sqrt
        self.where = torch.where

    def minimum(self, x, c):
        return self.t.clamp(x, max=c)

    def sum(self, x, axis, keepdims=False):
        return x.sum(dim=axis, keepdim=keepdims)

    def mean(self, x, axis, keepdims=False):
        return x.mean(dim=axis, keepdim=keepdims)

    def amax(self, x, axis, keepdims=False):
        return x.amax(dim=axis, keepdim=keepdims)

    def stack(self, xs, axis):
        return self.t.stack(xs, dim=axis)

    def cat(self, xs, axis):
        return self.t.cat(xs, dim=axis)

    def expand(self, x, shape):
        return x.expand(*shape)

    def zeros(self, shape, like):
        return self.t.zeros(shape, dtype=like.dtype)

    def eye(self, n, like):
        return self.t.eye(n, dtype=like.dtype)

    def isfinite_all(self, x):
        return bool(self.t.isfinite(x).all())


NUMPY = NumpyOps()


class NonFiniteActivation(FloatingPointError):
    def __init__(self, layer, step):
        super().__init__(f"non-finite activation in layer {layer!r} at step {step}")
        self.layer = layer
        self.step = step


def elu(x, ops):
    return ops.where(x > 0, x, ops.expm1(ops.minimum(x, 0.0)))


def elu_prime(x, ops):
    return ops.where(x > 0, x * 0 + 1, ops.exp(ops.minimum(x, 0.0)))


def _check(x, name, k, ops, enabled):
    if enabled and not ops.isfinite_all(x):
        raise NonFiniteActivation(name, k)


def lano_rollout(P, beta_m, beta_f0, ops=NUMPY, tangents=True, teacher=None, check=True):
    """Autoregressive LANO rollout; returns a dict with bF, bJ and (if asked) dF, dJ.

    Tangents are held as (B, R, n) so each tangent of a linear layer is the
    same right-multiplication as the primal and maps onto one large GEMM.
    """
    K = P["Ws"].shape[0]
    d_h = P["Wp"].shape[0]
    d_a = P["WQ"].shape[1]
    B, R = beta_m.shape
    r_f = P["Ws"].shape[2]
    if beta_f0.ndim == 1:
        beta_f0 = ops.expand(beta_f0[None, :], (B, r_f))
    scale = 1.0 / math.sqrt(d_a)

    p = beta_m @ P["Wp"].T + P["bp"]
    tp = ops.expand(P["Wp"].T[None], (B, R, d_h)) if tangents else None
    bF, bJ = [beta_f0], [beta_f0]
    dF, dJ = [], []
    tF = ops.zeros((B, R, r_f), beta_m) if tangents else None
    tJ = tF
    keys, vals, tkeys, tvals = [], [], [], []
    for k in range(K):
        if teacher is not None:
            xF = teacher[:, k]
            txF = ops.zeros((B, R, r_f), beta_m) if tangents else None
        else:
            xF, txF = bF[k], tF
        s = xF @ P["Ws"][k].T + P["bs"][k]
        Wz = P["Wz"][k]
        pre = s @ Wz[:, :d_h].T + p @ Wz[:, d_h:].T + P["bz"][k]
        th = ops.tanh(pre)
        z = th + P["P"][:, k]
        q = z @ P["WQ"]
        keys.append(z @ P["WK"])
        vals.append(z @ P["WV"])
        Km = ops.stack(keys, 1)  # (B, j, a)
        Vm = ops.stack(vals, 1)
        sc = (Km @ q[:, :, None])[:, :, 0] * scale
        e = ops.exp(sc - ops.amax(sc, 1, keepdims=True))
        w = e / ops.sum(e, 1, keepdims=True)
        a = (w[:, None, :] @ Vm)[:, 0]
        h1 = a @ P["W1"] + P["b1"]
        e1 = elu(h1, ops)
        h2 = e1 @ P["W2"] + P["b2"]
        mu = ops.mean(h2, 1, keepdims=True)
        c = h2 - mu
        inv = 1.0 / ops.sqrt(ops.mean(c * c, 1, keepdims=True) + LN_EPS)
        n = c * inv
        f = P["ln_g"] * n + P["ln_b"]
        _check(f, "feed-forward", k, ops, check)
        gF = f @ P["W1F"][k].T + P["b1F"][k]
        gJ = f @ P["W1J"][k].T + P["b1J"][k]
        eF, eJ = elu(gF, ops), elu(gJ, ops)
        baseF = xF if teacher is not None else bF[k]
        bF.append(baseF + eF @ P["W2F"][k].T + P["b2F"][k])
        bJ.append(bJ[k] + eJ @ P["W2J"][k].T + P["b2J"][k])
        _check(bF[-1], "head-F", k, ops, check)
        _check(bJ[-1], "head-J", k, ops, check)

        if not tangents:
            continue
        tpre = (txF @ P["Ws"][k].T) @ Wz[:, :d_h].T + tp @ Wz[:, d_h:].T
        tz = (1.0 - th * th)[:, None, :] * tpre
        tq = tz @ P["WQ"]
        tkeys.append(tz @ P["WK"])
        tvals.append(tz @ P["WV"])
        tK = ops.stack(tkeys, 2)  # (B, R, j, a)
        tV = ops.stack(tvals, 2)
        tsc = tq @ _tr(Km)
        tsc = (tsc + (tK @ q[:, None, :, None])[..., 0]) * scale  # (B, R, j)
        wr = w[:, None, :]
        tw = wr * (tsc - ops.sum(wr * tsc, 2, keepdims=True))
        ta = tw @ Vm + (wr[:, :, None, :] @ tV)[:, :, 0]
        te1 = elu_prime(h1, ops)[:, None, :] * (ta @ P["W1"])
        th2 = te1 @ P["W2"]
        tc = th2 - ops.mean(th2, 2, keepdims=True)
        nr = n[:, None, :]
        tn = inv[:, :, None] * (tc - nr * ops.mean(nr * tc, 2, keepdims=True))
        tf = P["ln_g"] * tn
        tgF = elu_prime(gF, ops)[:, None, :] * (tf @ P["W1F"][k].T)
        tgJ = elu_prime(gJ, ops)[:, None, :] * (tf @ P["W1J"][k].T)
        tbaseF = txF if teacher is not None else tF
        tF = tbaseF + tgF @ P["W2F"][k].T
        tJ = tJ + tgJ @ P["W2J"][k].T
        dF.append(tF)
        dJ.append(tJ)

    out = {"bF": ops.stack(bF, 1), "bJ": ops.stack(bJ, 1)}
    if tangents:
        # (B, K, R, r_F) -> (B, K, r_F, R)
        out["dF"] = _swap_last(ops.stack(dF, 1))
        out["dJ"] = _swap_last(ops.stack(dJ, 1))
    return out


def _swap_last(x):
    return np.swapaxes(x, -1, -2) if isinstance(x, np.ndarray) else x.transpose(-1, -2)


def _tr(x):
    """Swap the last two axes of a 3-d array or tensor."""
    return np.swapaxes(x, 1, 2) if isinstance(x, np.ndarray) else x.transpose(1, 2)


# -- ResNet blocks shared by the baselines ------------------------------------
def resnet_apply(P, x, tx=None, ops=NUMPY):
    """Lift -> three residual ELU blocks -> linear readout; tangents ``tx`` are (B, R, n_in)."""
    pre = x @ P["W_in"].T + P["b_in"]
    h = elu(pre, ops)
    th = elu_prime(pre, ops)[:, None, :] * (tx @ P["W_in"].T) if tx is not None else None
    for j in range(P["W_blk"].shape[0]):
        pre = h @ P["W_blk"][j].T + P["b_blk"][j]
        if th is not None:
            th = th + elu_prime(pre, ops)[:, None, :] * (th @ P["W_blk"][j].T)
        h = h + elu(pre, ops)
    y = h @ P["W_out"].T + P["b_out"]
    ty = th @ P["W_out"].T if th is not None else None
    return y, ty


def ode_rollout(P, beta_m, beta_f0, K, ops=NUMPY, tangents=True):
    """beta_{k+1} = beta_k + N([beta_k; beta_m]) with chain-rule Jacobians."""
    B, R = beta_m.shape
    r_f = P["W_out"].shape[0]
    if beta_f0.ndim == 1:
        beta_f0 = ops.expand(beta_f0[None, :], (B, r_f))
    bF = [beta_f0]
    dF = []
    t = ops.zeros((B, R, r_f), beta_m) if tangents else None
    eye = ops.expand(ops.eye(R, beta_m)[None], (B, R, R)) if tangents else None
    for k in range(K):
        x = ops.cat([bF[k], beta_m], 1)
        tx = ops.cat([t, eye], 2) if tangents else None
        y, ty = resnet_apply(P, x, tx, ops)
        bF.append(bF[k] + y)
        if tangents:
            t = t + ty
            dF.append(t)
    out = {"bF": ops.stack(bF, 1)}
    if tangents:
        out["dF"] = _swap_last(ops.stack(dF, 1))
    return out


def perstep_apply(P_list, beta_m, beta_f0, ops=NUMPY, tangents=True):
    """Independent per-step networks beta_k = N_k(beta_m)."""
    B, R = beta_m.shape
    bF, dF = [], []
    tx = ops.expand(ops.eye(R, beta_m)[None], (B, R, R)) if tangents else None
    r_f = P_list[0]["W_out"].shape[0]
    f0 = ops.expand(beta_f0[None, :], (B, r_f)) if beta_f0.ndim == 1 else beta_f0
    for P in P_list:
        y, ty = resnet_apply(P, beta_m, tx, ops)
        bF.append(y)
        if tangents:
            dF.append(ty)
    out = {"bF": ops.stack([f0] + bF, 1)}
    if tangents:
        out["dF"] = _swap_last(ops.stack(dF, 1))
    return out
