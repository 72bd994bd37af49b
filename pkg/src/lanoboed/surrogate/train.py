"""Derivative-informed training in torch (float64).

The loss is the mean over samples of
    sum_k ||beta_F,k - N^F_k||^2 + w_J ||beta_J,k - grad N^J_k||^2,
with the Jacobian term computed by the same forward-mode tangent recursion
used at inference time, so autograd differentiates the exact deployed map.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .core import TorchOps, lano_rollout, ode_rollout, perstep_apply, resnet_apply
from .params import SurrogateParams

log = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    def __init__(self, epoch):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 1000
    lr: float = 1e-3
    weight_decay: float = 0.0
    w_j: float = 1.0
    batch_size: int = 32
    seed: int = 0
    teacher_forcing: bool = False
    threads: int = 1
    target_loss: float | None = None  # stop once an epoch's mean loss drops below this


def _to_torch(arrays, torch, requires_grad=True):
    return {n: torch.tensor(a, dtype=torch.float64, requires_grad=requires_grad) for n, a in arrays.items()}


def batch_loss(params: SurrogateParams, T, bm, bf, bj, cfg: TrainConfig, ops):
    """Loss terms (F part, J part) for one minibatch of torch tensors."""
    f0 = bf[:, 0]
    if params.kind == "lano":
        teacher = bf if cfg.teacher_forcing else None
        out = lano_rollout(T, bm, f0, ops, tangents=cfg.w_j > 0, teacher=teacher, check=False)
        lf = ((out["bF"][:, 1:] - bf[:, 1:]) ** 2).sum(dim=(1, 2)).mean()
        lj = ((out["dJ"] - bj) ** 2).sum(dim=(1, 2, 3)).mean() if cfg.w_j > 0 else lf * 0
        return lf, lj
    if params.kind == "neural-ode":
        # one-step regression on consecutive true states; no Jacobian information
        B, K1, r_f = bf.shape
        x = ops.cat([bf[:, :-1].reshape(-1, r_f), bm.repeat_interleave(K1 - 1, dim=0)], 1)
        y, _ = resnet_apply(T, x, None, ops)
        target = (bf[:, 1:] - bf[:, :-1]).reshape(-1, r_f)
        lf = ((y - target) ** 2).sum(dim=1).mean() * (K1 - 1)
        return lf, lf * 0
    out = perstep_apply(params.per_step_list(T), bm, f0, ops, tangents=cfg.w_j > 0)
    lf = ((out["bF"][:, 1:] - bf[:, 1:]) ** 2).sum(dim=(1, 2)).mean()
    lj = ((out["dF"] - bj) ** 2).sum(dim=(1, 2, 3)).mean() if cfg.w_j > 0 else lf * 0
    return lf, lj


def train(params: SurrogateParams, data, cfg: TrainConfig | None = None, val_data=None, callback=None):
    """Train in place on a copy; returns (trained params, per-epoch loss records)."""
    import torch

    cfg = cfg or TrainConfig()
    if len(data) < 1:
        raise ValueError("training set is empty")
    torch.manual_seed(cfg.seed)
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(max(1, cfg.threads))
    ops = TorchOps()
    params = params.copy()
    T = _to_torch(params.arrays, torch)
    opt = torch.optim.AdamW(list(T.values()), lr=cfg.lr, weight_decay=cfg.weight_decay)
    bm = torch.tensor(data.beta_m, dtype=torch.float64)
    bf = torch.tensor(data.beta_f, dtype=torch.float64)
    bj = torch.tensor(data.beta_j, dtype=torch.float64)
    n = bm.shape[0]
    gen = torch.Generator().manual_seed(cfg.seed)
    bs = min(cfg.batch_size, n)
    history = []
    t0 = time.perf_counter()
    try:
        for epoch in range(1, cfg.epochs + 1):
            perm = torch.randperm(n, generator=gen)
            tot_f = tot_j = 0.0
            for start in range(0, n, bs):
                idx = perm[start : start + bs]
                lf, lj = batch_loss(params, T, bm[idx], bf[idx], bj[idx], cfg, ops)
                loss = lf + cfg.w_j * lj
                if not torch.isfinite(loss):
                    raise TrainingDivergence(epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                tot_f += lf.item() * len(idx)
                tot_j += lj.item() * len(idx)
            rec = {"epoch": epoch, "loss": (tot_f + cfg.w_j * tot_j) / n, "loss_f": tot_f / n, "loss_j": tot_j / n}
            if val_data is not None and (epoch == cfg.epochs or epoch % 50 == 0):
                rec.update(evaluate_loss(params, {k: v.detach() for k, v in T.items()}, val_data, cfg, prefix="val_"))
            history.append(rec)
            if callback is not None:
                callback(rec)
            if epoch == 1 or epoch % 100 == 0:
                log.info("%s epoch %d loss %.4e (F %.4e, J %.4e) %.1fs", params.kind, epoch, rec["loss"], rec["loss_f"], rec["loss_j"], time.perf_counter() - t0)
            if cfg.target_loss is not None and rec["loss"] < cfg.target_loss:
                break
    finally:
        torch.set_num_threads(prev_threads)
    params.arrays = {k: v.detach().numpy().copy() for k, v in T.items()}
    params.__post_init__()
    return params, history


def evaluate_loss(params, T, data, cfg, prefix=""):
    import torch

    ops = TorchOps()
    with torch.no_grad():
        lf, lj = batch_loss(
            params,
            T,
            torch.tensor(data.beta_m),
            torch.tensor(data.beta_f),
            torch.tensor(data.beta_j),
            cfg,
            ops,
        )
    return {f"{prefix}loss_f": float(lf), f"{prefix}loss_j": float(lj)}


def initial_loss(params, data, cfg=None):
    import torch

    cfg = cfg or TrainConfig()
    return evaluate_loss(params, _to_torch(params.arrays, torch, requires_grad=False), data, cfg)


def numpy_forward(params: SurrogateParams, beta_m, beta_f0, tangents=True):
    """Rollout of any surrogate kind on numpy inputs; the Jacobian key is 'dJ' for LANO, 'dF' otherwise."""
    from .kernel import lano_eval

    beta_m = np.atleast_2d(np.asarray(beta_m, dtype=float))
    if params.kind == "lano":
        return lano_eval(params.arrays, beta_m, beta_f0, tangents)
    if params.kind == "neural-ode":
        return ode_rollout(params.arrays, beta_m, np.asarray(beta_f0, dtype=float), params.K, tangents=tangents)
    return perstep_apply(params.per_step_list(), beta_m, np.asarray(beta_f0, dtype=float), tangents=tangents)
