"""Flow-matching, preference and sparsity losses and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, concat, l2_norm_rows, log_sigmoid, mse, square, sum_


@dataclass
class FlowSample:
    """Clean data ``x``, noise ``eps`` and time ``t`` (one per batch row)."""

    x: np.ndarray  # (B, M, d)
    eps: np.ndarray  # (B, M, d)
    t: np.ndarray  # (B,)
    tokens: np.ndarray | None = None  # (B, N)

    @property
    def z_t(self) -> np.ndarray:
        return interpolate(self.x, self.eps, self.t)

    @property
    def target(self) -> np.ndarray:
        return self.eps - self.x


def interpolate(x: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    """Linear path ``(1 - t) x + t eps``."""
    t = np.asarray(t, dtype=x.dtype)
    if t.ndim == 1:
        t = t.reshape(-1, *([1] * (x.ndim - 1)))
    return (1 - t) * x + t * eps


def sample_timesteps(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.random(n)


def diffusion_loss(v_pred: Tensor, sample: FlowSample | np.ndarray) -> Tensor:
    """Mean over every entry of ``(v_pred - (eps - x))**2``."""
    target = sample.target if isinstance(sample, FlowSample) else sample
    target = np.asarray(target, dtype=v_pred.dtype)
    if v_pred.shape != target.shape:
        raise DimensionError(f"velocity shape {v_pred.shape} != target shape {target.shape}")
    return mse(v_pred, Tensor(target))


def score_from_velocity(v_pred: Tensor, target: np.ndarray) -> Tensor:
    """Per-sample ``-||v_pred - target||^2`` summed over tokens and features; shape ``(B,)``."""
    target = np.asarray(target, dtype=v_pred.dtype)
    if v_pred.shape != target.shape:
        raise DimensionError(f"velocity shape {v_pred.shape} != target shape {target.shape}")
    err = square(v_pred - Tensor(target))
    axes = tuple(range(1, err.ndim)) if err.ndim > 2 else None
    return sum_(err, axes) * -1.0


def score(model, sample: FlowSample, aid=None, **forward_kw) -> Tensor:
    v = model.velocity(sample.z_t, sample.t, sample.tokens, aid=aid, **forward_kw)
    return score_from_velocity(v, sample.target)


def dpo_loss(s_win, s_lose, ref_win, ref_lose, beta: float) -> Tensor:
    """Batch mean of ``-log sigmoid(beta * ((s_win - s_lose) - (ref_win - ref_lose)))``.

    The reference scores are treated as constants.
    """
    if beta <= 0:
        raise ContractError(f"beta must be positive, got {beta}")
    s_win, s_lose = as_tensor(s_win, np.float64), as_tensor(s_lose, np.float64)
    ref_gap = np.asarray(_data(ref_win), dtype=s_win.dtype) - np.asarray(_data(ref_lose), dtype=s_win.dtype)
    margin = (s_win - s_lose - Tensor(ref_gap)) * beta
    return log_sigmoid(margin).mean() * -1.0


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _alpha_rows(a) -> Tensor:
    if hasattr(a, "values") and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a.values, dtype=np.float64))
    if isinstance(a, tuple):
        a = a[1]
    a = as_tensor(a)
    if a.ndim == 1:
        return a.reshape(1, a.shape[0])
    if a.ndim == 3:
        return a.reshape(a.shape[0], a.shape[1])
    return a


def reg_loss(alphas) -> Tensor:
    """Mean Euclidean norm of the coefficient vectors.

    Accepts :class:`~aidflow.aid.AlphaVector` objects, arrays, tensors of
    shape ``(B, N, 1)`` or ``(block, tensor)`` pairs; each batch row of each
    entry counts as one vector.
    """
    alphas = list(alphas)
    if not alphas:
        raise ContractError("reg_loss needs at least one alpha vector")
    norms = [l2_norm_rows(_alpha_rows(a)) for a in alphas]
    return (concat(norms, axis=0) if len(norms) > 1 else norms[0]).mean()


@dataclass
class LossBreakdown:
    diff: float
    dpo: float
    reg: float
    total: float
    lambda_dpo: float
    lambda_reg: float
    beta: float = 0.1


def combine(diff, dpo, reg, lambda_dpo: float, lambda_reg: float):
    """``diff + lambda_dpo * dpo + lambda_reg * reg`` on floats or tensors."""
    return diff + lambda_dpo * dpo + lambda_reg * reg


def total_loss(diff: float, dpo: float, reg: float, lambda_dpo: float, lambda_reg: float, beta: float = 0.1) -> LossBreakdown:
    diff, dpo, reg = float(diff), float(dpo), float(reg)
    return LossBreakdown(diff, dpo, reg, combine(diff, dpo, reg, lambda_dpo, lambda_reg), lambda_dpo, lambda_reg, beta)
