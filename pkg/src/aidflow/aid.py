"""Per-block gated text modulation.

For block ``l`` and text token ``i`` the coefficient is::

    alpha_i = tanh(f_l(c_i, t)) * sigmoid(g_l(c_i, t))

where ``f_l`` (feature branch) and ``g_l`` (gate branch) are independent
two-layer MLPs ``d -> h -> 1`` whose hidden pre-activation also receives a
learned projection of the sinusoidal timestep features.  The text features
are then rescaled per token, ``c~ = c + c * alpha``.

The feature branch's output layer starts at zero, so a fresh stack is an
exact no-op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone import timestep_features
from .config import ModelConfig
from .errors import ConfigError, DimensionError
from .tensor import Tensor, clip, matmul, sigmoid, silu, tanh

BRANCHES = ("feat", "gate")
# largest |pre-activation| whose tanh still rounds below 1 in each precision
TANH_LIMIT = {np.dtype(np.float32): 8.0, np.dtype(np.float64): 18.0}
_PARTS = ("w1", "b1", "tw", "w2", "b2")


@dataclass
class AlphaVector:
    values: np.ndarray  # (N,)
    block_index: int
    t: float


def gated_alpha(feature_pre, gate_pre):
    """``tanh(feature_pre) * sigmoid(gate_pre)`` on plain numbers or arrays."""
    feature_pre = np.clip(np.asarray(feature_pre, dtype=np.float64), -TANH_LIMIT[np.dtype(np.float64)], TANH_LIMIT[np.dtype(np.float64)])
    gate_pre = np.asarray(gate_pre, dtype=np.float64)
    return np.tanh(feature_pre) * 0.5 * (1.0 + np.tanh(0.5 * gate_pre))


class AidStack:
    """One learned Aid module per backbone block."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        raw = self.init_params(cfg, seed) if params is None else params
        expected = set(self.param_names(cfg))
        if set(raw) != expected:
            raise ConfigError(
                f"aid parameter names mismatch; missing={sorted(expected - set(raw))} extra={sorted(set(raw) - expected)}"
            )
        self.params = {
            k: Tensor(np.ascontiguousarray(v, dtype=self.dtype), requires_grad=True, name=k) for k, v in raw.items()
        }

    def __len__(self) -> int:
        return self.cfg.num_blocks

    @staticmethod
    def param_names(cfg: ModelConfig) -> list[str]:
        return [f"aid.{l}.{b}_{p}" for l in range(cfg.num_blocks) for b in BRANCHES for p in _PARTS]

    @staticmethod
    def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed + 7919)
        d, h = cfg.feature_dim, cfg.aid_hidden_dim
        out = {}
        for l in range(cfg.num_blocks):
            for b in BRANCHES:
                out[f"aid.{l}.{b}_w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, h))
                out[f"aid.{l}.{b}_b1"] = np.zeros(h)
                out[f"aid.{l}.{b}_tw"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, h))
                if b == "feat":
                    out[f"aid.{l}.{b}_w2"] = np.zeros((h, 1))
                else:
                    out[f"aid.{l}.{b}_w2"] = rng.normal(0.0, 0.01, size=(h, 1))
                out[f"aid.{l}.{b}_b2"] = np.zeros(1)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def _branch(self, c: Tensor, tfeat: Tensor, l: int, b: str) -> Tensor:
        p = self.params
        B = c.shape[0]
        h = self.cfg.aid_hidden_dim
        tproj = matmul(tfeat, p[f"aid.{l}.{b}_tw"]).reshape(B, 1, h)
        hidden = silu(matmul(c, p[f"aid.{l}.{b}_w1"]) + p[f"aid.{l}.{b}_b1"] + tproj)
        return matmul(hidden, p[f"aid.{l}.{b}_w2"]) + p[f"aid.{l}.{b}_b2"]

    def alpha(self, c: Tensor, tfeat: np.ndarray, l: int) -> Tensor:
        """Coefficients ``(B, N, 1)`` for text features ``c`` ``(B, N, d)`` at block ``l``."""
        if not 0 <= l < len(self):
            raise ConfigError(f"block index {l} outside [0, {len(self)})")
        tf = Tensor(np.asarray(tfeat, dtype=self.dtype))
        lim = TANH_LIMIT.get(self.dtype, 8.0)
        feat = clip(self._branch(c, tf, l, "feat"), -lim, lim)
        return tanh(feat) * sigmoid(self._branch(c, tf, l, "gate"))


class ConstantAid:
    """Fixed coefficients: ``value`` on every token of the selected blocks, 0 elsewhere."""

    def __init__(self, num_blocks: int, selected, value: float, dtype=np.float32):
        selected = sorted(set(int(i) for i in selected))
        bad = [i for i in selected if not 0 <= i < num_blocks]
        if bad:
            raise ConfigError(f"enhancement block indices {bad} outside [0, {num_blocks})")
        if not -1.0 < value < 1.0:
            raise ConfigError(f"enhancement value {value} outside (-1, 1)")
        self.num_blocks = num_blocks
        self.selected = frozenset(selected)
        self.value = float(value)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return self.num_blocks

    def alpha(self, c: Tensor, tfeat, l: int) -> Tensor:
        v = self.value if l in self.selected else 0.0
        return Tensor(np.full(c.shape[:-1] + (1,), v, dtype=self.dtype))


def sparse_enhancement_stack(selected, value: float, num_blocks: int, dtype=np.float32) -> ConstantAid:
    return ConstantAid(num_blocks, selected, value, dtype)


def compute_alpha(c, t: float, l: int, aid: AidStack) -> AlphaVector:
    """Single-prompt convenience wrapper around :meth:`AidStack.alpha`."""
    c = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=aid.dtype))
    if c.ndim == 2:
        c = c.reshape(1, *c.shape)
    if c.shape[-1] != aid.cfg.feature_dim:
        raise DimensionError(f"text features have {c.shape[-1]} features, aid expects {aid.cfg.feature_dim}")
    tfeat = timestep_features(t, aid.cfg.feature_dim)
    a = aid.alpha(c, tfeat, l)
    return AlphaVector(a.data[0, :, 0].copy(), l, float(t))


def apply_modulation(c: Tensor, alpha) -> Tensor:
    """``c + c * alpha`` with one coefficient per token, broadcast over features."""
    a = alpha.values if isinstance(alpha, AlphaVector) else alpha
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=c.dtype))
    n = c.shape[-2]
    if a.shape[-1] != 1:
        if a.shape[-1] != n:
            raise DimensionError(f"alpha has {a.shape[-1]} entries for {n} text tokens")
        a = a.reshape(*a.shape, 1)
    elif a.ndim >= 2 and a.shape[-2] != n:
        raise DimensionError(f"alpha has {a.shape[-2]} entries for {n} text tokens")
    return c + c * a


def skip_mask(num_blocks: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(p) per block; True means the block's Aid is muted."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"skip probability {p} outside [0, 1]")
    return rng.random(num_blocks) < p
