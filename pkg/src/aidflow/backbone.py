"""Toy multimodal diffusion transformer predicting rectified-flow velocity.

Each block runs joint self-attention over ``[image tokens; text tokens]``::

    u        = [z ; c~] + temb(t)
    Q, K, V  = LN(u) W_qkv
    z'       = u_img + Softmax(Q K^T / sqrt(d_head)) V  |img rows
    z''      = z' + FFN(LN(z'))
    c_next   = c~

Only image tokens take the attention residual.  Text features travel from
block to block unchanged apart from the (optional) Aid modulation applied at
each block input, so ``c~`` of block ``l`` is exactly what block ``l+1``
receives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .tensor import Tensor, concat, layernorm, matmul, silu, softmax

FFN_MULT = 4


def timestep_features(t, dim: int) -> np.ndarray:
    """Sinusoidal features of ``t`` in ``[0, 1]``; shape ``(B, dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


@dataclass
class BlockState:
    z: Tensor  # (B, M, d) image tokens
    c: Tensor  # (B, N, d) text tokens
    t: np.ndarray  # (B,)
    block_index: int


@dataclass
class AttentionNormSample:
    block_index: int
    t: float
    text_norm: float
    image_norm: float
    step: int = -1
    sample: int = 0


@dataclass
class AttentionProbe:
    """Records Frobenius norms of attention outputs split by modality.

    Observation only: it reads arrays and never feeds anything back.
    """

    keep_raw: bool = False
    step: int = -1
    sample_offset: int = 0
    rows: int | None = None  # observe only the first ``rows`` batch rows
    samples: list[AttentionNormSample] = field(default_factory=list)
    raw: list[tuple[int, int, int, np.ndarray, int]] = field(default_factory=list)

    def observe(self, block_index: int, t: np.ndarray, attn_out: np.ndarray, image_len: int) -> None:
        n = attn_out.shape[0] if self.rows is None else min(self.rows, attn_out.shape[0])
        for b in range(n):
            img = attn_out[b, :image_len]
            txt = attn_out[b, image_len:]
            self.samples.append(
                AttentionNormSample(
                    block_index=block_index,
                    t=float(t[b]),
                    text_norm=float(np.sqrt(np.sum(np.square(txt, dtype=np.float64)))),
                    image_norm=float(np.sqrt(np.sum(np.square(img, dtype=np.float64)))),
                    step=self.step,
                    sample=self.sample_offset + b,
                )
            )
            if self.keep_raw:
                self.raw.append((block_index, self.step, self.sample_offset + b, attn_out[b].copy(), image_len))


def _init_params(cfg: ModelConfig, dtype) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    d, L, h = cfg.feature_dim, cfg.num_blocks, FFN_MULT * cfg.feature_dim

    def lin(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

    p: dict[str, np.ndarray] = {
        "tok_embed": rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)),
        "text_pos": rng.normal(0.0, 0.1, size=(max(cfg.text_len, 1), d)),
        "img_pos": rng.normal(0.0, 0.1, size=(cfg.image_len, d)),
        "in_w": lin(d, d),
        "in_b": np.zeros(d),
        "t_w1": lin(d, d),
        "t_b1": np.zeros(d),
        "t_w2": lin(d, d),
        "t_b2": np.zeros(d),
    }
    for l in range(L):
        p[f"blocks.{l}.ln1_g"] = np.ones(d)
        p[f"blocks.{l}.ln1_b"] = np.zeros(d)
        p[f"blocks.{l}.qkv_w"] = lin(d, 3 * d)
        p[f"blocks.{l}.qkv_b"] = np.zeros(3 * d)
        p[f"blocks.{l}.ln2_g"] = np.ones(d)
        p[f"blocks.{l}.ln2_b"] = np.zeros(d)
        p[f"blocks.{l}.ff_w1"] = lin(d, h)
        p[f"blocks.{l}.ff_b1"] = np.zeros(h)
        p[f"blocks.{l}.ff_w2"] = lin(h, d) * 0.5
        p[f"blocks.{l}.ff_b2"] = np.zeros(d)
    p["out_ln_g"] = np.ones(d)
    p["out_ln_b"] = np.zeros(d)
    p["out_w"] = lin(d, d) * 0.1
    p["out_b"] = np.zeros(d)
    return {k: np.ascontiguousarray(v, dtype=dtype) for k, v in p.items()}


LORA_TARGETS = ("qkv_w", "ff_w1", "ff_w2")


class LoRA:
    """Low-rank additive deltas ``W + A @ B`` on every block's linear weights."""

    def __init__(self, model: "MMDiT", rank: int, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.rank = rank
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        self.params = {}
        for l in range(model.cfg.num_blocks):
            for name in LORA_TARGETS:
                fan_in, fan_out = model.params[f"blocks.{l}.{name}"].shape
                a = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, rank))
                self.params[f"lora.{l}.{name}.A"] = Tensor(np.ascontiguousarray(a, dtype=model.dtype), requires_grad=True)
                self.params[f"lora.{l}.{name}.B"] = Tensor(np.zeros((rank, fan_out), dtype=model.dtype), requires_grad=True)

    def delta(self, l: int, name: str) -> Tensor:
        return matmul(self.params[f"lora.{l}.{name}.A"], self.params[f"lora.{l}.{name}.B"])


class MMDiT:
    def __init__(self, cfg: ModelConfig, dtype=T.F32, params: dict[str, np.ndarray] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        raw = _init_params(cfg, self.dtype) if params is None else params
        expected = set(_init_params(cfg, self.dtype)) if params is not None else set(raw)
        if params is not None and set(params) != expected:
            missing = sorted(expected - set(params))
            extra = sorted(set(params) - expected)
            raise ConfigError(f"backbone parameter names mismatch; missing={missing} extra={extra}")
        self.params: dict[str, Tensor] = {
            k: Tensor(np.ascontiguousarray(v, dtype=self.dtype), requires_grad=True, name=k) for k, v in raw.items()
        }

    # -- parameter management -------------------------------------------
    def freeze(self) -> "MMDiT":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "MMDiT":
        for p in self.params.values():
            p.requires_grad = True
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def _w(self, l: int, name: str, lora: LoRA | None) -> Tensor:
        w = self.params[f"blocks.{l}.{name}"]
        if lora is not None and name in LORA_TARGETS:
            return w + lora.delta(l, name)
        return w

    # -- embeddings -------------------------------------------------------
    def embed_text(self, tokens) -> Tensor:
        """Token ids ``(B, N)`` -> text features ``(B, N, d)``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        n = tokens.shape[1]
        if n != self.cfg.text_len:
            raise DimensionError(f"prompt length {n} != model text_len {self.cfg.text_len}")
        c = T.embedding(self.params["tok_embed"], tokens)
        if n:
            c = c + self.params["text_pos"][:n]
        return c

    def timestep_embedding(self, t: np.ndarray) -> Tensor:
        feats = Tensor(timestep_features(t, self.cfg.feature_dim).astype(self.dtype))
        h = silu(matmul(feats, self.params["t_w1"]) + self.params["t_b1"])
        return matmul(h, self.params["t_w2"]) + self.params["t_b2"]

    # -- blocks -----------------------------------------------------------
    def block_forward(
        self,
        state: BlockState,
        temb: Tensor | None = None,
        probe: AttentionProbe | None = None,
        lora: LoRA | None = None,
    ) -> BlockState:
        cfg = self.cfg
        l = state.block_index
        if not 0 <= l < cfg.num_blocks:
            raise ContractError(f"block index {l} outside [0, {cfg.num_blocks})")
        z, c = state.z, state.c
        B, M, d = z.shape
        if d != cfg.feature_dim or c.shape[-1] != d or c.shape[0] != B:
            raise DimensionError(f"block {l}: image tokens {z.shape} and text tokens {c.shape} do not match d={cfg.feature_dim}")
        pre = f"blocks.{l}."
        u = concat([z, c], axis=1) if c.shape[1] else z
        if temb is not None:
            u = u + temb
        Ttok = u.shape[1]
        H = cfg.num_heads
        dh = d // H

        x = layernorm(u, self.params[pre + "ln1_g"], self.params[pre + "ln1_b"])
        qkv = matmul(x, self._w(l, "qkv_w", lora)) + self.params[pre + "qkv_b"]
        qkv = qkv.reshape(B, Ttok, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(dh))
        if not np.all(np.isfinite(logits.data)):
            raise NumericError(f"non-finite attention logits in block {l}")
        attn = softmax(logits, axis=-1)
        out = matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, Ttok, d)
        if probe is not None:
            probe.observe(l, state.t, out.data, M)

        z_new = u[:, :M] + out[:, :M]
        hdn = layernorm(z_new, self.params[pre + "ln2_g"], self.params[pre + "ln2_b"])
        hdn = silu(matmul(hdn, self._w(l, "ff_w1", lora)) + self.params[pre + "ff_b1"])
        z_new = z_new + (matmul(hdn, self._w(l, "ff_w2", lora)) + self.params[pre + "ff_b2"])
        return BlockState(z_new, c, state.t, l + 1)

    # -- full model -------------------------------------------------------
    def forward(
        self,
        z,
        t,
        c: Tensor,
        aid=None,
        skip: Sequence[bool] | None = None,
        lora: LoRA | None = None,
        alphas: list | None = None,
        probe: AttentionProbe | None = None,
    ) -> Tensor:
        """Velocity ``v(z_t, t, c)`` for image tokens.

        ``aid`` modulates the text features at the input of every block whose
        ``skip`` entry is false; each applied coefficient tensor is appended to
        ``alphas`` as ``(block, alpha)`` when a list is given.
        """
        cfg = self.cfg
        z = T.as_tensor(z, dtype=self.dtype)
        single = z.ndim == 2
        if single:
            z = z.reshape(1, *z.shape)
        if c.ndim == 2:
            c = c.reshape(1, *c.shape)
        B = z.shape[0]
        if z.shape[1:] != (cfg.image_len, cfg.feature_dim):
            raise DimensionError(f"latent shape {z.shape[1:]} != ({cfg.image_len}, {cfg.feature_dim})")
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)).copy()
        if np.any(t_arr < 0) or np.any(t_arr > 1) or not np.all(np.isfinite(t_arr)):
            raise ContractError(f"timestep outside [0, 1]: {t_arr}")
        if aid is not None and len(aid) != cfg.num_blocks:
            raise ConfigError(f"aid stack has {len(aid)} modules but the backbone has {cfg.num_blocks} blocks")
        if skip is not None and len(skip) != cfg.num_blocks:
            raise ConfigError(f"skip mask length {len(skip)} != num_blocks {cfg.num_blocks}")

        temb = self.timestep_embedding(t_arr).reshape(B, 1, cfg.feature_dim)
        tfeat = timestep_features(t_arr, cfg.feature_dim).astype(self.dtype)
        x = matmul(z, self.params["in_w"]) + self.params["in_b"] + self.params["img_pos"]
        state = BlockState(x, c, t_arr, 0)
        for l in range(cfg.num_blocks):
            if aid is not None and not (skip is not None and skip[l]):
                alpha = aid.alpha(state.c, tfeat, l)
                if alphas is not None:
                    alphas.append((l, alpha))
                state = BlockState(state.z, state.c + state.c * alpha, t_arr, l)
            state = self.block_forward(state, temb, probe, lora)
        y = layernorm(state.z, self.params["out_ln_g"], self.params["out_ln_b"])
        v = matmul(y, self.params["out_w"]) + self.params["out_b"]
        if single:
            v = v.reshape(cfg.image_len, cfg.feature_dim)
        return v

    def velocity(self, z, t, tokens, **kw) -> Tensor:
        return self.forward(z, t, self.embed_text(tokens), **kw)
