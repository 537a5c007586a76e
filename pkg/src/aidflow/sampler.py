"""Euler integration of the learned velocity field with classifier-free guidance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .aid import AidStack, ConstantAid, sparse_enhancement_stack
from .backbone import AttentionNormSample, AttentionProbe, MMDiT
from .config import DataConfig, SamplerConfig
from .errors import ConfigError, NumericError
from .tensor import no_grad
from .toydata import ToyGrid, ToyPrompt, Vocabulary, adherence, quantize, stack_tokens
from .toydata import decode as decode_intensity


@dataclass(frozen=True)
class AlphaRecord:
    run_id: str
    block_index: int
    t: float
    token_index: int
    value: float
    step: int = -1
    sample: int = 0


@dataclass
class Trajectory:
    """States from ``t = 1`` down to ``t = 0``; ``states[k]`` has shape ``(B, M, d)``."""

    ts: list[float]
    states: list[np.ndarray]
    # alpha[step][block] -> (B, N) coefficients of the conditional rows
    alpha: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    attention: list[AttentionNormSample] = field(default_factory=list)
    raw_attention: list = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def alpha_records(self, run_id: str = "run") -> list[AlphaRecord]:
        out = []
        for (k, l), a in sorted(self.alpha.items()):
            t = self.ts[k]
            for b in range(a.shape[0]):
                for i in range(a.shape[1]):
                    out.append(AlphaRecord(run_id, l, t, i, float(a[b, i]), k, b))
        return out


def time_grid(num_steps: int) -> list[float]:
    """``[1, (T-1)/T, ..., 0]``; each entry is the correctly rounded ratio ``(T-k)/T``."""
    if num_steps < 1:
        raise ConfigError(f"sampler.num_steps = {num_steps} violates bound: >= 1")
    return [(num_steps - k) / num_steps for k in range(num_steps + 1)]


def cfg_velocity(v_cond, v_uncond, s: float):
    """``v_uncond + s (v_cond - v_uncond)``; scales 1 and 0 return a branch unchanged."""
    if s == 1:
        return v_cond
    if s == 0:
        return v_uncond
    return v_uncond + s * (v_cond - v_uncond)


def euler_integrate(z1: np.ndarray, velocity_fn: Callable[[np.ndarray, float, int], np.ndarray], num_steps: int):
    """Integrate ``dz/dt = v`` from ``t = 1`` to ``0``; returns ``(ts, states)``."""
    ts = time_grid(num_steps)
    z = np.array(z1, copy=True)
    states = [z.copy()]
    for k in range(num_steps):
        v = velocity_fn(z, ts[k], k)
        z = z + (ts[k + 1] - ts[k]) * v
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite latent after sampler step {k} (t={ts[k + 1]})")
        states.append(z.copy())
    return ts, states


def resolve_aid(mode: str, cfg: SamplerConfig | None, learned: AidStack | None, num_blocks: int):
    if mode == "off":
        return None
    if mode == "learned":
        if learned is None:
            raise ConfigError("sampler.aid_mode = 'learned' needs an Aid checkpoint")
        return learned
    if mode == "sparse_enhanced":
        if cfg is None or not cfg.enhance_blocks:
            raise ConfigError("sampler.aid_mode = 'sparse_enhanced' needs sampler.enhance_blocks")
        return sparse_enhancement_stack(cfg.enhance_blocks, cfg.enhance_value, num_blocks)
    raise ConfigError(f"unknown sampler.aid_mode {mode!r}")


def sample(
    model: MMDiT,
    tokens,
    config: SamplerConfig,
    aid: AidStack | ConstantAid | None = None,
    null_tokens=None,
    lora=None,
    keep_raw_attention: bool = False,
) -> Trajectory:
    """Draw latents for a batch of prompts.

    ``z_1`` comes from ``default_rng(config.seed)``.  Guidance runs the
    conditional and null prompts in one stacked forward; ``aid`` (if any)
    modulates both.  Captured alpha and attention data cover the
    conditional rows only.
    """
    config.validate()
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    B = tokens.shape[0]
    cfg = model.cfg
    s = config.cfg_scale
    guided = s != 1
    if guided:
        if null_tokens is None:
            raise ConfigError("guidance scale != 1 needs null-prompt tokens")
        null = np.broadcast_to(np.asarray(null_tokens, dtype=np.int64), tokens.shape)
        batch_tokens = np.concatenate([tokens, null])
    else:
        batch_tokens = tokens
    rng = np.random.default_rng(config.seed)
    z1 = rng.standard_normal((B, cfg.image_len, cfg.feature_dim)).astype(model.dtype)
    traj = Trajectory([], [])
    probe = AttentionProbe(keep_raw=keep_raw_attention, rows=B) if config.capture_attention_norm else None

    with no_grad():
        c = model.embed_text(batch_tokens)

        def velocity(z, t, k):
            alphas: list | None = [] if (config.capture_alpha and aid is not None) else None
            if probe is not None:
                probe.step = k
            zz = np.concatenate([z, z]) if guided else z
            v = model.forward(zz, np.full(len(zz), t), c, aid=aid, lora=lora, alphas=alphas, probe=probe).data
            if alphas is not None:
                for l, a in alphas:
                    traj.alpha[(k, l)] = np.array(a.data[:B, :, 0], dtype=np.float64)
            if not guided:
                return v
            return cfg_velocity(v[:B], v[B:], s)

        ts, states = euler_integrate(z1, velocity, config.num_steps)
    traj.ts, traj.states = ts, states
    if probe is not None:
        traj.attention = probe.samples
        traj.raw_attention = probe.raw
    return traj


def decode(z0: np.ndarray, cfg: DataConfig) -> ToyGrid | list[ToyGrid]:
    """Latent tokens to toy grids (linear codec, clamp, round to the nearest code)."""
    z0 = np.asarray(z0)
    if z0.ndim == 2:
        return quantize(decode_intensity(z0, cfg), cfg)
    return [quantize(x, cfg) for x in decode_intensity(z0, cfg)]


@dataclass
class AdherenceResult:
    accuracy: float
    standard_error: float
    n: int
    per_seed: list[float]
    color_accuracy: float
    count_accuracy: float


def evaluate_adherence(
    model: MMDiT,
    prompts: list[ToyPrompt],
    data_cfg: DataConfig,
    sampler_cfg: SamplerConfig,
    seeds=(0, 1, 2),
    aid=None,
    lora=None,
) -> AdherenceResult:
    """Sample every prompt once per seed; accuracy is the mean per-attribute adherence."""
    tokens = stack_tokens(prompts)
    null = Vocabulary(data_cfg, model.cfg.text_len).null_tokens()
    hits, colors, counts, per_seed = [], [], [], []
    for seed in seeds:
        cfg = SamplerConfig(**{**sampler_cfg.__dict__, "seed": int(seed), "capture_alpha": False, "capture_attention_norm": False})
        traj = sample(model, tokens, cfg, aid=aid, null_tokens=null, lora=lora)
        grids = decode(traj.final, data_cfg)
        reps = [adherence(p, g) for p, g in zip(prompts, grids)]
        seed_hits = [r.accuracy for r in reps]
        hits += seed_hits
        colors += [r.color_ok for r in reps]
        counts += [r.count_ok for r in reps]
        per_seed.append(float(np.mean(seed_hits)))
    n = len(hits)
    acc = float(np.mean(hits))
    se = float(np.std(hits, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return AdherenceResult(acc, se, n, per_seed, float(np.mean(colors)), float(np.mean(counts)))
