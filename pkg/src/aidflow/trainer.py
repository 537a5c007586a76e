"""Backbone pretraining and Aid (or LoRA) training with a frozen backbone."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .aid import AidStack, skip_mask
from .backbone import LoRA, MMDiT
from .config import DataConfig, ModelConfig, PretrainConfig, TrainConfig
from .errors import ContractError, InvariantViolation, NumericError
from .objectives import (
    LossBreakdown,
    combine,
    diffusion_loss,
    dpo_loss,
    interpolate,
    reg_loss,
    score_from_velocity,
    total_loss,
)
from .optim import AdamW
from .persistence import Checkpoint
from .tensor import Tensor, no_grad
from .toydata import (
    Example,
    PreferencePair,
    Vocabulary,
    generate_dataset,
    make_preference_pairs,
    stack_latents,
    stack_tokens,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "diff", "dpo", "reg", "total", "mean_abs_alpha", "preference_accuracy"]
PRETRAIN_COLUMNS = ["step", "loss"]

OPTIMIZER_NOTE = "optimizer: AdamW with a fixed learning rate, no step-size adaptation"
SAMPLER_NOTE = "sampler: first-order Euler on a uniform time grid"
TIMESTEP_NOTE = "timestep: sinusoidal embedding added to every token, no adaptive norm"


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class ToyData:
    """Encoded training/validation arrays for one data config."""

    cfg: DataConfig
    model_cfg: ModelConfig
    train: list[Example]
    val: list[Example]
    pairs: list[PreferencePair]
    val_pairs: list[PreferencePair]

    @classmethod
    def build(cls, data_cfg: DataConfig, model_cfg: ModelConfig) -> "ToyData":
        train = generate_dataset(data_cfg.train_size, data_cfg.seed, data_cfg, model_cfg.text_len)
        val = generate_dataset(data_cfg.val_size, data_cfg.seed + 1, data_cfg, model_cfg.text_len)
        pairs = make_preference_pairs(train, data_cfg.seed + 2, data_cfg)
        val_pairs = make_preference_pairs(val, data_cfg.seed + 3, data_cfg)
        return cls(data_cfg, model_cfg, train, val, pairs, val_pairs)

    def arrays(self, dtype=np.float32):
        d = self.model_cfg.feature_dim
        return (
            stack_latents([e.grid for e in self.train], self.cfg, d, dtype),
            stack_tokens([e.prompt for e in self.train]),
        )

    def pair_arrays(self, pairs, dtype=np.float32):
        d = self.model_cfg.feature_dim
        return (
            stack_latents([p.winner for p in pairs], self.cfg, d, dtype),
            stack_latents([p.loser for p in pairs], self.cfg, d, dtype),
            stack_tokens([p.prompt for p in pairs]),
        )

    def null_tokens(self) -> np.ndarray:
        return np.asarray(Vocabulary(self.cfg, self.model_cfg.text_len).null_tokens(), dtype=np.int64)


def params_hash(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].data.tobytes())
    return h.hexdigest()


def validation_diffusion_loss(model: MMDiT, data: ToyData, seed: int = 12345, lora=None, aid=None) -> float:
    d = model.cfg.feature_dim
    x = stack_latents([e.grid for e in data.val], data.cfg, d, model.dtype)
    tokens = stack_tokens([e.prompt for e in data.val])
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(x.shape).astype(model.dtype)
    t = rng.random(x.shape[0])
    with no_grad():
        v = model.velocity(interpolate(x, eps, t), t, tokens, aid=aid, lora=lora)
        return float(diffusion_loss(v, eps - x).data)


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    model: MMDiT
    losses: list[float]
    init_val_loss: float
    final_val_loss: float


def pretrain_backbone(
    model_cfg: ModelConfig, data: ToyData, cfg: PretrainConfig, dtype=np.float32
) -> PretrainResult:
    """Fit the toy backbone with the flow-matching loss only (no Aid)."""
    cfg.validate()
    model = MMDiT(model_cfg, dtype=dtype)
    x_all, tok_all = data.arrays(dtype)
    null = data.null_tokens()
    opt = AdamW(model.params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    init_val = validation_diffusion_loss(model, data)
    losses: list[float] = []
    warmup = max(1, cfg.steps // 20)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(x_all), cfg.batch_size)
        x = x_all[idx]
        tokens = tok_all[idx].copy()
        drop = rng.random(cfg.batch_size) < cfg.cond_dropout
        tokens[drop] = null
        eps = rng.standard_normal(x.shape).astype(dtype)
        t = rng.random(cfg.batch_size)
        v = model.velocity(interpolate(x, eps, t), t, tokens)
        loss = diffusion_loss(v, eps - x)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"pretraining diverged at step {step} (loss={value})")
        loss.backward()
        # linear warmup then cosine decay to 10%
        frac = step / max(1, cfg.steps - 1)
        scale = min(1.0, (step + 1) / warmup) * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))
        opt.step(cfg.learning_rate * scale)
        opt.zero_grad()
        losses.append(value)
        if step % 500 == 0:
            log.info("pretrain step %d loss %.4f", step, value)
    final_val = validation_diffusion_loss(model, data)
    ckpt = Checkpoint(
        "backbone",
        model_cfg,
        {k: v.data.copy() for k, v in model.params.items()},
        {
            "pretrain_config": asdict(cfg),
            "data_config": asdict(data.cfg),
            "step": cfg.steps,
            "init_val_loss": init_val,
            "final_val_loss": final_val,
            "divergence_notes": [OPTIMIZER_NOTE, TIMESTEP_NOTE],
        },
    )
    return PretrainResult(ckpt, model, losses, init_val, final_val)


def load_backbone(ckpt: Checkpoint, dtype=np.float32) -> MMDiT:
    if ckpt.kind != "backbone":
        raise ContractError(f"expected a backbone checkpoint, got '{ckpt.kind}'")
    return MMDiT(ckpt.model_config, dtype=dtype, params=ckpt.params)


# ---------------------------------------------------------------------------
# Aid / LoRA training


@dataclass
class TrainState:
    step: int = 0
    rng_state: dict | None = None
    history: list[LossBreakdown] = field(default_factory=list)
    log_rows: list[list] = field(default_factory=list)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    adapter: AidStack | LoRA
    state: TrainState
    log_rows: list[list]


def draw_batch(rng: np.random.Generator, num_pairs: int, batch_size: int, latent_shape, dtype):
    """Pair indices plus the ``(eps, t)`` shared by winner and loser."""
    idx = rng.integers(0, num_pairs, batch_size)
    eps = rng.standard_normal((batch_size, *latent_shape)).astype(dtype)
    return idx, eps, rng.random(batch_size)


def _build_adapter(model: MMDiT, cfg: TrainConfig, params: dict[str, np.ndarray] | None):
    if cfg.uses_aid:
        return AidStack(model.cfg, dtype=model.dtype, seed=cfg.seed, params=params)
    if params is not None:
        lora_params = {k: Tensor(np.ascontiguousarray(v, dtype=model.dtype), requires_grad=True) for k, v in params.items()}
        return LoRA(model, cfg.lora_rank, params=lora_params)
    return LoRA(model, cfg.lora_rank, seed=cfg.seed)


def train_aid(
    model: MMDiT,
    data: ToyData,
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
    pairs: list[PreferencePair] | None = None,
) -> TrainResult:
    """Optimise Aid (modes sft/dpo) or LoRA deltas (lora_sft/lora_dpo); the backbone stays frozen.

    Each optimisation step draws one skip mask, a batch of preference pairs
    and shared ``(eps, t)`` for winner and loser; the flow loss uses the
    winners, the preference loss both, the sparsity term every applied alpha.
    """
    cfg.validate()
    pairs = data.pairs if pairs is None else pairs
    if cfg.uses_dpo and cfg.lambda_dpo > 0 and not pairs:
        raise ContractError("preference pairs are required when lambda_dpo > 0")
    if not pairs:
        raise ContractError("training needs at least one example")
    model.freeze()
    before = params_hash(model.params)

    adapter = _build_adapter(model, cfg, resume.params if resume is not None else None)
    opt = AdamW(
        adapter.params,
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    rng = np.random.default_rng(cfg.seed)
    state = TrainState()
    if resume is not None:
        state.step = int(resume.manifest["step"])
        state.log_rows = [list(r) for r in resume.manifest.get("log_rows", [])]
        rng.bit_generator.state = resume.manifest["rng_state"]
        opt.load_state(resume.manifest["optimizer_step"], resume.state)

    xw_all, xl_all, tok_all = data.pair_arrays(pairs, model.dtype)
    L = model.cfg.num_blocks
    B = cfg.batch_size
    use_aid = cfg.uses_aid
    use_dpo = cfg.uses_dpo
    lam_dpo = cfg.lambda_dpo if use_dpo else 0.0
    lam_reg = cfg.lambda_reg if use_aid else 0.0
    aid = adapter if use_aid else None
    lora = None if use_aid else adapter

    while state.step < cfg.steps:
        mask = skip_mask(L, cfg.skip_p, rng) if use_aid else None
        opt.zero_grad()
        parts = {"diff": 0.0, "dpo": 0.0, "reg": 0.0}
        abs_alpha: list[float] = []
        correct = 0
        for _ in range(cfg.grad_accum):
            idx, eps, t = draw_batch(rng, len(xw_all), B, xw_all.shape[1:], model.dtype)
            xw, xl, tokens = xw_all[idx], xl_all[idx], tok_all[idx]
            zw, zl = interpolate(xw, eps, t), interpolate(xl, eps, t)
            alphas: list = []
            if use_dpo:
                z = np.concatenate([zw, zl])
                tt = np.concatenate([t, t])
                toks = np.concatenate([tokens, tokens])
                target = np.concatenate([eps - xw, eps - xl])
                v = model.velocity(z, tt, toks, aid=aid, skip=mask, lora=lora, alphas=alphas)
                s = score_from_velocity(v, target)
                s_w, s_l = s[:B], s[B:]
                with no_grad():
                    ref = score_from_velocity(model.velocity(z, tt, toks), target).data
                dpo = dpo_loss(s_w, s_l, ref[:B], ref[B:], cfg.beta)
                diff = diffusion_loss(v[:B], eps - xw)
                correct += int(np.sum(s_w.data > s_l.data))
            else:
                v = model.velocity(zw, t, tokens, aid=aid, skip=mask, lora=lora, alphas=alphas)
                diff = diffusion_loss(v, eps - xw)
                dpo = None
                with no_grad():
                    vl = model.velocity(zl, t, tokens, aid=aid, skip=mask, lora=lora)
                s_w = -np.sum((v.data - (eps - xw)) ** 2, axis=(1, 2))
                s_l = -np.sum((vl.data - (eps - xl)) ** 2, axis=(1, 2))
                correct += int(np.sum(s_w > s_l))
            reg = reg_loss(alphas) if (alphas and lam_reg > 0) else None
            if alphas:
                abs_alpha.append(float(np.mean([np.mean(np.abs(a.data)) for _, a in alphas])))
            loss = diff
            if dpo is not None and lam_dpo > 0:
                loss = loss + dpo * lam_dpo
            if reg is not None:
                loss = loss + reg * lam_reg
            if not math.isfinite(float(loss.data)):
                raise NumericError(f"training diverged at step {state.step}")
            if loss.requires_grad:
                (loss * (1.0 / cfg.grad_accum)).backward()
            parts["diff"] += float(diff.data) / cfg.grad_accum
            parts["dpo"] += (float(dpo.data) if dpo is not None else 0.0) / cfg.grad_accum
            parts["reg"] += (float(reg.data) if reg is not None else (float(reg_loss(alphas).data) if alphas else 0.0)) / cfg.grad_accum
        opt.step()
        opt.zero_grad()
        bd = total_loss(parts["diff"], parts["dpo"], parts["reg"], lam_dpo, lam_reg, cfg.beta)
        row = [
            state.step,
            bd.diff,
            bd.dpo,
            bd.reg,
            bd.total,
            float(np.mean(abs_alpha)) if abs_alpha else 0.0,
            correct / (B * cfg.grad_accum),
        ]
        state.log_rows.append(row)
        state.history.append(bd)
        state.step += 1

    if params_hash(model.params) != before:
        raise InvariantViolation("backbone parameters changed during adapter training")

    state.rng_state = rng.bit_generator.state
    ckpt = Checkpoint(
        "aid" if use_aid else "lora",
        model.cfg,
        {k: v.data.copy() for k, v in adapter.params.items()},
        {
            "train_config": asdict(cfg),
            "step": state.step,
            "optimizer_step": opt.step_count,
            "rng_state": state.rng_state,
            "backbone_sha256": before,
            "log_rows": state.log_rows,
            "lora_rank": cfg.lora_rank,
            "divergence_notes": [OPTIMIZER_NOTE],
        },
        {k: v.copy() for k, v in opt.state_arrays().items()},
    )
    return TrainResult(ckpt, adapter, state, state.log_rows)


def load_adapter(model: MMDiT, ckpt: Checkpoint):
    if ckpt.kind == "aid":
        return AidStack(ckpt.model_config, dtype=model.dtype, params=ckpt.params)
    if ckpt.kind == "lora":
        params = {k: Tensor(np.ascontiguousarray(v, dtype=model.dtype)) for k, v in ckpt.params.items()}
        return LoRA(model, int(ckpt.manifest.get("lora_rank", 4)), params=params)
    raise ContractError(f"expected an aid or lora checkpoint, got '{ckpt.kind}'")


# ---------------------------------------------------------------------------
# evaluation helpers


def preference_accuracy(model: MMDiT, data: ToyData, pairs, seed: int = 999, aid=None, lora=None, batch: int = 256) -> float:
    """Fraction of pairs whose winner out-scores the loser under shared, seeded ``(eps, t)``."""
    xw_all, xl_all, tok_all = data.pair_arrays(pairs, model.dtype)
    rng = np.random.default_rng(seed)
    eps_all = rng.standard_normal(xw_all.shape).astype(model.dtype)
    t_all = rng.random(len(xw_all))
    wins = 0
    with no_grad():
        for s in range(0, len(xw_all), batch):
            sl = slice(s, s + batch)
            eps, t, toks = eps_all[sl], t_all[sl], tok_all[sl]
            sw = score_from_velocity(
                model.velocity(interpolate(xw_all[sl], eps, t), t, toks, aid=aid, lora=lora), eps - xw_all[sl]
            ).data
            sl_ = score_from_velocity(
                model.velocity(interpolate(xl_all[sl], eps, t), t, toks, aid=aid, lora=lora), eps - xl_all[sl]
            ).data
            wins += int(np.sum(sw > sl_))
    return wins / len(xw_all)


def final_epoch_mean_abs_alpha(log_rows, num_pairs: int, batch_size: int) -> float:
    per_epoch = max(1, math.ceil(num_pairs / batch_size))
    tail = [r[5] for r in log_rows[-per_epoch:]]
    return float(np.mean(tail)) if tail else 0.0


def check_bookkeeping(log_rows, lambda_dpo: float, lambda_reg: float) -> bool:
    return all(r[4] == combine(r[1], r[2], r[3], lambda_dpo, lambda_reg) for r in log_rows)
