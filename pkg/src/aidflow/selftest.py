"""Fast invariant suite behind ``aidflow selftest`` and the default gradient check."""

from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path

import numpy as np

from .aid import AidStack, gated_alpha
from .backbone import MMDiT
from .config import DataConfig, ModelConfig, RunConfig, SamplerConfig, TrainConfig, dumps, loads
from .gradcheck import GradcheckReport, gradcheck
from .objectives import diffusion_loss, dpo_loss, reg_loss, score_from_velocity
from .persistence import Checkpoint, checkpoint_bytes, load_checkpoint, save_checkpoint
from .sampler import euler_integrate, sample
from .tensor import F32, F64, Tensor

GRADCHECK_MODEL = ModelConfig(
    num_blocks=2, feature_dim=16, num_heads=2, text_len=3, image_len=4, vocab_size=16, aid_hidden_dim=8, seed=0
)


def gradcheck_problem(cfg: ModelConfig, dtype=F64, seed: int = 0):
    """A backbone, an Aid stack with an active feature branch and a scalar loss touching both."""
    rng = np.random.default_rng(seed)
    model = MMDiT(cfg, dtype=dtype)
    raw = AidStack.init_params(cfg, seed)
    for l in range(cfg.num_blocks):
        raw[f"aid.{l}.feat_w2"] = rng.normal(0.0, 0.5, size=raw[f"aid.{l}.feat_w2"].shape)
        raw[f"aid.{l}.feat_b2"] = rng.normal(0.0, 0.1, size=1)
    aid = AidStack(cfg, dtype=dtype, params=raw)
    B = 2
    z = rng.standard_normal((2 * B, cfg.image_len, cfg.feature_dim)).astype(dtype)
    target = rng.standard_normal(z.shape).astype(dtype)
    t = np.concatenate([rng.uniform(0.1, 0.9, B)] * 2)
    tokens = rng.integers(2, cfg.vocab_size, size=(2 * B, cfg.text_len))
    ref = rng.standard_normal(2 * B)

    def loss_fn() -> Tensor:
        alphas: list = []
        v = model.velocity(z, t, tokens, aid=aid, alphas=alphas)
        s = score_from_velocity(v, target)
        dpo = dpo_loss(s[:B], s[B:], ref[:B], ref[B:], beta=0.1)
        return diffusion_loss(v, target) + dpo * 1.0 + reg_loss(alphas) * 0.1

    params = {**model.params, **aid.params}
    return loss_fn, params


def default_gradcheck(precision: str = "high", cfg: ModelConfig = GRADCHECK_MODEL) -> GradcheckReport:
    """High precision: float64 with tolerance 1e-6.  Low: float32, eps 1e-2, tolerance 5e-2."""
    if precision == "high":
        loss_fn, params = gradcheck_problem(cfg, F64)
        return gradcheck(loss_fn, params, tolerance=1e-6, eps=1e-5)
    loss_fn, params = gradcheck_problem(cfg, F32)
    return gradcheck(loss_fn, params, tolerance=5e-2, eps=1e-2, floor=1e-2)


def _check(results, name, fn):
    start = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # report, don't crash the suite
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    results.append((name, bool(ok), f"{detail} ({time.perf_counter() - start:.1f}s)"))


def run_selftest() -> list[tuple[str, bool, str]]:
    results: list = []
    tiny = ModelConfig(num_blocks=1, feature_dim=8, num_heads=2, text_len=2, image_len=2, vocab_size=12, aid_hidden_dim=4)
    small = ModelConfig(num_blocks=2, feature_dim=16, num_heads=2, text_len=8, image_len=16, vocab_size=16, aid_hidden_dim=8)

    def grad():
        r = default_gradcheck("high", tiny)
        return r.passed, f"max rel err {r.max_rel_error:.2e}"

    def bounded():
        rng = np.random.default_rng(0)
        a = gated_alpha(rng.normal(0, 20, 10000), rng.normal(0, 20, 10000))
        aid = AidStack(small, seed=1)
        for p in aid.params.values():
            p.data[...] = rng.normal(0, 3, p.shape)
        c = Tensor(rng.normal(0, 5, (16, 8, 16)).astype(np.float32))
        tf = np.random.default_rng(1).uniform(-1, 1, (16, 16))
        b = aid.alpha(c, tf, 1).data
        ok = bool(np.all(np.abs(a) < 1) and np.all(np.abs(b) < 1))
        return ok, f"max |alpha| {max(np.abs(a).max(), np.abs(b).max()):.6f}"

    def zero_init():
        model = MMDiT(small)
        aid = AidStack(small, seed=3)
        tok = np.array([[2, 7, 0, 0, 0, 0, 0, 0], [3, 8, 0, 0, 0, 0, 0, 0]])
        null = np.ones(8, dtype=np.int64)
        for seed in (0, 1):
            sc = SamplerConfig(num_steps=4, seed=seed)
            a = sample(model, tok, sc, null_tokens=null).final
            b = sample(model, tok, sc, aid=aid, null_tokens=null).final
            if not np.array_equal(a, b):
                return False, f"seed {seed} differs"
        return True, "bitwise identical"

    def loss_oracles():
        d = float(dpo_loss(np.array([1.0]), np.array([1.0]), np.array([0.0]), np.array([0.0]), 0.1).data)
        x = Tensor(np.ones((1, 2, 2)))
        m = float(diffusion_loss(x, np.ones((1, 2, 2))).data)
        r = float(reg_loss([np.array([0.3, 0.4])]).data)
        ok = abs(d - math.log(2)) < 1e-9 and m == 0 and abs(r - 0.5) < 1e-9
        return ok, f"dpo={d:.12f} mse={m} reg={r:.12f}"

    def euler():
        rng = np.random.default_rng(0)
        x, eps = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        errs = [np.max(np.abs(euler_integrate(eps, lambda z, t, k: eps - x, T)[1][-1] - x)) for T in (1, 6, 28)]
        return max(errs) < 1e-12, f"max endpoint error {max(errs):.1e}"

    def schedule():
        model = MMDiT(small)
        aid = AidStack(small, seed=2)
        for p in aid.params.values():
            p.data[...] = np.random.default_rng(5).normal(0, 0.3, p.shape)
        tok = np.array([[2, 7, 0, 0, 0, 0, 0, 0]])
        null = np.ones(8, dtype=np.int64)
        trajs = {T: sample(model, tok, SamplerConfig(num_steps=T, capture_alpha=True), aid=aid, null_tokens=null) for T in (6, 12)}
        shared = 0
        for k6, t in enumerate(trajs[6].ts[:-1]):
            k12 = trajs[12].ts.index(t)
            for l in range(small.num_blocks):
                if not np.array_equal(trajs[6].alpha[(k6, l)], trajs[12].alpha[(k12, l)]):
                    return False, f"t={t} block {l} differs"
                shared += 1
        return True, f"{shared} (t, block) cells identical"

    def persistence():
        model = MMDiT(tiny)
        ck = Checkpoint("backbone", tiny, {k: v.data.copy() for k, v in model.params.items()}, {"step": 0})
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "b.ckpt"
            save_checkpoint(ck, p)
            back = load_checkpoint(p)
            same = checkpoint_bytes(back) == checkpoint_bytes(ck)
        cfg = RunConfig().validate()
        return same and loads(dumps(cfg)) == cfg, "checkpoint bytes and config parse stable"

    for name, fn in [
        ("gradcheck", grad),
        ("alpha bounded", bounded),
        ("zero-init identity", zero_init),
        ("loss oracles", loss_oracles),
        ("euler exactness", euler),
        ("schedule invariance", schedule),
        ("persistence round trip", persistence),
    ]:
        _check(results, name, fn)
    return results
