"""Command-line entry point.

    aidflow pretrain   --out runs/bb
    aidflow train-aid  --backbone runs/bb/backbone.ckpt --out runs/aid
    aidflow sample     --backbone runs/bb/backbone.ckpt --aid runs/aid/adapter.ckpt --aid-mode learned --capture-alpha
    aidflow analyze    --alpha-trace runs/s/alpha_trace.txt --attention-trace runs/s/attention_trace.txt
    aidflow gradcheck  --precision high
    aidflow selftest

Exit status: 0 on success, 1 on a contract error (bad config, missing or
corrupted file, invariant violation), 2 on a numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import CheckpointError, ContractError, NumericError
from .persistence import load_checkpoint, save_checkpoint, write_csv, write_dataset, write_run_manifest

log = logging.getLogger("aidflow")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="TOML config file")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aidflow", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="fit the toy backbone")
    _add_common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("train-aid", help="train Aid (or LoRA) on a frozen backbone")
    _add_common(p)
    p.add_argument("--backbone", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None, help="adapter checkpoint to continue from")
    p.add_argument("--mode", choices=config_mod.TRAIN_MODES)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-dpo", type=float)
    p.add_argument("--lambda-reg", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--skip-p", type=float)

    p = sub.add_parser("sample", help="generate toy grids")
    _add_common(p)
    p.add_argument("--backbone", type=Path, default=None, help="backbone checkpoint (default: seeded initialisation)")
    p.add_argument("--aid", type=Path, default=None, help="aid or lora checkpoint")
    p.add_argument("--aid-mode", choices=config_mod.AID_MODES)
    p.add_argument("--num-steps", type=int)
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--num-prompts", type=int)
    p.add_argument("--enhance-blocks", type=str, help="comma-separated block indices")
    p.add_argument("--enhance-value", type=float)
    p.add_argument("--capture-alpha", action="store_true")
    p.add_argument("--capture-attention", action="store_true")
    p.add_argument("--dump-attention", type=int, default=0, metavar="N", help="also dump raw attention for the first N prompts")

    p = sub.add_parser("analyze", help="aggregate alpha and attention traces into CSV tables")
    _add_common(p)
    p.add_argument("--alpha-trace", type=Path, default=None)
    p.add_argument("--attention-trace", type=Path, default=None)
    p.add_argument("--top-k", type=int, default=2, help="blocks to select for sparse enhancement")

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    _add_common(p)
    p.add_argument("--precision", choices=("high", "low"), default="high")

    p = sub.add_parser("selftest", help="fast invariant suite")
    _add_common(p)
    return parser


def _overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    cmd = args.command
    if cmd == "pretrain":
        put("pretrain", "steps", args.steps)
        put("pretrain", "batch_size", args.batch_size)
        put("pretrain", "learning_rate", args.lr)
        put("pretrain", "seed", args.seed)
    elif cmd == "train-aid":
        for key, val in [
            ("mode", args.mode),
            ("steps", args.steps),
            ("batch_size", args.batch_size),
            ("learning_rate", args.lr),
            ("lambda_dpo", args.lambda_dpo),
            ("lambda_reg", args.lambda_reg),
            ("beta", args.beta),
            ("skip_p", args.skip_p),
            ("seed", args.seed),
        ]:
            put("train", key, val)
    elif cmd == "sample":
        put("sampler", "aid_mode", args.aid_mode)
        put("sampler", "num_steps", args.num_steps)
        put("sampler", "cfg_scale", args.cfg_scale)
        put("sampler", "num_prompts", args.num_prompts)
        put("sampler", "enhance_value", args.enhance_value)
        put("sampler", "seed", args.seed)
        if args.enhance_blocks:
            try:
                put("sampler", "enhance_blocks", [int(v) for v in args.enhance_blocks.split(",") if v.strip()])
            except ValueError:
                raise config_mod.ConfigError(f"--enhance-blocks must be comma-separated integers, got {args.enhance_blocks!r}") from None
        if args.capture_alpha:
            put("sampler", "capture_alpha", True)
        if args.capture_attention or args.dump_attention:
            put("sampler", "capture_attention_norm", True)
    return o


def _run_seed(cmd: str, cfg: config_mod.RunConfig) -> int:
    return {
        "pretrain": cfg.pretrain.seed,
        "train-aid": cfg.train.seed,
        "sample": cfg.sampler.seed,
    }.get(cmd, cfg.model.seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(args, cfg, out: Path) -> dict:
    from .trainer import PRETRAIN_COLUMNS, ToyData, pretrain_backbone

    data = ToyData.build(cfg.data, cfg.model)
    res = pretrain_backbone(cfg.model, data, cfg.pretrain)
    save_checkpoint(res.checkpoint, out / "backbone.ckpt")
    write_csv(out / "pretrain_loss.csv", PRETRAIN_COLUMNS, enumerate(res.losses))
    write_dataset(out / "train_data.txt", data.train)
    print(f"backbone: val loss {res.init_val_loss:.4f} -> {res.final_val_loss:.4f}")
    return {
        "init_val_loss": res.init_val_loss,
        "final_val_loss": res.final_val_loss,
        "val_loss_margin": res.init_val_loss - res.final_val_loss,
        "divergence_notes": res.checkpoint.manifest["divergence_notes"],
    }


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise CheckpointError(f"{what} not found: {path}")


def cmd_train_aid(args, cfg, out: Path) -> dict:
    from .trainer import LOG_COLUMNS, ToyData, load_backbone, preference_accuracy, train_aid

    _require_file(args.backbone, "backbone checkpoint")
    bb = load_checkpoint(args.backbone, expect_kind="backbone")
    if bb.model_config != cfg.model:
        raise config_mod.ConfigError(f"backbone checkpoint {args.backbone} was trained with a different [model] section")
    model = load_backbone(bb)
    resume = None
    if args.resume is not None:
        _require_file(args.resume, "resume checkpoint")
        resume = load_checkpoint(args.resume)
    data = ToyData.build(cfg.data, cfg.model)
    pref0 = preference_accuracy(model, data, data.val_pairs)
    res = train_aid(model, data, cfg.train, resume=resume)
    kw = {"aid": res.adapter} if cfg.train.uses_aid else {"lora": res.adapter}
    pref1 = preference_accuracy(model, data, data.val_pairs, **kw)
    name = "adapter.ckpt"
    save_checkpoint(res.checkpoint, out / name)
    write_csv(out / "train_log.csv", LOG_COLUMNS, res.log_rows)
    print(f"{cfg.train.mode}: validation preference accuracy {pref0:.4f} -> {pref1:.4f}")
    return {
        "backbone": str(args.backbone),
        "backbone_sha256": res.checkpoint.manifest["backbone_sha256"],
        "preference_accuracy_step0": pref0,
        "preference_accuracy_final": pref1,
        "divergence_notes": res.checkpoint.manifest["divergence_notes"],
    }


def cmd_sample(args, cfg, out: Path) -> dict:
    from .analytics import write_alpha_trace, write_attention_trace, write_raw_attention
    from .backbone import MMDiT
    from .sampler import decode, resolve_aid, sample
    from .toydata import Vocabulary, adherence, evaluation_prompts, stack_tokens
    from .trainer import SAMPLER_NOTE, load_adapter, load_backbone

    sc = cfg.sampler
    if args.backbone is not None:
        _require_file(args.backbone, "backbone checkpoint")
        model = load_backbone(load_checkpoint(args.backbone, expect_kind="backbone"))
    else:
        model = MMDiT(cfg.model)
    learned = lora = None
    if args.aid is not None:
        _require_file(args.aid, "adapter checkpoint")
        adapter = load_adapter(model, load_checkpoint(args.aid))
        if adapter.__class__.__name__ == "LoRA":
            lora = adapter
        else:
            learned = adapter
    aid = resolve_aid(sc.aid_mode, sc, learned, cfg.model.num_blocks)
    prompts = evaluation_prompts(sc.num_prompts, sc.seed, cfg.data, cfg.model.text_len)
    tokens = stack_tokens(prompts)
    null = Vocabulary(cfg.data, cfg.model.text_len).null_tokens()
    traj = sample(model, tokens, sc, aid=aid, null_tokens=null, lora=lora, keep_raw_attention=args.dump_attention > 0)
    grids = decode(traj.final, cfg.data)
    rows, scores = [], []
    for i, (p, g) in enumerate(zip(prompts, grids)):
        rep = adherence(p, g)
        scores.append(rep.accuracy)
        rows.append([i, p.color, p.count, " ".join(map(str, g.codes.reshape(-1))), int(rep.color_ok), int(rep.count_ok), rep.accuracy])
    write_csv(out / "samples.csv", ["index", "color", "count", "codes", "color_ok", "count_ok", "adherence"], rows)
    header = {"seed": sc.seed, "num_steps": sc.num_steps, "aid_mode": sc.aid_mode, "ts": traj.ts[:-1]}
    if sc.capture_alpha:
        write_alpha_trace(out / "alpha_trace.txt", traj.alpha_records(f"seed{sc.seed}"), header)
    if sc.capture_attention_norm:
        write_attention_trace(out / "attention_trace.txt", traj.attention, header)
    if args.dump_attention:
        keep = [r for r in traj.raw_attention if r[2] < args.dump_attention]
        write_raw_attention(out / "attention_raw.txt", keep, traj.ts, header)
    acc = float(np.mean(scores))
    print(f"adherence {acc:.4f} over {len(prompts)} prompts")
    return {"adherence": acc, "num_prompts": len(prompts), "divergence_notes": [SAMPLER_NOTE]}


def cmd_analyze(args, cfg, out: Path) -> dict:
    from .analytics import analyze, read_alpha_trace, read_attention_trace, select_enhancement_blocks

    if args.alpha_trace is None and args.attention_trace is None:
        raise config_mod.ConfigError("analyze needs --alpha-trace and/or --attention-trace")
    records, attention, ts = [], [], None
    if args.alpha_trace is not None:
        _require_file(args.alpha_trace, "alpha trace")
        header, records = read_alpha_trace(args.alpha_trace)
        ts = header.get("ts")
    if args.attention_trace is not None:
        _require_file(args.attention_trace, "attention trace")
        _, attention = read_attention_trace(args.attention_trace)
    summary = analyze(records, attention, out, cfg.model.num_blocks, ts)
    if records:
        summary["selected_blocks"] = sorted(select_enhancement_blocks(records, args.top_k, cfg.model.num_blocks))
    (out / "analysis_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return {}


def cmd_gradcheck(args, cfg, out: Path) -> dict:
    from .selftest import default_gradcheck

    report = default_gradcheck(args.precision)
    (out / "gradcheck_report.txt").write_text(report.format() + "\n")
    print(report.format())
    if not report.passed:
        raise NumericError(f"gradcheck: {len(report.failures)} parameter(s) exceed tolerance {report.tolerance:g}")
    return {"max_rel_error": report.max_rel_error, "failures": len(report.failures)}


def cmd_selftest(args, cfg, out: Path) -> dict:
    from .selftest import run_selftest

    results = run_selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    failed = [r[0] for r in results if not r[1]]
    if failed:
        raise ContractError(f"selftest failures: {', '.join(failed)}")
    return {"checks": len(results)}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-aid": cmd_train_aid,
    "sample": cmd_sample,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    cfg = config_mod.load(args.config)
    ov = _overrides(args)
    if ov:
        cfg = cfg.with_overrides(**ov)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    extra = COMMANDS[args.command](args, cfg, out) or {}
    write_run_manifest(out, args.command, cfg.to_dict(), _run_seed(args.command, cfg), time.perf_counter() - start, extra)
    return 0


def main(argv=None) -> int:
    try:
        code = run(argv)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        code = 2
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    return code


if __name__ == "__main__":
    raise SystemExit(main())
