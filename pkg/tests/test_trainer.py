import dataclasses

import numpy as np
import pytest

from aidflow import trainer as tr
from aidflow.aid import skip_mask
from aidflow.backbone import MMDiT
from aidflow.config import PretrainConfig, TrainConfig
from aidflow.errors import ConfigError, ContractError, InvariantViolation, NumericError
from aidflow.optim import AdamW
from aidflow.persistence import checkpoint_bytes
from aidflow.tensor import Tensor

from conftest import SMALL

QUICK = TrainConfig(steps=3, batch_size=4)


@pytest.fixture(scope="module")
def backbone(tiny_data):
    return tr.pretrain_backbone(SMALL, tiny_data, PretrainConfig(steps=4, batch_size=8)).checkpoint


def fresh(backbone):
    return tr.load_backbone(backbone)


def test_zero_step_pretrain_is_initialisation(tiny_data):
    res = tr.pretrain_backbone(SMALL, tiny_data, PretrainConfig(steps=0))
    init = MMDiT(SMALL)
    assert res.losses == []
    for k, p in init.params.items():
        np.testing.assert_array_equal(res.checkpoint.params[k], p.data)


def test_pretrain_records_every_step_and_manifest(tiny_data):
    res = tr.pretrain_backbone(SMALL, tiny_data, PretrainConfig(steps=5, batch_size=8))
    assert len(res.losses) == 5 and all(np.isfinite(res.losses))
    m = res.checkpoint.manifest
    assert m["step"] == 5 and m["init_val_loss"] == res.init_val_loss and m["final_val_loss"] == res.final_val_loss
    assert m["divergence_notes"]


def test_pretrain_divergence_aborts(tiny_data, monkeypatch):
    monkeypatch.setattr(tr, "diffusion_loss", lambda v, target: Tensor(np.array(np.nan)))
    with pytest.raises(NumericError, match="step 0"):
        tr.pretrain_backbone(SMALL, tiny_data, PretrainConfig(steps=2, batch_size=4))


def test_full_mute_leaves_aid_at_initialisation(backbone, tiny_data):
    cfg = dataclasses.replace(QUICK, skip_p=1.0)
    res = tr.train_aid(fresh(backbone), tiny_data, cfg)
    init = tr.AidStack(SMALL, seed=cfg.seed)
    for k, p in init.params.items():
        np.testing.assert_array_equal(res.checkpoint.params[k], p.data)
    assert all(r[3] == 0.0 and r[5] == 0.0 for r in res.log_rows)


def test_full_mute_batches_match_draw_order(backbone, tiny_data):
    """With every block skipped the step-0 flow loss equals the bare backbone on the same batch."""
    cfg = dataclasses.replace(QUICK, steps=1, skip_p=1.0)
    model = fresh(backbone)
    res = tr.train_aid(model, tiny_data, cfg)
    rng = np.random.default_rng(cfg.seed)
    skip_mask(SMALL.num_blocks, 1.0, rng)
    xw, _, tok = tiny_data.pair_arrays(tiny_data.pairs)
    idx, eps, t = tr.draw_batch(rng, len(xw), cfg.batch_size, xw.shape[1:], np.float32)
    v = model.velocity(tr.interpolate(xw[idx], eps, t), t, tok[idx])
    assert res.log_rows[0][1] == float(tr.diffusion_loss(v, eps - xw[idx]).data)


def test_identical_runs_give_identical_checkpoints(backbone, tiny_data):
    a = tr.train_aid(fresh(backbone), tiny_data, QUICK).checkpoint
    b = tr.train_aid(fresh(backbone), tiny_data, QUICK).checkpoint
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


@pytest.mark.parametrize("mode", ["dpo", "lora_dpo"])
def test_resume_reproduces_uninterrupted_run(backbone, tiny_data, mode):
    cfg = dataclasses.replace(QUICK, steps=4, mode=mode)
    full = tr.train_aid(fresh(backbone), tiny_data, cfg)
    half = tr.train_aid(fresh(backbone), tiny_data, dataclasses.replace(cfg, steps=2))
    rest = tr.train_aid(fresh(backbone), tiny_data, cfg, resume=half.checkpoint)
    assert rest.log_rows == full.log_rows
    assert checkpoint_bytes(rest.checkpoint) == checkpoint_bytes(full.checkpoint)


@pytest.mark.parametrize("mode", ["sft", "dpo", "lora_sft", "lora_dpo"])
def test_modes_keep_backbone_frozen_and_log_exactly(backbone, tiny_data, mode):
    model = fresh(backbone)
    before = tr.params_hash(model.params)
    res = tr.train_aid(model, tiny_data, dataclasses.replace(QUICK, mode=mode))
    assert tr.params_hash(model.params) == before == res.checkpoint.manifest["backbone_sha256"]
    assert res.checkpoint.kind == ("aid" if mode in ("sft", "dpo") else "lora")
    assert [r[0] for r in res.log_rows] == [0, 1, 2]
    lam_dpo = QUICK.lambda_dpo if "dpo" in mode else 0.0
    lam_reg = QUICK.lambda_reg if mode in ("sft", "dpo") else 0.0
    assert tr.check_bookkeeping(res.log_rows, lam_dpo, lam_reg)
    assert all(0.0 <= r[6] <= 1.0 for r in res.log_rows)
    adapter = tr.load_adapter(model, res.checkpoint)
    for k, p in adapter.params.items():
        np.testing.assert_array_equal(p.data, res.checkpoint.params[k])


def test_backbone_change_is_detected(backbone, tiny_data, monkeypatch):
    model = fresh(backbone)

    class Leaky(AdamW):
        def step(self, lr=None):
            super().step(lr)
            model.params["out_b"].data[0] += 1.0

    monkeypatch.setattr(tr, "AdamW", Leaky)
    with pytest.raises(InvariantViolation):
        tr.train_aid(model, tiny_data, QUICK)


def test_missing_pairs_rejected(backbone, tiny_data):
    with pytest.raises(ContractError, match="pairs"):
        tr.train_aid(fresh(backbone), tiny_data, QUICK, pairs=[])


def test_invalid_skip_probability_rejected(backbone, tiny_data):
    with pytest.raises(ConfigError, match="skip_p"):
        tr.train_aid(fresh(backbone), tiny_data, dataclasses.replace(QUICK, skip_p=1.5))


def test_load_backbone_rejects_adapter(backbone, tiny_data):
    ck = tr.train_aid(fresh(backbone), tiny_data, dataclasses.replace(QUICK, steps=1)).checkpoint
    with pytest.raises(ContractError):
        tr.load_backbone(ck)
    with pytest.raises(ContractError):
        tr.load_adapter(fresh(backbone), backbone)


def test_preference_accuracy_is_seeded(backbone, tiny_data):
    model = fresh(backbone)
    a = tr.preference_accuracy(model, tiny_data, tiny_data.val_pairs)
    assert a == tr.preference_accuracy(model, tiny_data, tiny_data.val_pairs, batch=5)
    assert 0.0 <= a <= 1.0


def test_final_epoch_mean_uses_last_epoch_rows():
    rows = [[k, 0, 0, 0, 0, float(k), 0] for k in range(10)]
    assert tr.final_epoch_mean_abs_alpha(rows, num_pairs=8, batch_size=4) == 8.5


def test_toy_data_splits_are_seeded_separately(tiny_data):
    again = tr.ToyData.build(tiny_data.cfg, SMALL)
    assert again.train == tiny_data.train and again.pairs == tiny_data.pairs
    assert tiny_data.train[0] != tiny_data.val[0] or tiny_data.train[1] != tiny_data.val[1]
