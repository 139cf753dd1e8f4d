import json

import numpy as np
import pytest
import torch

from dbaf import losses as L
from dbaf.data import synthetic_faces
from dbaf.errors import NumericError, StateError, ValidationError
from dbaf.model import DBAF, ModelConfig
from dbaf.training import (Checkpoint, TrainConfig, Trainer, load_checkpoint, run_ablation, sample_pair,
                           save_checkpoint, train_stage1, train_stage2)


@pytest.fixture(scope="module")
def small_set():
    return synthetic_faces(6, seed=11)


def quick(stage=1, **kw):
    return TrainConfig(stage=stage, **{"batch_size": 2, "lr": 1e-3, "steps": 3, "seed": 5, **kw})


def params_equal(a: torch.nn.Module, b: torch.nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


# --- pair sampling ---------------------------------------------------------------

def test_sample_pair_always_same(small_set):
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b, same = sample_pair(small_set, 1.0, rng)
        assert same and torch.equal(a, b)


def test_sample_pair_always_distinct():
    data = torch.arange(5, dtype=torch.float32).view(5, 1, 1, 1).expand(5, 3, 2, 2)
    rng = np.random.default_rng(1)
    for _ in range(200):
        a, b, same = sample_pair(data, 0.0, rng)
        assert not same and a[0, 0, 0] != b[0, 0, 0]


def test_sample_pair_binomial_rate(small_set):
    rng = np.random.default_rng(2)
    hits = sum(sample_pair(small_set, 0.5, rng)[2] for _ in range(1000))
    assert abs(hits / 1000 - 0.5) <= 0.05


def test_sample_pair_covers_all_distinct_indices():
    data = torch.arange(4, dtype=torch.float32).view(4, 1, 1, 1)
    rng = np.random.default_rng(3)
    seen = {(int(a), int(b)) for a, b, _ in (sample_pair(data, 0.0, rng) for _ in range(500))}
    assert seen == {(i, j) for i in range(4) for j in range(4) if i != j}


# --- config ----------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [dict(stage=3), dict(steps=-1), dict(same_prob=1.5), dict(ablation="nope"),
                                    dict(optimizer="sgd"), dict(batch_size=0),
                                    dict(stage1_weights={"rec": -1.0})])
def test_bad_configs(kwargs):
    with pytest.raises(ValidationError):
        TrainConfig(**kwargs)


def test_toml_config(tmp_path):
    (tmp_path / "c.toml").write_text('[train]\nstage = 2\nlr = 0.0005\nsteps = 7\noptimizer = "ranger"\n'
                                     '[train.stage2_weights]\nid = 2.0\nlpips = 1.0\nrec = 0.05\n'
                                     'parse = 0.1\nreg = 0.1\nadv = 0.5\n')
    cfg = TrainConfig.from_toml(tmp_path / "c.toml")
    assert (cfg.stage, cfg.lr, cfg.steps, cfg.optimizer) == (2, 0.0005, 7, "ranger")
    assert cfg.weights.stage2["adv"] == 0.5
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    (tmp_path / "bad.toml").write_text("[train]\nlearning_rate = 1.0\n")
    with pytest.raises(ValidationError):
        TrainConfig.from_toml(tmp_path / "bad.toml")


def test_default_lr_is_paper_value():
    assert TrainConfig().lr == 1e-4


# --- step budget and determinism --------------------------------------------------

def test_zero_steps_stage1_unchanged(small_set):
    model = DBAF(ModelConfig(seed=3))
    before = {k: v.clone() for k, v in model.state_dict().items()}
    ckpt = train_stage1(small_set, quick(steps=0), model=model)
    assert ckpt.step == 0 and ckpt.history == []
    assert all(torch.equal(before[k], v) for k, v in ckpt.model.state_dict().items())
    assert int(ckpt.model.stage_completed) == 0


def test_zero_steps_stage2_passthrough(small_set):
    s1 = train_stage1(small_set, quick(steps=1))
    s2 = train_stage2(small_set, quick(stage=2, steps=0), s1)
    assert params_equal(s1.model, s2.model)
    assert s2.step == 0


def test_fixed_seed_identical_traces(small_set):
    a = train_stage1(small_set, quick())
    b = train_stage1(small_set, quick())
    assert a.history == b.history
    assert params_equal(a.model, b.model)
    c = train_stage1(small_set, quick(seed=6))
    assert c.history != a.history


def test_stage2_traces_deterministic(small_set):
    s1 = train_stage1(small_set, quick(steps=1))
    a = train_stage2(small_set, quick(stage=2, steps=2), s1)
    b = train_stage2(small_set, quick(stage=2, steps=2), s1)
    assert a.history == b.history
    assert set(a.history[0]["terms"]) == {"dif", "rev", "div", "id", "lpips", "rec", "parse", "reg", "adv"}
    assert int(a.model.stage_completed) == 2


def test_stage2_does_not_mutate_stage1_checkpoint(small_set):
    s1 = train_stage1(small_set, quick(steps=1))
    snapshot = {k: v.clone() for k, v in s1.model.state_dict().items()}
    train_stage2(small_set, quick(stage=2, steps=1), s1)
    assert all(torch.equal(snapshot[k], v) for k, v in s1.model.state_dict().items())


def test_stage2_needs_stage1_checkpoint(small_set):
    with pytest.raises(StateError):
        train_stage2(small_set, quick(stage=2), None)


def test_stage_mismatch_rejected(small_set):
    with pytest.raises(ValidationError):
        train_stage1(small_set, quick(stage=2))
    with pytest.raises(ValidationError):
        train_stage2(small_set, quick(stage=1), None)


def test_unknown_ablation_mode(small_set):
    with pytest.raises(ValidationError):
        run_ablation("no_kria", small_set, quick())


def test_full_mode_is_stage_composition(small_set):
    full = run_ablation("full", small_set, quick(steps=1))
    s1 = train_stage1(small_set, quick(steps=1))
    s2 = train_stage2(small_set, quick(stage=2, steps=1), s1)
    assert full.history == s2.history
    assert params_equal(full.model, s2.model)


# --- checkpoints -----------------------------------------------------------------

def test_checkpoint_resume_matches_uninterrupted(small_set, tmp_path):
    straight = Trainer(DBAF(ModelConfig(seed=1)), small_set, quick())
    straight.run(3)

    first = Trainer(DBAF(ModelConfig(seed=1)), small_set, quick())
    first.run(2)
    save_checkpoint(first.checkpoint(), tmp_path / "mid.ckpt")
    resumed = Trainer.resume(load_checkpoint(tmp_path / "mid.ckpt"), small_set)
    resumed.run(1)
    assert resumed.history == straight.history
    assert params_equal(resumed.model, straight.model)
    assert params_equal(resumed.disc, straight.disc)


def test_checkpoint_roundtrip_bit_identical(small_set, tmp_path):
    ckpt = train_stage1(small_set, quick(steps=1))
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert params_equal(ckpt.model, back.model) and params_equal(ckpt.discriminator, back.discriminator)
    assert back.train_config == ckpt.train_config and back.step == 1 and back.history == ckpt.history
    x = small_set[:2]
    ckpt.model.eval(), back.model.eval()
    with torch.no_grad():
        assert torch.equal(ckpt.model.mix(x, x.flip(0))[0], back.model.mix(x, x.flip(0))[0])


def test_load_checkpoint_errors(tmp_path):
    with pytest.raises(StateError):
        load_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(StateError):
        load_checkpoint(tmp_path / "junk.ckpt")
    torch.save({"format": "other"}, tmp_path / "other.ckpt")
    with pytest.raises(StateError):
        load_checkpoint(tmp_path / "other.ckpt")


def test_resume_without_config_rejected(small_set):
    with pytest.raises(StateError):
        Trainer.resume(Checkpoint(DBAF()), small_set)


# --- update discipline and failure handling ----------------------------------------

def test_strict_alternation(small_set):
    tr = Trainer(DBAF(ModelConfig(seed=2)), small_set, quick())
    terms, real, fakes = tr.stage1_terms(*tr._pair_batch())
    tr.disc.requires_grad_(False)
    L.stage1_total(terms).total.backward()
    assert all(p.grad is None for p in tr.disc.parameters())
    tr.model.zero_grad(set_to_none=True)
    tr.disc.requires_grad_(True)
    L.discriminator_loss(real, fakes, tr.disc, 10.0).backward()
    assert all(p.grad is None for p in tr.model.parameters())
    assert any(p.grad is not None for p in tr.disc.parameters())


def test_nan_aborts_with_dump(small_set, tmp_path):
    model = DBAF(ModelConfig(seed=2))
    with torch.no_grad():
        next(model.cid.parameters()).fill_(float("nan"))
    log = tmp_path / "log.jsonl"
    tr = Trainer(model, small_set, quick(log_path=str(log)))
    with pytest.raises(NumericError):
        tr.step()
    tr.close()
    dump = json.loads(log.read_text().splitlines()[-1])
    assert dump["event"] == "nan_abort" and dump["step"] == 1


def test_log_records(small_set, tmp_path):
    log = tmp_path / "log.jsonl"
    train_stage1(small_set, quick(steps=2, log_path=str(log)))
    recs = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2]
    for r in recs:
        want = sum(L.STAGE1_WEIGHTS[k] * v for k, v in r["terms"].items())
        assert abs(r["total"] - want) <= 1e-4 * max(1.0, abs(want))
        assert np.isfinite(r["disc"])


def test_ranger_and_frozen_backbone(small_set):
    model = DBAF(ModelConfig(seed=4))
    before = {k: v.clone() for k, v in model.backbone.state_dict().items()}
    ckpt = train_stage1(small_set, quick(steps=2, optimizer="ranger", freeze_backbone=True), model=model)
    assert all(np.isfinite(r["total"]) for r in ckpt.history)
    assert all(torch.equal(before[k], v) for k, v in model.backbone.state_dict().items())


@pytest.mark.slow
def test_stage1_training_improves_reconstruction(faces, stage1_ckpt):
    """Trained stage-1 model reconstructs better than a fresh one."""
    fresh = DBAF(ModelConfig(seed=0))
    with torch.no_grad():
        err = lambda m: float(L.l1_loss(m.eval().mix(faces, faces)[0], faces))
        assert err(stage1_ckpt.model) < err(fresh)
