import json
import math
from dataclasses import replace

import numpy as np
import pytest

from epl import model as M
from epl import synth
from epl import tensor as T
from epl import trainer as TR
from epl.model import NetConfig


@pytest.fixture(scope="module")
def tiny_data():
    spec = synth.PhantomSpec(shape=(8, 8, 8), classes=[synth.ShapeClass(count=1, radius_min=2, radius_max=3)], seed=0)
    return synth.make_dataset(spec, 10, 0.2, seed=0, test_count=2)


def tiny_cfg(**kw):
    base = dict(iterations=4, model=NetConfig(base_width=2, depth=2, proto_stage=2), checkpoint_every=2)
    base.update(kw)
    return TR.TrainConfig(**base)


def test_schedules():
    assert TR.lambda_con(2000, 2000, 0.7) == 0.7
    assert abs(TR.lambda_con(0, 2000, 1.0) - math.exp(-5)) < 1e-12
    assert abs(TR.lambda_con(0, 2000, 2.0) - 0.006738 * 2) < 1e-6
    vals = [TR.lambda_con(t, 100, 1.0) for t in range(101)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert TR.gamma_schedule(100, 100, 0.5) == 0.5


def test_config_round_trip_and_strictness():
    cfg = tiny_cfg()
    d = cfg.to_dict()
    assert TR.TrainConfig.from_dict(json.loads(json.dumps(d))) == cfg
    missing = dict(d)
    del missing["lr"]
    with pytest.raises(TR.ConfigError, match="lr"):
        TR.TrainConfig.from_dict(missing)
    nested = json.loads(json.dumps(d))
    del nested["model"]["depth"]
    with pytest.raises(TR.ConfigError, match="depth"):
        TR.TrainConfig.from_dict(nested)
    with pytest.raises(TR.ConfigError):
        TR.TrainConfig.from_dict(dict(d, bogus=1))
    with pytest.raises(ValueError):
        tiny_cfg(fuse_heads_mode="max")


def test_ablation_rows():
    rows = TR.ablation_configs(tiny_cfg())
    names = list(rows)
    assert names[0] == "MT" and names[-1] == "EPL"
    assert rows["MT"].model.num_heads == 1 and not rows["MT"].use_prototypes
    assert rows["+AMC"].fuse_heads_mode == "average"
    assert rows["EPL"].use_gedl_unlabeled and rows["EPL"].fuse_heads_mode == "dempster"
    sup = TR.supervised_config(tiny_cfg())
    assert not (sup.use_mt or sup.use_prototypes or sup.use_lrm or sup.use_urm
                or sup.use_gedl_labeled or sup.use_gedl_unlabeled)


def test_adam_first_step():
    p = {"w": T.Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    opt = TR.Adam(p, lr=0.1)
    p["w"].grad = np.array([3.0, -0.5])
    opt.step()
    # the bias-corrected first step moves every coordinate by lr against the gradient sign
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9], atol=1e-7)


@pytest.mark.parametrize("crop", [None, 4])
def test_supervised_config_matches_plain_loop(tiny_data, crop):
    cfg = TR.supervised_config(tiny_cfg(iterations=3, crop=crop))
    a = TR.run(cfg, tiny_data).reports
    b = TR.train_supervised(cfg, tiny_data)
    assert [r.total for r in a] == [r.total for r in b]
    assert all(r.gedl_unlabeled == 0 and r.proto_ce_unlabeled == 0 for r in a)


def test_targets_toggles(tiny_data):
    cfg = tiny_cfg(use_urm=False)
    with T.default_dtype(np.float64):
        state = TR.init_state(cfg)
        lab, unl = TR.next_batches(state, cfg, tiny_data.labeled, [s.image for s in tiny_data.unlabeled])
        out = TR.step_objective(state.student, cfg, *lab, unl, state.teacher, 0)
    assert unl.shape[0] == cfg.unlabeled_per_batch
    assert np.array_equal(out.targets.beta_u, np.ones_like(out.targets.u_bar_u))
    assert not np.array_equal(out.targets.beta_l, np.ones_like(out.targets.beta_l))
    assert out.prototypes is not None and out.prototypes.num_classes == 2


def _find_block(vol, block):
    k = block.shape[-1]
    for i in range(vol.shape[-3] - k + 1):
        for j in range(vol.shape[-2] - k + 1):
            for l in range(vol.shape[-1] - k + 1):
                if np.array_equal(vol[..., i:i + k, j:j + k, l:l + k], block):
                    return i, j, l
    return None


def test_crops_are_aligned_sub_blocks(tiny_data):
    cfg = tiny_cfg(crop=4)
    state = TR.init_state(cfg)
    images = [s.image for s in tiny_data.unlabeled]
    (img, lbl), unl = TR.next_batches(state, cfg, tiny_data.labeled, images)
    assert img.shape == (1, 1, 4, 4, 4) and lbl.shape == (1, 4, 4, 4) and unl.shape == (2, 1, 4, 4, 4)
    hits = [(s, _find_block(s.image, img[0])) for s in tiny_data.labeled]
    assert any(pos is not None and np.array_equal(s.label[tuple(slice(o, o + 4) for o in pos)], lbl[0])
               for s, pos in hits)
    assert all(any(_find_block(v, u) is not None for v in images) for u in unl)
    with pytest.raises(ValueError):
        tiny_cfg(crop=3)


def test_unlabeled_noise_views(tiny_data, monkeypatch):
    seen = {}
    real = TR.teacher_targets

    def spy(teacher, cfg, img):
        seen["teacher"] = img
        return real(teacher, cfg, img)

    monkeypatch.setattr(TR, "teacher_targets", spy)
    cfg = tiny_cfg(unlabeled_noise=0.1)
    with T.default_dtype(np.float64):
        state = TR.init_state(cfg)
        lab, unl = TR.next_batches(state, cfg, tiny_data.labeled, [s.image for s in tiny_data.unlabeled])
        TR.train_step(state, cfg, lab, unl)
    delta = seen["teacher"] - unl
    assert 0 < np.abs(delta).max() <= 0.2 + 1e-12 and abs(delta.std() - 0.1) < 0.02
    with pytest.raises(ValueError):
        tiny_cfg(unlabeled_noise=-1.0)


def test_full_labels_skip_unlabeled_branch(tiny_data):
    res = TR.run(tiny_cfg(labeled_ratio=1.0, iterations=2), tiny_data)
    assert all(r.gedl_unlabeled == 0 and r.proto_ce_unlabeled == 0 for r in res.reports)


def test_zero_iterations_artifacts(tiny_data, tmp_path):
    res = TR.run(tiny_cfg(iterations=0), tiny_data, out_dir=str(tmp_path))
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["ckpt_000000.eplc"]
    assert (tmp_path / "loss_log.jsonl").read_text() == ""
    assert json.loads((tmp_path / "metrics.json").read_text()) == json.loads(json.dumps(res.metrics))


def test_artifacts_and_determinism(tiny_data, tmp_path):
    cfg = tiny_cfg()
    TR.run(cfg, tiny_data, out_dir=str(tmp_path / "a"))
    TR.run(cfg, tiny_data, out_dir=str(tmp_path / "b"))
    assert (tmp_path / "a/loss_log.jsonl").read_bytes() == (tmp_path / "b/loss_log.jsonl").read_bytes()
    ckpts = sorted(p.name for p in (tmp_path / "a/checkpoints").iterdir())
    assert ckpts == ["ckpt_000000.eplc", "ckpt_000002.eplc", "ckpt_000004.eplc"]
    assert (tmp_path / "a/prototypes/proto_000004.bin").exists()
    s, t, header = M.load_checkpoint(tmp_path / "a/checkpoints/ckpt_000004.eplc")
    assert header["step"] == 4 and t is not None
    lines = (tmp_path / "a/train_log.jsonl").read_text().splitlines()
    assert len(lines) == 4 and "wall_time" in json.loads(lines[0])
    other = TR.run(replace(cfg, seed=1), tiny_data, out_dir=str(tmp_path / "c"))
    assert (tmp_path / "c/loss_log.jsonl").read_bytes() != (tmp_path / "a/loss_log.jsonl").read_bytes()
    assert other.reports


def test_teacher_follows_ema(tiny_data):
    cfg = tiny_cfg(iterations=1)
    with T.default_dtype(np.float32):
        state = TR.init_state(cfg)
        before = {k: v.data.copy() for k, v in state.teacher.items()}
        lab, unl = TR.next_batches(state, cfg, tiny_data.labeled, [s.image for s in tiny_data.unlabeled])
        TR.train_step(state, cfg, lab, unl)
    for k, v in state.teacher.items():
        expect = cfg.ema_decay * before[k] + (1 - cfg.ema_decay) * state.student[k].data
        assert np.array_equal(v.data, expect)


def test_teacher_gets_no_gradient(tiny_data):
    cfg = tiny_cfg(iterations=1)
    with T.default_dtype(np.float32):
        state = TR.init_state(cfg)
        lab, unl = TR.next_batches(state, cfg, tiny_data.labeled, [s.image for s in tiny_data.unlabeled])
        TR.train_step(state, cfg, lab, unl)
    assert all(p.grad is None and not p.requires_grad for p in state.teacher.values())
    assert all(p.grad is not None for p in state.student.values())
