import dataclasses
import math

import numpy as np
import pytest

from ppf import autodiff as ad
from ppf.data import generate
from ppf.tensorio import FormatError
from ppf.train import (AdamW, NonFiniteLossError, TrainConfig, checkpoint_bytes,
                       clip_grad_norm, cosine_lr, evaluate, init_state, parse_checkpoint,
                       parse_config, train, train_step)

TINY = TrainConfig(epochs=3, batch_size=16, image_size=16, patch_size=4, depth=2, heads=2,
                   embed_dim=8, k=8, protos_global_per_class=1, protos_local_per_class=2,
                   n_classes=3, n_train=48, n_test=30, base_lr=5e-3)


@pytest.fixture(scope="module")
def tiny_data():
    return generate(11, 48, n_classes=3, image_size=16)


@pytest.fixture(scope="module")
def trained(tiny_data):
    return train(TINY, tiny_data)


def _snapshot(state):
    return {k: v.data.copy() for k, v in state.model.named_parameters().items()}


def test_cosine_schedule():
    assert cosine_lr(1.0, 0, 100) == 1.0
    assert cosine_lr(0.4, 50, 100) == pytest.approx(0.2, abs=1e-15)
    assert cosine_lr(0.4, 100, 100) == pytest.approx(0.0, abs=1e-15)


def test_zero_lr_leaves_parameters(tiny_data):
    cfg = dataclasses.replace(TINY, base_lr=0.0, epochs=1)
    state = init_state(cfg)
    before = _snapshot(state)
    train(cfg, tiny_data, state)
    after = _snapshot(state)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_adamw_decoupled_decay_only_on_matrices():
    w = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    b = ad.Tensor(np.ones(2), requires_grad=True)
    p = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    opt = AdamW({"lin.w": w, "lin.b": b, "protos.local": p}, weight_decay=0.5)
    for t in (w, b, p):
        t.grad = np.zeros(t.shape)
    opt.step(0.1)
    assert np.allclose(w.data, 0.95) and np.array_equal(b.data, np.ones(2))
    assert np.array_equal(p.data, np.ones((2, 2)))


def test_clip_grad_norm():
    a = ad.Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([a], 1.0) == 5.0
    np.testing.assert_allclose(a.grad, [0.6, 0.8])


def test_same_seed_same_log(tiny_data, trained):
    _, lines = train(TINY, tiny_data)
    assert lines == trained[1]
    assert len(lines) == 3 and lines[0].startswith("epoch=1 loss=")


def test_resume_is_bit_identical(tiny_data, trained):
    state, first = train(TINY, tiny_data, until_epoch=1)
    resumed = parse_checkpoint(checkpoint_bytes(state))
    resumed, rest = train(TINY, tiny_data, state=resumed)
    assert first + rest == trained[1]
    assert checkpoint_bytes(resumed) == checkpoint_bytes(trained[0])


def test_checkpoint_round_trip(trained):
    buf = checkpoint_bytes(trained[0])
    again = parse_checkpoint(buf)
    assert checkpoint_bytes(again) == buf
    assert again.epoch == 3


def test_corrupt_checkpoint_reports_offset(trained):
    buf = checkpoint_bytes(trained[0])
    with pytest.raises(FormatError) as e:
        parse_checkpoint(b"NOPE" + buf[4:])
    assert e.value.offset == 0
    cut = len(buf) - 10
    with pytest.raises(FormatError) as e:
        parse_checkpoint(buf[:cut])
    assert 0 < e.value.offset <= cut
    with pytest.raises(FormatError) as e:
        parse_checkpoint(buf + b"\0")
    assert e.value.offset == len(buf)


def test_fc_heads_frozen(trained):
    model = trained[0].model
    assert not any(k.startswith("fc") for k in model.named_parameters())
    np.testing.assert_array_equal(model.fc_local, model.bank.fc_local())
    fresh = init_state(TINY).model
    assert np.array_equal(model.fc_local, fresh.fc_local)
    assert np.array_equal(model.fc_global, fresh.fc_global)


def test_training_changes_parameters(trained):
    fresh = _snapshot(init_state(TINY))
    after = _snapshot(trained[0])
    assert all(not np.array_equal(fresh[k], after[k]) for k in ("patch.w", "protos.local"))


def test_local_weight_zero_total_equals_global(tiny_data):
    cfg = dataclasses.replace(TINY, lambda_l=0.0, epochs=1)
    state, _ = train(cfg, tiny_data)
    a = evaluate(state.model, tiny_data, "total")["accuracy"]
    b = evaluate(state.model, tiny_data, "global")["accuracy"]
    assert a == b


def test_untrained_model_near_chance():
    cfg = dataclasses.replace(TINY, n_classes=4)
    data = generate(3, 400, n_classes=4, image_size=16)
    acc = evaluate(init_state(cfg).model, data)["accuracy"]
    half_width = 3 * math.sqrt(0.25 * 0.75 / 400)
    assert abs(acc - 0.25) <= half_width


def test_evaluate_metrics(trained, tiny_data):
    r = evaluate(trained[0].model, tiny_data, "local")
    assert 0.0 <= r["concentration"] <= 1.0
    assert 0.0 <= r["accuracy"] <= 1.0
    assert r["proto_tr"].shape == (6,)
    with pytest.raises(ValueError):
        evaluate(trained[0].model, tiny_data, "both")


def test_nonfinite_loss_is_reported(tiny_data):
    state = init_state(TINY)
    state.model.bank.local_protos.data[0, 0] = np.nan
    with pytest.raises(NonFiniteLossError, match="non-finite"):
        train_step(state, tiny_data.images[:4], tiny_data.labels[:4], 1e-3)


def test_parse_config():
    cfg = parse_config("epochs = 5  # short\n\nrollout_renormalize = false\nbase_lr=1e-2\n")
    assert (cfg.epochs, cfg.rollout_renormalize, cfg.base_lr) == (5, False, 0.01)
    assert parse_config("\n".join(TINY.to_lines())) == TINY
    for bad in ("nope = 1", "epochs", "epochs = x", "rollout_renormalize = maybe"):
        with pytest.raises(ValueError):
            parse_config(bad)


def test_shipped_config_parses():
    from pathlib import Path

    from ppf.train import load_config
    cfg = load_config(Path(__file__).parents[1] / "configs" / "synthetic4.cfg")
    assert (cfg.n_train, cfg.n_test, cfg.epochs, cfg.n_classes) == (2000, 400, 30, 4)
