import numpy as np
import pytest

from pef.autodiff import Tensor
from pef.data import synthetic_dataset
from pef.model import ModelConfig, load_checkpoint
from pef.train import (AdamW, LossConfig, NumericError, OptimizerState, ScheduleConfig,
                       adamw_step, clip_gradients, compute_loss, lr_at, read_loss_log, train)

TINY = ModelConfig(width=32, height=32, patch_size=8, d_model=16, n_heads=2, encoder_depth=1,
                   decoder_depth=1, num_queries=6, num_joints=5, seed=0)


def test_lr_schedule_published_values():
    s = ScheduleConfig()
    assert lr_at(0, s) == (1e-5, 1e-4)
    assert lr_at(49, s) == (1e-5, 1e-4)
    assert lr_at(50, s) == pytest.approx((1e-6, 1e-5), rel=1e-15)
    assert lr_at(79, s) == pytest.approx((1e-6, 1e-5), rel=1e-15)
    with pytest.raises(ValueError):
        lr_at(80, s)


def test_lr_schedule_has_exactly_one_drop():
    s = ScheduleConfig()
    values = [lr_at(e, s) for e in range(s.epochs)]
    changes = [e for e in range(1, s.epochs) if values[e] != values[e - 1]]
    assert changes == [50]
    for a, b in zip(values[49], values[50]):
        assert a / b == pytest.approx(10.0, rel=1e-12)


@pytest.mark.parametrize("bad", [dict(drop_epoch=80), dict(batch_size=0), dict(encoder_lr=0.0)])
def test_schedule_validation(bad):
    with pytest.raises(ValueError):
        ScheduleConfig(**bad).validate()


def test_single_step_moves_by_lr():
    p = Tensor(np.array([0.5]))
    state = OptimizerState.for_params([p], weight_decay=0.0)
    adamw_step([p], [np.array([1.0])], state, lr=1e-3)
    # bias-corrected first step is lr * g / (|g| + eps)
    assert p.data[0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)
    assert state.step == 1


def test_decoupled_weight_decay_on_first_step():
    p = Tensor(np.array([2.0]))
    state = OptimizerState.for_params([p], weight_decay=0.1)
    adamw_step([p], [np.array([1.0])], state, lr=0.01)
    assert p.data[0] == pytest.approx(2.0 - 0.01 * 0.1 * 2.0 - 0.01 / (1 + 1e-8), abs=1e-15)


def test_zero_grad_zero_decay_is_identity():
    rng = np.random.default_rng(0)
    params = [Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal(5))]
    before = [p.data.copy() for p in params]
    state = OptimizerState.for_params(params, weight_decay=0.0)
    for _ in range(5):
        adamw_step(params, [np.zeros((3, 4)), None], state, lr=0.1)
    for p, b in zip(params, before):
        assert p.data.tobytes() == b.tobytes()


def test_adamw_is_deterministic():
    def run():
        rng = np.random.default_rng(1)
        p = Tensor(rng.standard_normal(6))
        state = OptimizerState.for_params([p])
        for _ in range(10):
            adamw_step([p], [rng.standard_normal(6)], state, lr=0.01)
        return p.data.tobytes()

    assert run() == run()


def test_adamw_rejects_bad_inputs():
    p = Tensor(np.zeros(2))
    state = OptimizerState.for_params([p])
    with pytest.raises(ValueError):
        adamw_step([p], [np.zeros(2)], state, lr=0.0)
    with pytest.raises(ValueError):
        adamw_step([p], [np.zeros(3)], state, lr=0.1)


def test_group_optimizer_uses_group_rates():
    a, b = Tensor(np.array([1.0])), Tensor(np.array([1.0]))
    opt = AdamW({"encoder": [("a", a)], "decoder": [("b", b)]}, weight_decay=0.0)
    a.grad, b.grad = np.array([1.0]), np.array([1.0])
    opt.step({"encoder": 1e-3, "decoder": 1e-2})
    assert 1 - a.data[0] == pytest.approx(1e-3, rel=1e-6)
    assert 1 - b.data[0] == pytest.approx(1e-2, rel=1e-6)
    assert opt.state.step == 1
    restored = AdamW({"encoder": [("a", a)], "decoder": [("b", b)]})
    restored.load_state_arrays(opt.state_arrays())
    assert restored.state.step == 1 and restored.state.m[1].tobytes() == opt.state.m[1].tobytes()


def test_gradient_clipping():
    p = Tensor(np.zeros(2))
    p.grad = np.array([3.0, 4.0])
    assert clip_gradients([p], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-9)


def test_single_sample_loss_decreases():
    samples = synthetic_dataset(1, seed=0, num_joints=5)
    sched = ScheduleConfig(encoder_lr=1e-3, decoder_lr=1e-3, epochs=80, drop_epoch=79, batch_size=1)
    losses = [r.total for r in train(samples, TINY, sched, dtype=np.float64).losses]
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert smooth[-1] < 0.5 * smooth[0]
    assert np.mean(np.diff(smooth) < 0) > 0.6


def test_training_run_is_reproducible(tmp_path):
    samples = synthetic_dataset(4, seed=1, num_joints=5)
    sched = ScheduleConfig(encoder_lr=1e-3, decoder_lr=1e-3, epochs=3, drop_epoch=2, batch_size=2,
                           checkpoint_every=2)
    train(samples, TINY, sched, out_dir=tmp_path / "a", jobs=1)
    train(samples, TINY, sched, out_dir=tmp_path / "b", jobs=1)
    for name in ("loss_log.csv", "checkpoint.pef"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    log = read_loss_log(tmp_path / "a" / "loss_log.csv")
    assert [(r.epoch, r.step) for r in log] == [(e, 2 * e + i) for e in range(3) for i in range(2)]
    ck = load_checkpoint(tmp_path / "a" / "checkpoint.pef")
    assert ck.epoch == 3 and ck.config == TINY


def test_divergence_aborts_with_diagnostic():
    samples = synthetic_dataset(2, seed=2, num_joints=5)
    sched = ScheduleConfig(encoder_lr=1e300, decoder_lr=1e300, epochs=3, drop_epoch=2, batch_size=2)
    with pytest.raises(NumericError, match=r"non-finite .* at epoch \d+ step \d+"), \
            np.errstate(all="ignore"):
        train(samples, TINY, sched, dtype=np.float64)


def test_auxiliary_loss_sums_every_decoder_layer():
    from pef.model import PoseModel

    cfg = ModelConfig(**{**TINY.__dict__, "decoder_depth": 2})
    model = PoseModel(cfg)
    samples = synthetic_dataset(2, seed=3, num_joints=5)
    images = np.stack([im / 255.0 for im, _ in samples])
    insts = [inst for _, inst in samples]
    one = compute_loss(model, images, insts, LossConfig())[0].item()
    both = compute_loss(model, images, insts, LossConfig(aux_loss=True))[0].item()
    assert both > one
