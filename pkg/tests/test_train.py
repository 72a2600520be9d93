import numpy as np
import pytest

from mrcfa.data import make_dataset
from mrcfa.model import MRCFA, ModelConfig
from mrcfa.train import (
    NonFiniteLoss,
    parameters_equal,
    poly_lr,
    predict_video,
    sample_schedule,
    train,
    evaluate,
)

CFG = ModelConfig(
    image_size=(16, 16),
    reference_offsets=(-2, -1),
    channels=(4, 6, 8),
    strides=(2, 4, 8),
    c_hat=8,
    num_classes=3,
    n_top=2,
)


@pytest.fixture(scope="module")
def clips():
    return make_dataset(0, 2, frames=5, size=16, num_classes=3)


def test_zero_lr_leaves_parameters(clips):
    model = MRCFA(CFG)
    res = train(model, clips, 3, lr=0.0)
    assert parameters_equal(model, MRCFA(CFG))
    assert len(res.losses) == 3


def test_same_seed_same_curve(clips):
    a = train(MRCFA(CFG), clips, 5, lr=0.01).losses
    b = train(MRCFA(CFG), clips, 5, lr=0.01).losses
    assert a == b


def test_different_seed_different_schedule(clips):
    assert sample_schedule(clips, 20, 0) != sample_schedule(clips, 20, 1)


def test_resumed_schedule_matches():
    clips = make_dataset(1, 3, frames=4, size=16)
    full = sample_schedule(clips, 10, 5)
    assert sample_schedule(clips, 4, 5) == full[:4]


def test_loss_decreases(clips):
    res = train(MRCFA(CFG), clips[:1], 60, lr=0.05)
    assert np.mean(res.losses[-10:]) < np.mean(res.losses[:10])


def test_adamw_runs(clips):
    model = MRCFA(CFG)
    train(model, clips, 3, lr=1e-3, optimizer="adamw")
    assert not parameters_equal(model, MRCFA(CFG))


def test_non_finite_loss_aborts(clips):
    model = MRCFA(CFG)
    model.head.proj.conv.bias.data[:] = np.nan
    with pytest.raises(NonFiniteLoss, match="step 0"):
        train(model, clips, 2)


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(MRCFA(CFG), [], 1)


def test_poly_schedule():
    assert poly_lr(0.1, 0, 10) == 0.1
    assert poly_lr(0.1, 10, 10) == 0.0
    assert 0 < poly_lr(0.1, 5, 10) < 0.1


def test_prediction_matches_direct_forward(clips):
    model = MRCFA(CFG)
    clip = clips[0]
    preds = predict_video(model, clip)
    t = 3
    logits = model(clip.clip_at(t, CFG.reference_offsets))
    np.testing.assert_array_equal(preds[t], np.argmax(logits.data, axis=0))


def test_evaluate_threads_agree(clips, monkeypatch):
    model = MRCFA(CFG)
    monkeypatch.setenv("MRCFA_THREADS", "1")
    one = evaluate(model, clips, 3, window=2)
    monkeypatch.setenv("MRCFA_THREADS", "3")
    many = evaluate(model, clips, 3, window=2)
    assert one == many


def test_gt_as_prediction(clips):
    rep = evaluate(None, clips, 3, window=4, gt_as_prediction=True)
    assert (rep.miou, rep.wiou, rep.mvc) == (1.0, 1.0, 1.0)
