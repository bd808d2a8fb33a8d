# Test functions for optimisation, checkpoints and evaluation

import numpy as np
import pytest

from selseg.checkpoint import Checkpoint, config_hash, encode_checkpoint, decode_checkpoint, save_checkpoint, \
    load_checkpoint
from selseg.dataio import mean_pixel
from selseg.network import SSN
from selseg.perturb import PerturbSpec
from selseg.tensor import Tensor
from selseg.training import SgdConfig, decay_mask, sgd_step, make_batch, pretrain_lsd, train_multiloss, evaluate
from selseg.transforms import eval_transform
from selseg.anchors import LossConfig
from selseg.losses import lsd_loss
from selseg import training
from selseg.errors import DivergenceError, RejectedInputError


### SGD ###

def test_sgd_plain_step():
    p = {'a.weight': Tensor(np.array([1.0, -2.0]))}
    sgd_step(p, {'a.weight': np.array([0.5, 0.25])}, {}, SgdConfig(lr=1.0, momentum=0.0, weight_decay=0.0))
    np.testing.assert_array_equal(p['a.weight'].data, [0.5, -2.25])


def test_sgd_zero_gradient_keeps_params():
    p = {'a.weight': Tensor(np.array([3.0])), 'a.bias': Tensor(np.array([1.0]))}
    sgd_step(p, {'a.weight': np.zeros(1), 'a.bias': None}, {}, SgdConfig(lr=0.1, momentum=0.9, weight_decay=0.0))
    assert p['a.weight'].data[0] == 3.0 and p['a.bias'].data[0] == 1.0


def test_sgd_momentum_two_steps():
    cfg = SgdConfig(lr=0.1, momentum=0.9, weight_decay=0.01)
    p = {'a.weight': Tensor(np.array([2.0])), 'a.bias': Tensor(np.array([2.0]))}
    velocities = {}
    g1, g2 = 0.3, -0.7
    for g in (g1, g2):
        sgd_step(p, {'a.weight': np.array([g]), 'a.bias': np.array([g])}, velocities, cfg)
    # kernel with decay
    v1 = g1 + 0.01 * 2.0
    w1 = 2.0 - 0.1 * v1
    v2 = 0.9 * v1 + g2 + 0.01 * w1
    assert p['a.weight'].data[0] == pytest.approx(w1 - 0.1 * v2, abs=1e-12)
    # bias without decay
    b1 = 2.0 - 0.1 * g1
    assert p['a.bias'].data[0] == pytest.approx(b1 - 0.1 * (0.9 * g1 + g2), abs=1e-12)


def test_sgd_rejects_non_finite():
    p = {'a.weight': Tensor(np.ones(2))}
    with pytest.raises(DivergenceError):
        sgd_step(p, {'a.weight': np.array([np.nan, 0.0])}, {}, SgdConfig())
    np.testing.assert_array_equal(p['a.weight'].data, [1.0, 1.0])


def test_sgd_config_validation():
    with pytest.raises(RejectedInputError):
        SgdConfig(lr=0)
    with pytest.raises(RejectedInputError):
        SgdConfig(momentum=1.0)
    with pytest.raises(RejectedInputError):
        SgdConfig(batch_size=0)


def test_decay_mask_matches_registry(tiny_model):
    mask = decay_mask(tiny_model.weights)
    assert set(mask) == set(tiny_model.weights)
    for name, decayed in mask.items():
        assert decayed == name.endswith('.weight')
    # the TD branch of the decoder has no bias
    assert 'seg.l1.td.bias' not in mask


### Checkpoints ###

def test_checkpoint_round_trip(tmp_path, tiny_model):
    rng = np.random.default_rng(4)
    rng.random(3)
    ckpt = Checkpoint(weights={k: p.data for k, p in tiny_model.weights.items()},
                      velocities={'bu.conv1.weight': np.full((4, 3, 3, 3), 0.5)}, epoch=7,
                      config_hash=config_hash({'seed': 1}, 'arch'), phase='train',
                      rng_state=rng.bit_generator.state)
    data = encode_checkpoint(ckpt)
    assert data[:8] == b'SELSEGCK'
    fname = str(tmp_path / 'model.ckpt')
    save_checkpoint(fname, ckpt)
    loaded = load_checkpoint(fname)
    assert encode_checkpoint(loaded) == data
    assert (loaded.epoch, loaded.phase, loaded.config_hash) == (7, 'train', ckpt.config_hash)
    for name, value in ckpt.weights.items():
        np.testing.assert_array_equal(loaded.weights[name], value)
    restored = np.random.default_rng(0)
    restored.bit_generator.state = loaded.rng_state
    assert restored.random() == rng.random()


def test_checkpoint_rejects_bad_input(tmp_path):
    with pytest.raises(RejectedInputError):
        decode_checkpoint(b'NOTACKPT' + bytes(100))
    with pytest.raises(RejectedInputError):
        load_checkpoint(str(tmp_path / 'missing.ckpt'))


def test_config_hash_changes():
    assert config_hash({'lr': 0.1}) == config_hash({'lr': 0.1})
    assert config_hash({'lr': 0.1}) != config_hash({'lr': 0.2})
    assert config_hash({'lr': 0.1}, 'a') != config_hash({'lr': 0.1}, 'b')
    assert len(config_hash({})) == 64


### Training ###

def _pretrain(spec, samples, epochs=1, seed=0, **kwargs):
    model = SSN(spec, n_classes=4, seed=1)
    ckpt = pretrain_lsd(samples, model, SgdConfig(lr=0.01, batch_size=4, epochs=epochs), mean_pixel(samples),
                        seed=seed, target=16, **kwargs)
    return model, ckpt


def test_make_batch(tiny_samples):
    x, masks, boxes, classes = make_batch(tiny_samples, [0, 3], mean_pixel(tiny_samples), 16)
    assert x.shape == (2, 3, 16, 16) and masks.shape == (2, 16, 16)
    assert len(boxes) == len(classes) == 2
    x2, _, _, _ = make_batch(tiny_samples, [0, 3], mean_pixel(tiny_samples), 16)
    np.testing.assert_array_equal(x, x2)


def test_pretrain_smoke(tiny_spec, tiny_samples):
    model, ckpt = _pretrain(tiny_spec, tiny_samples)
    assert list(ckpt.history.columns) == ['epoch', 'lsd_loss', 'lsd_mean_accuracy', 'lsd_mean_iou']
    assert len(ckpt.history) == 1
    assert np.isfinite(ckpt.history['lsd_loss']).all()
    assert ckpt.phase == 'pretrain' and ckpt.epoch == 1
    # the decoder is left untouched
    fresh = SSN(tiny_spec, n_classes=4, seed=1)
    np.testing.assert_array_equal(model.weights['seg.head.pred.weight'].data,
                                  fresh.weights['seg.head.pred.weight'].data)
    assert not np.array_equal(model.weights['bu.conv1.weight'].data, fresh.weights['bu.conv1.weight'].data)


def test_pretrain_is_deterministic(tiny_spec, tiny_samples):
    _, a = _pretrain(tiny_spec, tiny_samples, seed=3)
    _, b = _pretrain(tiny_spec, tiny_samples, seed=3)
    assert encode_checkpoint(a) == encode_checkpoint(b)


def test_resume_matches_uninterrupted(tmp_path, tiny_spec, tiny_samples):
    _, full = _pretrain(tiny_spec, tiny_samples, epochs=2)
    _, first = _pretrain(tiny_spec, tiny_samples, epochs=1)
    save_checkpoint(str(tmp_path / 'first.ckpt'), first)
    first = load_checkpoint(str(tmp_path / 'first.ckpt'))
    model = SSN(tiny_spec, n_classes=4, seed=1, weights=first.weights)
    resumed = pretrain_lsd(tiny_samples, model, SgdConfig(lr=0.01, batch_size=4, epochs=2),
                           mean_pixel(tiny_samples), seed=0, target=16, checkpoint=first)
    assert len(resumed.history) == 1 and resumed.history['epoch'].iloc[0] == 1
    for name, value in full.weights.items():
        np.testing.assert_array_equal(resumed.weights[name], value)


def test_resume_rejects_other_config(tiny_spec, tiny_samples):
    _, first = _pretrain(tiny_spec, tiny_samples, config_digest='a' * 64)
    with pytest.raises(RejectedInputError):
        _pretrain(tiny_spec, tiny_samples, epochs=2, checkpoint=first, config_digest='b' * 64)


def test_pretrain_diverges_on_nan(tiny_spec, tiny_samples):
    model = SSN(tiny_spec, n_classes=4, seed=1)
    model.weights['lsd.g0.pred.bias'].data[:] = np.nan
    with pytest.raises(DivergenceError):
        pretrain_lsd(tiny_samples, model, SgdConfig(epochs=1), mean_pixel(tiny_samples), target=16)


def test_multiloss_updates_all_groups(tiny_spec, tiny_samples):
    model = SSN(tiny_spec, n_classes=4, modulation='mul', seed=1)
    initial = {k: p.data.copy() for k, p in model.weights.items()}
    ckpt = train_multiloss(tiny_samples, model, SgdConfig(lr=0.01, weight_decay=0.0, epochs=1),
                           mean_pixel(tiny_samples), strategy='gt', target=16)
    assert list(ckpt.history.columns) == ['epoch', 'lsd_loss', 'seg_loss', 'mean_accuracy', 'mean_iou']
    assert np.isfinite(ckpt.history[['lsd_loss', 'seg_loss']].values).all()
    for group in ('bu', 'lsd', 'seg'):
        assert any(not np.array_equal(p.data, initial[k]) for k, p in model.parameters((group,)).items())


def test_alpha_loss_zero_matches_lsd_training(tiny_spec, tiny_samples):
    cfg = SgdConfig(lr=0.01, epochs=1)
    mp = mean_pixel(tiny_samples)
    lsd_only = SSN(tiny_spec, n_classes=4, seed=1)
    pretrain_lsd(tiny_samples, lsd_only, cfg, mp, seed=2, target=16)
    joint = SSN(tiny_spec, n_classes=4, seed=1)
    train_multiloss(tiny_samples, joint, cfg, mp, loss_cfg=LossConfig(alpha_loss=0.0), seed=2, target=16)
    for name, p in lsd_only.parameters(('bu', 'lsd')).items():
        np.testing.assert_allclose(joint.weights[name].data, p.data, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize('phase', ['pretrain', 'train'])
def test_lsd_targets_sampled_per_image(tiny_spec, tiny_samples, monkeypatch, phase):
    batches = []

    def recording_lsd_loss(scores, targets):
        batches.append(np.array(targets))
        return lsd_loss(scores, targets)

    monkeypatch.setattr(training, 'lsd_loss', recording_lsd_loss)
    model = SSN(tiny_spec, n_classes=4, seed=1)
    loss_cfg = LossConfig(max_targets=12)
    run = pretrain_lsd if phase == 'pretrain' else train_multiloss
    run(tiny_samples, model, SgdConfig(lr=0.01, batch_size=4, epochs=1), mean_pixel(tiny_samples),
        loss_cfg=loss_cfg, target=16)
    assert len(batches) == 2
    for kept in batches:
        assert kept.shape[0] == 4
        n_pos = ((kept != 0) & (kept != 255)).sum(axis=1)
        n_neg = (kept == 0).sum(axis=1)
        assert ((n_pos + n_neg) <= 12).all()
        assert ((n_pos == 0) | (n_neg <= 3 * n_pos)).all()
    # every image gets its own budget, so a batch keeps more than one budget
    assert any((kept != 255).sum() > 12 for kept in batches)


def test_strategies_share_upstream_tensors(tiny_model, tiny_samples):
    x, _, boxes, classes = make_batch(tiny_samples, [0, 1], mean_pixel(tiny_samples), 16, train=False)
    targets = tiny_model.unit_targets(boxes, classes, 16, 16)
    gt = tiny_model.forward(Tensor(x), strategy='gt', targets=targets)
    th = tiny_model.forward(Tensor(x), strategy='threshold', theta_attention=0.3)
    for name in gt.trace.order:
        np.testing.assert_array_equal(gt.trace[name].data, th.trace[name].data)
    for a, b in zip(gt.scores.maps, th.scores.maps):
        np.testing.assert_array_equal(a.data, b.data)
    # gates are plain arrays outside the differentiation graph
    assert all(isinstance(g, np.ndarray) for g in gt.gating.gates.values())


### Evaluation ###

class _OracleModel:
    """Predicts the transformed ground truth of each sample in order."""
    n_classes = 4

    def __init__(self, masks):
        self.masks = list(masks)

    def unit_targets(self, *args):
        return None

    def predict(self, x, **kwargs):
        batch, self.masks = self.masks[:len(x.data)], self.masks[len(x.data):]
        return np.stack([np.where(m == 255, 0, m) for m in batch])


def test_evaluate_oracle_scores_one(tiny_samples):
    mp = mean_pixel(tiny_samples)
    masks = [eval_transform(s, 16, mp).mask.astype(np.int64) for s in tiny_samples]
    summary, predictions = evaluate(_OracleModel(masks), tiny_samples, mp, target=16, batch_size=3)
    assert summary['mean_iou'] == 1.0 and summary['mean_accuracy'] == 1.0
    assert len(predictions) == len(tiny_samples)


def test_evaluate_model(tiny_model, tiny_samples):
    mp = mean_pixel(tiny_samples)
    summary, predictions = evaluate(tiny_model, tiny_samples, mp, target=16, strategy='top1')
    assert 0.0 <= summary['mean_iou'] <= 1.0
    assert all(p.shape == (16, 16) for p in predictions)
    clean, _ = evaluate(tiny_model, tiny_samples, mp, target=16, strategy='top1',
                        perturbation=PerturbSpec('uniform', 0.0))
    np.testing.assert_equal(clean, summary)
    gt_summary, _ = evaluate(tiny_model, tiny_samples, mp, target=16, strategy='gt')
    assert set(gt_summary) == set(summary)
