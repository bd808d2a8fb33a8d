"""
Two-phase SSN optimisation: LSD pre-training of W_BU and W_LSD, then joint
multi-loss training of W_BU, W_LSD and W_seg, both with momentum SGD.
"""

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .anchors import LossConfig, sample_batch_targets
from .checkpoint import Checkpoint
from .decoder import predict_mask
from .losses import lsd_loss, seg_loss, total_loss
from .metrics import ConfusionMeter
from .perturb import perturb
from .tensor import Tensor
from .transforms import train_transform, eval_transform, normalize_image
from .errors import DivergenceError, RejectedInputError


@dataclass
class SgdConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    epochs: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 0:
            raise RejectedInputError('Invalid SGD configuration')
        if not 0 <= self.momentum < 1:
            raise RejectedInputError('momentum must lie in [0, 1)')


def decay_mask(params):
    """Parameter name -> True if weight decay applies (kernels yes, biases no)."""
    return {name: not name.endswith('.bias') for name in params}


def sgd_step(params, grads, velocities, cfg):
    """
    In-place momentum SGD update.

    v <- momentum * v + grad + weight_decay * param (decay on kernels only)
    param <- param - lr * v

    Input:
        params: dict name -> Tensor
        grads: dict name -> array (missing or None entries count as zero)
        velocities: dict name -> array, created on first use
        cfg: SgdConfig
    """
    bad = [name for name, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise DivergenceError(f'Non-finite gradients in {bad}')
    decay = decay_mask(params)
    for name, p in params.items():
        g = grads.get(name)
        step = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).copy()
        if decay[name]:
            step += cfg.weight_decay * p.data
        v = velocities.get(name)
        v = step if v is None else cfg.momentum * v + step
        velocities[name] = v
        p.data -= cfg.lr * v


def make_batch(samples, indices, mean_pixel, target, train=True, seed=0, epoch=0):
    """
    Transformed, normalised batch.

    Sample i of an epoch draws its crop from default_rng([seed, epoch, i]).

    Return:
        x: array (N, 3, L, L)
        masks: int array (N, L, L)
        boxes, classes: per-sample lists
    """
    xs, masks, boxes, classes = [], [], [], []
    for i in indices:
        if train:
            s = train_transform(samples[i], target, np.random.default_rng([seed, epoch, int(i)]))
        else:
            s = eval_transform(samples[i], target, mean_pixel)
        xs.append(normalize_image(s.image, mean_pixel))
        masks.append(s.mask.astype(np.int64))
        boxes.append(s.boxes)
        classes.append(s.classes)
    return np.stack(xs), np.stack(masks), boxes, classes


def _grads(params):
    return {name: p.grad for name, p in params.items()}


def _unit_meter(scores, targets, n_classes):
    meter = ConfusionMeter(n_classes)
    meter.update(scores.probabilities().argmax(axis=2), targets)
    return meter


def _resume_state(checkpoint, phase, config_digest):
    if checkpoint is None or checkpoint.phase != phase:
        return 0, {}, None
    if checkpoint.config_hash != config_digest:
        raise RejectedInputError('Checkpoint was written with a different configuration')
    return checkpoint.epoch, dict(checkpoint.velocities), checkpoint.rng_state


def _rng(seed, state):
    rng = np.random.default_rng(seed)
    if state:
        rng.bit_generator.state = state
    return rng


def pretrain_lsd(samples, model, cfg, mean_pixel, loss_cfg=None, seed=0, target=64,
                 checkpoint=None, config_digest='0' * 64, verbose=False):
    """
    Train W_BU and W_LSD against the LSD loss.

    Anchor targets are assigned per batch and negatives re-sampled every step.

    Input:
        samples: list of Sample (training split)
        model: SSN
        cfg: SgdConfig
        mean_pixel: dataset mean pixel (3,)
        loss_cfg: LossConfig
        seed: seed for shuffling, crops and target sampling
        target: training crop side L
        checkpoint: optional pretraining Checkpoint to resume from
        config_digest: config hash stored in the checkpoint

    Return:
        Checkpoint (history: per-epoch loss, LSD mean accuracy and IoU)
    """
    loss_cfg = loss_cfg or LossConfig()
    params = model.parameters(('bu', 'lsd'))
    start, velocities, state = _resume_state(checkpoint, 'pretrain', config_digest)
    rng = _rng(seed, state)
    records = []
    for epoch in range(start, cfg.epochs):
        if verbose:
            print(f'Computing LSD pretraining epoch {epoch + 1}/{cfg.epochs}...')
        order = rng.permutation(len(samples))
        losses, meter = [], ConfusionMeter(model.n_classes)
        for b in range(0, len(order), cfg.batch_size):
            x, _, boxes, classes = make_batch(samples, order[b:b + cfg.batch_size], mean_pixel, target,
                                              True, seed, epoch)
            model.zero_grad()
            trace, scores = model.detect(Tensor(x))
            targets = model.unit_targets(boxes, classes, x.shape[2], x.shape[3], loss_cfg)
            loss = lsd_loss(scores, sample_batch_targets(targets, rng, loss_cfg))
            if not np.isfinite(loss.item()):
                raise DivergenceError(f'LSD loss became {loss.item()} in epoch {epoch}')
            loss.backward()
            sgd_step(params, _grads(params), velocities, cfg)
            losses.append(loss.item())
            meter.confusion += _unit_meter(scores, targets, model.n_classes).confusion
        records.append({'epoch': epoch, 'lsd_loss': float(np.mean(losses)),
                        'lsd_mean_accuracy': meter.mean_pixel_accuracy(), 'lsd_mean_iou': meter.mean_iou()})
        if verbose:
            print(f'Done, loss {records[-1]["lsd_loss"]:.4f}, LSD mean IoU {records[-1]["lsd_mean_iou"]:.4f}')
    ckpt = Checkpoint(weights={k: p.data.copy() for k, p in model.weights.items()},
                      velocities=velocities, epoch=max(cfg.epochs, start), config_hash=config_digest,
                      phase='pretrain', rng_state=rng.bit_generator.state)
    ckpt.history = pd.DataFrame(records, columns=['epoch', 'lsd_loss', 'lsd_mean_accuracy', 'lsd_mean_iou'])
    return ckpt


def train_multiloss(samples, model, cfg, mean_pixel, loss_cfg=None, strategy='threshold', theta_attention=0.9,
                    inputs='both', seed=0, target=64, checkpoint=None, config_digest='0' * 64, verbose=False):
    """
    Joint training of all SSN weights on L_D + alpha_loss * L_S.

    Each step runs the BU pass, LSD head, attention initialisation, TD pass and
    decoder with the current weights. Gates enter the decoder as constants.

    Input:
        model: SSN, typically loaded from a pretraining checkpoint
        strategy: attention initialisation ('gt', 'top1', 'threshold')
        inputs: decoder inputs ('both', 'bu', 'td')
        checkpoint: optional joint-training Checkpoint to resume from
        (other arguments as in pretrain_lsd)

    Return:
        Checkpoint (history: per-epoch losses, segmentation mean accuracy and IoU)
    """
    loss_cfg = loss_cfg or LossConfig()
    params = model.parameters()
    start, velocities, state = _resume_state(checkpoint, 'train', config_digest)
    rng = _rng(seed, state)
    records = []
    for epoch in range(start, cfg.epochs):
        if verbose:
            print(f'Computing joint training epoch {epoch + 1}/{cfg.epochs}...')
        order = rng.permutation(len(samples))
        lsd_losses, seg_losses, meter = [], [], ConfusionMeter(model.n_classes)
        for b in range(0, len(order), cfg.batch_size):
            x, masks, boxes, classes = make_batch(samples, order[b:b + cfg.batch_size], mean_pixel, target,
                                                  True, seed, epoch)
            model.zero_grad()
            targets = model.unit_targets(boxes, classes, x.shape[2], x.shape[3], loss_cfg)
            out = model.forward(Tensor(x), strategy=strategy, targets=targets,
                                theta_attention=theta_attention, inputs=inputs)
            loss_d = lsd_loss(out.scores, sample_batch_targets(targets, rng, loss_cfg))
            loss_s = seg_loss(out.logits, masks)
            loss = total_loss(loss_d, loss_s, loss_cfg.alpha_loss)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f'Total loss became {loss.item()} in epoch {epoch}')
            loss.backward()
            sgd_step(params, _grads(params), velocities, cfg)
            lsd_losses.append(loss_d.item())
            seg_losses.append(loss_s.item())
            meter.update(predict_mask(out.logits), masks)
        records.append({'epoch': epoch, 'lsd_loss': float(np.mean(lsd_losses)),
                        'seg_loss': float(np.mean(seg_losses)),
                        'mean_accuracy': meter.mean_pixel_accuracy(), 'mean_iou': meter.mean_iou()})
        if verbose:
            print(f'Done, seg loss {records[-1]["seg_loss"]:.4f}, mean IoU {records[-1]["mean_iou"]:.4f}')
    ckpt = Checkpoint(weights={k: p.data.copy() for k, p in model.weights.items()},
                      velocities=velocities, epoch=max(cfg.epochs, start), config_hash=config_digest,
                      phase='train', rng_state=rng.bit_generator.state)
    ckpt.history = pd.DataFrame(records, columns=['epoch', 'lsd_loss', 'seg_loss', 'mean_accuracy', 'mean_iou'])
    return ckpt


def evaluate(model, samples, mean_pixel, target=64, strategy='threshold', theta_attention=0.9,
             inputs='both', perturbation=None, batch_size=4, loss_cfg=None):
    """
    Dataset-level segmentation metrics under the eval transform.

    Input:
        perturbation: optional PerturbSpec applied to each transformed image;
            sample i uses default_rng([perturbation.seed, i])

    Return:
        summary: dict from ConfusionMeter.summary
        masks: list of predicted masks (L, L)
    """
    meter = ConfusionMeter(model.n_classes)
    predictions = []
    for b in range(0, len(samples), batch_size):
        indices = range(b, min(b + batch_size, len(samples)))
        xs, masks, boxes, classes = [], [], [], []
        for i in indices:
            s = eval_transform(samples[i], target, mean_pixel)
            image = s.image
            if perturbation is not None:
                image = perturb(image, perturbation, np.random.default_rng([perturbation.seed, i]))
            xs.append(normalize_image(image, mean_pixel))
            masks.append(s.mask.astype(np.int64))
            boxes.append(s.boxes)
            classes.append(s.classes)
        x = np.stack(xs)
        targets = model.unit_targets(boxes, classes, x.shape[2], x.shape[3], loss_cfg) if strategy == 'gt' else None
        pred = model.predict(Tensor(x), strategy=strategy, targets=targets,
                             theta_attention=theta_attention, inputs=inputs)
        for p, m in zip(pred, masks):
            meter.update(p, m)
            predictions.append(p)
    return meter.summary(), predictions
