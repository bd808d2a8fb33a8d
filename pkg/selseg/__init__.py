"""
Selective Segmentation Network (SSN) at desk scale.
----------------------------------------------------

This Python package implements semantic segmentation with top-down selection:
a bottom-up encoder produces hidden activities, a loose spatial detection (LSD)
head predicts coarse class scores at three receptive-field scales, an attention
signal chosen from the LSD scores is propagated top-down through the encoder by
a three-stage selection, and a segmentation decoder combines the BU features
with the resulting gating activities into a full-resolution label map.

Main building blocks:
- Tensor autodiff, im2col convolutions and max pooling (see 'tensor')
- Architecture files, layer specs and receptive fields (see 'architecture', 'encoder')
- LSD head and anchor geometry (see 'lsd', 'anchors')
- Attention initialisation strategies ground truth, top-1 and threshold (see 'attention')
- Top-down selection (see 'selection')
- Gated segmentation decoder (see 'decoder')
- Losses, metrics, synthetic data, transforms and perturbations
- Two-phase SGD training and checkpoints (see 'training', 'checkpoint')

Experiments are run from a settings yaml file:

selseg [command] -s fname_settings

with commands synth, pretrain, train, eval, perturb, ablate and gate-dump
(Default settings file: settings/settings_ssn.yaml).
"""

__version__ = "0.1.0"
__title__ = "selseg: Selective Segmentation Network with top-down selection"
__description__ = """
This Python package trains and evaluates a segmentation network that gates its
bottom-up features with a top-down selection pass seeded by coarse detections.
"""
__doc__ = __description__

__author__ = "Sebastian Haan"

__license__ = "LGPL-3.0 License"
__copyright__ = "Copyright (c) 2022 Sebastian Haan"
