"""
Selective Segmentation Network (SSN) at desk scale.
----------------------------------------------------

This Python package trains and evaluates a semantic segmentation network that
combines a bottom-up (BU) feature encoder, a loose spatial detection (LSD) head,
a top-down (TD) selection pass and a gated segmentation decoder.

## Commands

- synth: generate the synthetic shapes dataset (train and val splits)
- pretrain: train BU encoder and LSD head on the detection loss
- train: joint multi-loss training of all weights, starting from pretrain.ckpt
- eval: segmentation metrics on a split plus predicted masks as PGM files
- perturb: metric degradation over perturbation kinds and strengths
- ablate: train and evaluate all combinations of attention initialisation,
  modulation, decoder levels and decoder inputs
- gate-dump: per-layer TD gating maps of one sample as PGM files

## Usage

selseg [command] -s fname_settings [flags]
(or: python -m selseg.selseg [command] ...)

User settings such as dataset/output paths and all other options are set in the settings file
(Default filename: settings/settings_ssn.yaml). Command line flags override single settings,
e.g. selseg synth --seed 7 --n 10.
Each run writes its merged settings as config.yaml into the output directory;
rerunning with '-s <outpath>/config.yaml' reproduces the outputs.

The environment variable SELSEG_OUTPUT_ROOT prefixes relative dataset and output paths.

Exit status: 0 on success, 1 for invalid settings, 2 for any other error.
"""

import os
import sys
import yaml
import argparse
import numpy as np
import pandas as pd
from types import SimpleNamespace

from .architecture import load_network, with_design, format_network, LSD_DESIGNS
from .anchors import LossConfig
from .checkpoint import config_hash, save_checkpoint, load_checkpoint
from .dataio import save_dataset, load_dataset, atomic_write, write_pgm, write_ppm
from .decoder import MODULATIONS, DECODER_INPUTS
from .lsd import lsd_map_shapes
from .network import SSN, strategy_fullnames
from .attention import __all__ as _strategy_names
from .perturb import PerturbSpec, PERTURB_KINDS
from .simdata import synth_generate
from .tensor import Tensor
from .training import SgdConfig, pretrain_lsd, train_multiloss, evaluate
from .transforms import eval_transform, normalize_image
from .utils import plot_training_curves, plot_robustness, plot_ablation_map, plot_gating_panels, gate_to_plane
from .errors import ConfigError, SelsegError

_fname_settings = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'settings', 'settings_ssn.yaml')

COMMANDS = ('synth', 'pretrain', 'train', 'eval', 'perturb', 'ablate', 'gate-dump')

# settings that change the trained weights, used for the checkpoint config hash
_PRETRAIN_KEYS = ('seed', 'n_classes', 'target_size', 'lsd_design', 'theta_pos', 'theta_neg',
                  'max_targets', 'neg_ratio', 'lr', 'momentum', 'weight_decay', 'batch_size')
_TRAIN_KEYS = _PRETRAIN_KEYS + ('init', 'theta_attention', 'alpha_td', 'modulation', 'levels',
                                'inputs', 'alpha_loss')


def default_settings():
	"""Shipped default settings as dict."""
	with open(_fname_settings, 'r') as f:
		return yaml.load(f, Loader=yaml.FullLoader)


def load_settings(fname_settings=None, overrides=None):
	"""
	Merge shipped defaults, a user settings file and command line overrides.

	Input:
		fname_settings: path and filename to yaml settings file (optional)
		overrides: dict of settings replacing file values

	Return:
		settings as SimpleNamespace
	"""
	settings = default_settings()
	if fname_settings is not None and os.path.abspath(fname_settings) != _fname_settings:
		if not os.path.isfile(fname_settings):
			raise ConfigError(f'Settings file {fname_settings} not found')
		with open(fname_settings, 'r') as f:
			user = yaml.load(f, Loader=yaml.FullLoader) or {}
		if not isinstance(user, dict):
			raise ConfigError(f'Settings file {fname_settings} must hold a mapping')
		unknown = sorted(set(user) - set(settings))
		if unknown:
			raise ConfigError(f'Unknown settings {unknown} in {fname_settings}')
		settings.update(user)
	settings.update(overrides or {})
	# Parse settings dictionary as namespace (settings are available as
	# settings.variable_name rather than settings['variable_name'])
	return SimpleNamespace(**settings)


def _check(condition, message):
	if not condition:
		raise ConfigError(message)


def validate_config(settings):
	"""
	Validate merged settings before any work is done.

	Return:
		NetworkSpec of the configured architecture (with the configured LSD design)
	"""
	s = settings
	_check(s.command in COMMANDS, f'Unknown command {s.command}, expected one of {COMMANDS}')
	for key in ('seed', 'n_train', 'n_val', 'canvas', 'n_classes', 'target_size', 'levels', 'max_targets',
				'neg_ratio', 'batch_size', 'pretrain_epochs', 'train_epochs', 'sample_index'):
		_check(isinstance(getattr(s, key), int) and not isinstance(getattr(s, key), bool),
			   f'{key} must be an integer, got {getattr(s, key)!r}')
	_check(s.seed >= 0, 'seed must be non-negative')
	_check(s.n_train >= 1 and s.n_val >= 0, 'Need n_train >= 1 and n_val >= 0')
	_check(s.canvas >= 16, 'canvas must be at least 16 pixels')
	_check(s.n_classes >= 2, 'n_classes must be at least 2')
	_check(s.target_size >= 1, 'target_size must be positive')
	_check(s.lsd_design in LSD_DESIGNS, f'lsd_design must be one of {LSD_DESIGNS}')
	_check(s.init in _strategy_names, f'init must be one of {_strategy_names}')
	_check(0 < s.theta_attention < 1, 'theta_attention must lie in (0, 1)')
	_check(0 <= s.alpha_td <= 1, 'alpha_td must lie in [0, 1]')
	_check(s.modulation in MODULATIONS, f'modulation must be one of {MODULATIONS}')
	_check(s.inputs in DECODER_INPUTS, f'inputs must be one of {DECODER_INPUTS}')
	_check(s.alpha_loss >= 0, 'alpha_loss must be non-negative')
	_check(0 <= s.theta_neg < s.theta_pos <= 1, 'Need 0 <= theta_neg < theta_pos <= 1')
	_check(s.max_targets >= 1 and s.neg_ratio >= 0, 'Need max_targets >= 1 and neg_ratio >= 0')
	_check(s.lr > 0 and s.weight_decay >= 0, 'Need lr > 0 and weight_decay >= 0')
	_check(0 <= s.momentum < 1, 'momentum must lie in [0, 1)')
	_check(s.batch_size >= 1, 'batch_size must be positive')
	_check(s.pretrain_epochs >= 0 and s.train_epochs >= 0, 'Epoch counts must be non-negative')
	_check(set(s.perturb_kinds) <= set(PERTURB_KINDS), f'perturb_kinds must be taken from {PERTURB_KINDS}')
	_check(all(0 <= sigma <= 1 for sigma in s.sigmas), 'sigmas must lie in [0, 1]')
	_check(set(s.ablate_init) <= set(_strategy_names), f'ablate_init must be taken from {_strategy_names}')
	_check(set(s.ablate_modulation) <= set(MODULATIONS), f'ablate_modulation must be taken from {MODULATIONS}')
	_check(set(s.ablate_inputs) <= set(DECODER_INPUTS), f'ablate_inputs must be taken from {DECODER_INPUTS}')
	_check(s.split in ('train', 'val'), 'split must be train or val')
	_check(s.sample_index >= 0, 'sample_index must be non-negative')
	try:
		spec = with_design(load_network(s.arch), s.lsd_design)
		spec.shapes(s.target_size, s.target_size)
		lsd_map_shapes(spec, s.target_size, s.target_size, s.n_classes)
	except SelsegError as e:
		raise ConfigError(f'Architecture {s.arch}: {e}')
	n_levels = len(spec.levels)
	_check(1 <= s.levels <= n_levels, f'levels must lie in 1..{n_levels} for architecture {s.arch}')
	if s.command == 'ablate':
		_check(all(1 <= m <= n_levels for m in s.ablate_levels), f'ablate_levels must lie in 1..{n_levels}')
	return spec


def _resolve(path):
	root = os.environ.get('SELSEG_OUTPUT_ROOT')
	if root and not os.path.isabs(path):
		return os.path.join(root, path)
	return path


def _write_csv(df, fname, **kwargs):
	atomic_write(fname, df.to_csv(index=False, **kwargs))


def _digest(settings, spec, keys):
	return config_hash({key: getattr(settings, key) for key in keys}, format_network(spec))


def _loss_config(settings):
	return LossConfig(alpha_loss=settings.alpha_loss, theta_pos=settings.theta_pos, theta_neg=settings.theta_neg,
					  max_targets=settings.max_targets, neg_ratio=settings.neg_ratio)


def _sgd_config(settings, epochs):
	return SgdConfig(lr=settings.lr, momentum=settings.momentum, weight_decay=settings.weight_decay,
					 batch_size=settings.batch_size, epochs=epochs)


def _mean_pixel(settings):
	"""Dataset mean pixel as stored with the training split."""
	fname = os.path.join(settings.dataset, 'train', 'meta.yaml')
	if not os.path.isfile(fname):
		raise ConfigError(f'Dataset {settings.dataset} has no train split, run synth first')
	with open(fname, 'r') as f:
		meta = yaml.load(f, Loader=yaml.FullLoader)
	return np.asarray(meta['mean_pixel'], dtype=np.float64)


def _model(settings, spec, modulation=None, levels=None, weights=None):
	return SSN(spec, n_classes=settings.n_classes, modulation=modulation or settings.modulation,
			   n_levels=levels or settings.levels, alpha_td=settings.alpha_td, seed=settings.seed, weights=weights)


def _encoder_weights(checkpoint):
	"""BU and LSD weights of a checkpoint; decoder weights depend on modulation and levels."""
	return {k: v for k, v in checkpoint.weights.items() if k.split('.')[0] in ('bu', 'lsd')}


def _checkpoint_path(settings, default):
	return _resolve(settings.checkpoint) if settings.checkpoint else os.path.join(settings.outpath, default)


def _trained_model(settings, spec):
	fname = _checkpoint_path(settings, 'train.ckpt')
	print(f'Loading checkpoint {fname} ...')
	ckpt = load_checkpoint(fname)
	model = _model(settings, spec)
	model.load_weights(ckpt.weights, strict=True)
	return model


def cmd_synth(settings, spec):
	"""Generate train and val splits of the synthetic dataset."""
	print(f'Generating {settings.n_train} + {settings.n_val} synthetic samples ...')
	samples = synth_generate(settings.seed, settings.n_train + settings.n_val, settings.canvas, settings.n_classes)
	meta = {'seed': settings.seed, 'canvas': settings.canvas, 'n_classes': settings.n_classes}
	os.makedirs(settings.dataset, exist_ok=True)
	save_dataset(settings.dataset, 'train', samples[:settings.n_train], meta)
	save_dataset(settings.dataset, 'val', samples[settings.n_train:], meta)
	print(f'Done, dataset written to {settings.dataset}')


def _run_pretrain(settings, spec, samples, mean_pixel, resume=None):
	model = _model(settings, spec)
	print(f'Computing LSD pretraining ({model.parameter_count(("bu", "lsd"))} parameters) ...')
	ckpt = pretrain_lsd(samples, model, _sgd_config(settings, settings.pretrain_epochs), mean_pixel,
						_loss_config(settings), seed=settings.seed, target=settings.target_size, checkpoint=resume,
						config_digest=_digest(settings, spec, _PRETRAIN_KEYS), verbose=True)
	return ckpt


def cmd_pretrain(settings, spec):
	"""LSD pretraining; writes pretrain.ckpt and pretrain_history.csv."""
	samples, _ = load_dataset(settings.dataset, 'train')
	resume = load_checkpoint(_resolve(settings.resume)) if settings.resume else None
	ckpt = _run_pretrain(settings, spec, samples, _mean_pixel(settings), resume)
	save_checkpoint(os.path.join(settings.outpath, 'pretrain.ckpt'), ckpt)
	_write_csv(ckpt.history, os.path.join(settings.outpath, 'pretrain_history.csv'))
	if len(ckpt.history) > 0:
		plot_training_curves(ckpt.history, ['lsd_loss', 'lsd_mean_accuracy', 'lsd_mean_iou'],
							 settings.outpath, 'Pretrain_history.png')
		print(ckpt.history.to_string(index=False))


def _run_train(settings, spec, samples, mean_pixel, pretrained, init, modulation, levels, inputs, resume=None):
	model = _model(settings, spec, modulation, levels)
	if resume is not None and resume.phase == 'train':
		model.load_weights(resume.weights, strict=True)
	else:
		model.load_weights(_encoder_weights(pretrained))
	variant = SimpleNamespace(**{**vars(settings), 'init': init, 'modulation': modulation,
								 'levels': levels, 'inputs': inputs})
	print(f'Computing joint training: init {strategy_fullnames[init]}, modulation {modulation}, '
		  f'levels {levels}, inputs {inputs} ...')
	return model, train_multiloss(samples, model, _sgd_config(settings, settings.train_epochs), mean_pixel,
								  _loss_config(settings), strategy=init, theta_attention=settings.theta_attention,
								  inputs=inputs, seed=settings.seed, target=settings.target_size, checkpoint=resume,
								  config_digest=_digest(variant, spec, _TRAIN_KEYS), verbose=True)


def cmd_train(settings, spec):
	"""Joint multi-loss training from pretrain.ckpt; writes train.ckpt and train_history.csv."""
	samples, _ = load_dataset(settings.dataset, 'train')
	pretrained = load_checkpoint(_checkpoint_path(settings, 'pretrain.ckpt'))
	resume = load_checkpoint(_resolve(settings.resume)) if settings.resume else None
	_, ckpt = _run_train(settings, spec, samples, _mean_pixel(settings), pretrained, settings.init,
						 settings.modulation, settings.levels, settings.inputs, resume)
	save_checkpoint(os.path.join(settings.outpath, 'train.ckpt'), ckpt)
	_write_csv(ckpt.history, os.path.join(settings.outpath, 'train_history.csv'))
	if len(ckpt.history) > 0:
		plot_training_curves(ckpt.history, ['lsd_loss', 'seg_loss', 'mean_accuracy', 'mean_iou'],
							 settings.outpath, 'Train_history.png')
		print(ckpt.history.to_string(index=False))


def _evaluate(settings, model, samples, mean_pixel, perturbation=None, init=None, inputs=None):
	return evaluate(model, samples, mean_pixel, target=settings.target_size, strategy=init or settings.init,
					theta_attention=settings.theta_attention, inputs=inputs or settings.inputs,
					perturbation=perturbation, batch_size=settings.batch_size, loss_cfg=_loss_config(settings))


def cmd_eval(settings, spec):
	"""Metrics table eval_metrics.csv and predicted masks masks/00000.pgm, ..."""
	samples, _ = load_dataset(settings.dataset, settings.split)
	model = _trained_model(settings, spec)
	print(f'Computing evaluation on {len(samples)} {settings.split} samples ...')
	summary, masks = _evaluate(settings, model, samples, _mean_pixel(settings))
	maskdir = os.path.join(settings.outpath, 'masks')
	os.makedirs(maskdir, exist_ok=True)
	for i, mask in enumerate(masks):
		write_pgm(os.path.join(maskdir, f'{i:05d}.pgm'), mask.astype(np.uint8))
	_write_csv(pd.DataFrame([summary]), os.path.join(settings.outpath, 'eval_metrics.csv'))
	print(f'Done, mean accuracy {summary["mean_accuracy"]:.4f}, mean IoU {summary["mean_iou"]:.4f}')


def cmd_perturb(settings, spec):
	"""Metric degradation per perturbation kind and strength; writes perturb_metrics.csv."""
	samples, _ = load_dataset(settings.dataset, settings.split)
	model = _trained_model(settings, spec)
	mean_pixel = _mean_pixel(settings)
	print('Computing unperturbed reference ...')
	reference, _ = _evaluate(settings, model, samples, mean_pixel)
	rows = []
	for kind in settings.perturb_kinds:
		for sigma in settings.sigmas:
			print(f'Computing {kind} perturbation, sigma {sigma} ...')
			summary, _ = _evaluate(settings, model, samples, mean_pixel, PerturbSpec(kind, float(sigma), settings.seed))
			rows.append({'kind': kind, 'sigma': float(sigma), **summary,
						 'degradation': reference['mean_iou'] - summary['mean_iou']})
	dfperturb = pd.DataFrame(rows)
	_write_csv(dfperturb, os.path.join(settings.outpath, 'perturb_metrics.csv'))
	plot_robustness(dfperturb, settings.outpath)
	print(dfperturb[['kind', 'sigma', 'mean_iou', 'degradation']].to_string(index=False))


def cmd_ablate(settings, spec):
	"""
	One LSD pretraining, then joint training and evaluation of every variant in
	ablate_init x ablate_modulation x ablate_levels x ablate_inputs; writes ablation.csv.
	"""
	train, _ = load_dataset(settings.dataset, 'train')
	val, _ = load_dataset(settings.dataset, settings.split)
	mean_pixel = _mean_pixel(settings)
	pretrained = _run_pretrain(settings, spec, train, mean_pixel)
	save_checkpoint(os.path.join(settings.outpath, 'pretrain.ckpt'), pretrained)
	rows = []
	for init in settings.ablate_init:
		for modulation in settings.ablate_modulation:
			for levels in settings.ablate_levels:
				for inputs in settings.ablate_inputs:
					model, ckpt = _run_train(settings, spec, train, mean_pixel, pretrained, init, modulation,
											 levels, inputs)
					summary, _ = _evaluate(settings, model, val, mean_pixel, init=init, inputs=inputs)
					rows.append({'init': init, 'modulation': modulation, 'levels': levels, 'inputs': inputs,
								 'train_seg_loss': float(ckpt.history['seg_loss'].iloc[-1]) if len(ckpt.history) else np.nan,
								 **summary})
					print(f'Done, mean IoU {summary["mean_iou"]:.4f}')
	dfablate = pd.DataFrame(rows)
	_write_csv(dfablate, os.path.join(settings.outpath, 'ablation.csv'))
	plot_ablation_map(dfablate, settings.outpath)


def cmd_gate_dump(settings, spec):
	"""Channel-summed TD gating of every layer between stop layer and LSD tap for one sample."""
	samples, _ = load_dataset(settings.dataset, settings.split)
	if settings.sample_index >= len(samples):
		raise ConfigError(f'sample_index {settings.sample_index} out of range for {len(samples)} samples')
	model = _trained_model(settings, spec)
	mean_pixel = _mean_pixel(settings)
	sample = eval_transform(samples[settings.sample_index], settings.target_size, mean_pixel)
	x = normalize_image(sample.image, mean_pixel)[None]
	targets = None
	if settings.init == 'gt':
		targets = model.unit_targets([sample.boxes], [sample.classes], x.shape[2], x.shape[3], _loss_config(settings))
	print(f'Computing TD gating for sample {settings.sample_index} ...')
	out = model.forward(Tensor(x), strategy=settings.init, targets=targets,
						theta_attention=settings.theta_attention, inputs=settings.inputs)
	gatedir = os.path.join(settings.outpath, 'gates')
	os.makedirs(gatedir, exist_ok=True)
	names = [layer.name for layer in spec.layers[spec.index(spec.stop):spec.index(spec.lsd_tap) + 1]]
	gates = {name: out.gating[name][0] for name in names}
	for name, g in gates.items():
		write_pgm(os.path.join(gatedir, f'{name}.pgm'), gate_to_plane(g))
	write_ppm(os.path.join(gatedir, 'input.ppm'), np.clip(np.rint(sample.image), 0, 255).astype(np.uint8))
	plot_gating_panels(sample.image, gates, settings.outpath)
	print(f'Done, {len(out.signal)} active units, gating written to {gatedir}')


_commands = {'synth': cmd_synth, 'pretrain': cmd_pretrain, 'train': cmd_train, 'eval': cmd_eval,
			 'perturb': cmd_perturb, 'ablate': cmd_ablate, 'gate-dump': cmd_gate_dump}


def main(fname_settings=None, overrides=None):
	"""
	Main function for running selseg.

	Runs one command with merged settings. Results are saved as csv files,
	checkpoints, PGM masks and png plots in the output directory, next to a
	config.yaml snapshot of the settings.

	Input:
		fname_settings: path and filename to yaml settings file (optional)
		overrides: dict of settings replacing file values (e.g. from command line flags)
	"""
	settings = load_settings(fname_settings, overrides)
	spec = validate_config(settings)
	# snapshot keeps paths as given, relative to SELSEG_OUTPUT_ROOT
	snapshot = yaml.dump(vars(settings), sort_keys=True)
	settings.dataset = _resolve(settings.dataset)
	settings.outpath = _resolve(settings.outpath)

	# Verify output directory and make it if it does not exist
	outpath = settings.dataset if settings.command == 'synth' else settings.outpath
	os.makedirs(outpath, exist_ok=True)
	atomic_write(os.path.join(outpath, 'config.yaml'), snapshot)

	_commands[settings.command](settings, spec)
	print('COMPLETED.')


def build_parser():
	parser = argparse.ArgumentParser(description='Selective Segmentation Network.')
	parser.add_argument('command', nargs='?', choices=COMMANDS, default=None,
						help='Command to run (default: command in settings file).')
	parser.add_argument('-s', '--settings', type=str, required=False,
						help='Path and filename of settings file.',
						default=_fname_settings)
	add = parser.add_argument
	skip = argparse.SUPPRESS
	add('--seed', type=int, default=skip)
	add('--n', dest='n_train', type=int, default=skip, help='Number of training samples.')
	add('--n-val', dest='n_val', type=int, default=skip)
	add('--canvas', type=int, default=skip)
	add('--classes', dest='n_classes', type=int, default=skip, help='Number of classes including background.')
	add('--dataset', type=str, default=skip)
	add('-o', '--outpath', type=str, default=skip)
	add('--arch', type=str, default=skip, help='Architecture file or shipped name (desk, alexnet, vgg16).')
	add('--target-size', dest='target_size', type=int, default=skip)
	add('--lsd-design', dest='lsd_design', choices=LSD_DESIGNS, default=skip)
	add('--init', choices=_strategy_names, default=skip, help='Attention initialisation strategy.')
	add('--theta-attention', dest='theta_attention', type=float, default=skip)
	add('--alpha-td', dest='alpha_td', type=float, default=skip)
	add('--modulation', choices=MODULATIONS, default=skip)
	add('--levels', type=int, default=skip, help='Number of decoder levels M.')
	add('--inputs', choices=DECODER_INPUTS, default=skip, help='Decoder inputs.')
	add('--alpha-loss', dest='alpha_loss', type=float, default=skip)
	add('--lr', type=float, default=skip)
	add('--momentum', type=float, default=skip)
	add('--weight-decay', dest='weight_decay', type=float, default=skip)
	add('--batch-size', dest='batch_size', type=int, default=skip)
	add('--pretrain-epochs', dest='pretrain_epochs', type=int, default=skip)
	add('--epochs', dest='train_epochs', type=int, default=skip, help='Joint training epochs.')
	add('--checkpoint', type=str, default=skip, help='Input checkpoint.')
	add('--resume', type=str, default=skip, help='Checkpoint to resume training from.')
	add('--sigma', dest='sigmas', type=float, nargs='+', default=skip, help='Perturbation strengths.')
	add('--kinds', dest='perturb_kinds', nargs='+', choices=PERTURB_KINDS, default=skip)
	add('--sample-index', dest='sample_index', type=int, default=skip)
	add('--split', choices=('train', 'val'), default=skip)
	return parser


def cli(argv=None):
	"""Command line entry point; returns the exit status."""
	args = vars(build_parser().parse_args(argv))
	fname_settings = args.pop('settings')
	if args.get('command') is None:
		args.pop('command', None)
	try:
		main(fname_settings, args)
	except ConfigError as e:
		print(f'Configuration error: {e}', file=sys.stderr)
		return 1
	except Exception as e:
		print(f'Error: {type(e).__name__}: {e}', file=sys.stderr)
		return 2
	return 0


if __name__ == '__main__':
	sys.exit(cli())
