# Custom utility functions for visualisation of gating, training and robustness results

import os
import numpy as np
import matplotlib.pyplot as plt


def gate_to_plane(g):
	"""
	Channel-summed gating map scaled to 0..255 by its maximum.

	Input:
		g: gating array (C, H, W) or (H, W)

	Return:
		uint8 array (H, W); all zero when the gating is empty
	"""
	g = np.asarray(g, dtype=np.float64)
	plane = g.sum(axis=0) if g.ndim == 3 else g
	peak = plane.max()
	if peak <= 0:
		return np.zeros(plane.shape, dtype=np.uint8)
	return np.rint(255.0 * plane / peak).astype(np.uint8)


def plot_gating_panels(image, gates, outpath, fname_out='Gating_panels.png', show=False):
	"""
	Input image next to the channel-summed gating map of each layer

	Input:
		image: array (3, H, W) with values in [0, 255]
		gates: dict layer name -> gating array (C, H, W)
		outpath: output directory
		show: boolean, if True shows matplotlib plot
	"""
	names = list(gates)
	fig, ax = plt.subplots(1, len(names) + 1, figsize=(3 * (len(names) + 1), 3))
	ax = np.atleast_1d(ax)
	ax[0].imshow(np.clip(np.asarray(image).transpose(1, 2, 0), 0, 255).astype(np.uint8))
	ax[0].set_title('input')
	for i, name in enumerate(names):
		ax[i + 1].imshow(gate_to_plane(gates[name]), cmap='inferno', vmin=0, vmax=255)
		ax[i + 1].set_title(name)
	for a in ax:
		a.axis('off')
	plt.tight_layout()
	plt.savefig(os.path.join(outpath, fname_out), dpi=200)
	if show:
		plt.show()
	plt.close('all')


def plot_training_curves(dfhistory, columns, outpath, fname_out, show=False):
	"""
	Per-epoch training curves

	Input:
		dfhistory: pandas dataframe with an 'epoch' column
		columns: list of columns to plot
		outpath: output directory
		fname_out: png file name
		show: boolean, if True shows matplotlib plot
	"""
	fig, ax = plt.subplots(1, len(columns), figsize=(4 * len(columns), 3.5))
	ax = np.atleast_1d(ax)
	for a, col in zip(ax, columns):
		a.plot(dfhistory['epoch'].values + 1, dfhistory[col].values, marker='o', ms=3)
		a.set_xlabel('Epoch')
		a.set_title(col)
	plt.tight_layout()
	plt.savefig(os.path.join(outpath, fname_out), dpi=200)
	if show:
		plt.show()
	plt.close('all')


def plot_robustness(dfperturb, outpath, show=False):
	"""
	Mean IoU over perturbation strength, one line per perturbation kind

	Input:
		dfperturb: pandas dataframe with columns kind, sigma, mean_iou
		outpath: output directory
		show: boolean, if True shows matplotlib plot
	"""
	fig, ax = plt.subplots(1, figsize=(5, 4))
	for kind, df in dfperturb.groupby('kind', sort=False):
		ax.plot(df['sigma'].values, df['mean_iou'].values, marker='o', label=kind)
	ax.set_xlabel('sigma')
	ax.set_ylabel('Mean IoU')
	ax.legend()
	plt.tight_layout()
	plt.savefig(os.path.join(outpath, 'Robustness.png'), dpi=200)
	if show:
		plt.show()
	plt.close('all')


def plot_ablation_map(dfablate, outpath, show=False):
	"""
	Heatmap of mean IoU over all ablation variants

	Rows combine attention initialisation and modulation, columns combine
	decoder levels and decoder inputs.

	Input:
		dfablate: pandas dataframe with columns init, modulation, levels, inputs, mean_iou
		outpath: output directory
		show: boolean, if True shows matplotlib plot
	"""
	df = dfablate.copy()
	df['row'] = df['init'] + '-' + df['modulation']
	df['col'] = 'M' + df['levels'].astype(str) + '-' + df['inputs']
	table = df.pivot_table(index='row', columns='col', values='mean_iou', aggfunc='mean', sort=False)
	fig, ax = plt.subplots(1, figsize=(1.2 * table.shape[1] + 3, 0.6 * table.shape[0] + 2))
	_draw_iou_table(ax, table)
	plt.tight_layout()
	plt.savefig(os.path.join(outpath, 'Ablation_map.png'), dpi=300)
	if show:
		plt.show()
	plt.close('all')


## ablation map

def _draw_iou_table(ax, table):
	"""imshow of a pivot table of mean IoU values with tick labels, colorbar and cell values."""
	values = table.values.astype(float)
	im = ax.imshow(values, cmap='YlOrRd', vmin=0, vmax=1)
	ax.figure.colorbar(im, ax=ax).ax.set_ylabel('Mean IoU', rotation=-90, va='bottom')
	ax.set_xticks(np.arange(values.shape[1]), labels=list(table.columns), rotation=-30, ha='right')
	ax.set_yticks(np.arange(values.shape[0]), labels=list(table.index))
	for (i, j), value in np.ndenumerate(values):
		if np.isfinite(value):
			ax.text(j, i, f'{value:.3f}', ha='center', va='center', size=7,
					color='white' if value > 0.5 else 'black')
