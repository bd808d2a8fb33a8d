"""
Segmentation metrics from confusion matrices: mean pixel accuracy and mean IoU.

Pixels labelled 255 in the ground truth are ignored. Mean pixel accuracy
averages over classes present in the ground truth; mean IoU averages over
classes present in the ground truth or the prediction.
"""

import numpy as np
from sklearn.metrics import confusion_matrix

from .errors import RejectedInputError

IGNORE_LABEL = 255


def segmentation_confusion(pred, gt, n_classes=None):
    """
    Confusion matrix (rows: ground truth, columns: prediction) over non-ignored pixels.

    Input:
        pred: int array of predicted labels
        gt: int array of ground-truth labels, same shape; 255 is ignored
        n_classes: K (default: inferred from the labels)

    Return:
        array (K, K) of pixel counts
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise RejectedInputError(f'Prediction {pred.shape} and ground truth {gt.shape} differ in shape')
    valid = gt != IGNORE_LABEL
    if not valid.any():
        raise RejectedInputError('Ground truth has no labelled pixels')
    y_true, y_pred = gt[valid].ravel(), pred[valid].ravel()
    if n_classes is None:
        n_classes = int(max(y_true.max(), y_pred.max())) + 1
    return confusion_matrix(y_true, y_pred, labels=np.arange(n_classes))


def class_accuracy(cm):
    """Per-class recall; NaN for classes absent from the ground truth."""
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.diag(cm) / cm.sum(axis=1)


def class_iou(cm):
    """Per-class IoU; NaN for classes absent from both ground truth and prediction."""
    inter = np.diag(cm)
    union = cm.sum(axis=1) + cm.sum(axis=0) - inter
    with np.errstate(divide='ignore', invalid='ignore'):
        return inter / union


def gt_class_mean(values, cm):
    """Mean of per-class values over the classes present in the ground truth (rows of cm)."""
    return float(np.mean(values[cm.sum(axis=1) > 0]))


def mean_pixel_accuracy(pred, gt, n_classes=None):
    cm = segmentation_confusion(pred, gt, n_classes)
    return gt_class_mean(class_accuracy(cm), cm)


def mean_iou(pred, gt, n_classes=None):
    """
    IoU averaged over the classes present in gt. Pixels predicted as a class absent
    from gt still lower the IoU of their true class.
    """
    cm = segmentation_confusion(pred, gt, n_classes)
    return gt_class_mean(class_iou(cm), cm)


class ConfusionMeter:
    """
    Dataset-level confusion accumulator.

    Input:
        n_classes: K
    """
    def __init__(self, n_classes):
        self.n_classes = n_classes
        self.reset()

    def reset(self):
        self.confusion = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)

    def update(self, pred, gt):
        """Add one prediction / ground-truth pair; fully ignored images are skipped."""
        if not (np.asarray(gt) != IGNORE_LABEL).any():
            return
        self.confusion += segmentation_confusion(pred, gt, self.n_classes)

    def pixel_accuracy(self):
        return float(np.diag(self.confusion).sum() / max(self.confusion.sum(), 1))

    def mean_pixel_accuracy(self):
        if self.confusion.sum() == 0:
            raise RejectedInputError('No labelled pixels accumulated')
        return gt_class_mean(class_accuracy(self.confusion), self.confusion)

    def mean_iou(self):
        if self.confusion.sum() == 0:
            raise RejectedInputError('No labelled pixels accumulated')
        return gt_class_mean(class_iou(self.confusion), self.confusion)

    def summary(self):
        """Dict of pixel accuracy, mean pixel accuracy, mean IoU and per-class IoU."""
        result = {'pixel_accuracy': self.pixel_accuracy(),
                  'mean_accuracy': self.mean_pixel_accuracy(),
                  'mean_iou': self.mean_iou()}
        for k, value in enumerate(class_iou(self.confusion)):
            result[f'iou_class{k}'] = float(value)
        return result
