"""Top-1 accuracy and confusion-matrix mIoU."""

import numpy as np
import torch


def confusion_matrix(pred, target, n_class):
    """``cm[t, p]`` counts pixels of true class t predicted as p."""
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    target = np.asarray(target).reshape(-1).astype(np.int64)
    if pred.shape != target.shape:
        raise ValueError("prediction and target sizes differ")
    valid = (target >= 0) & (target < n_class)
    idx = n_class * target[valid] + pred[valid]
    return np.bincount(idx, minlength=n_class ** 2).reshape(n_class, n_class)


def iou_per_class(cm):
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def miou_from_confusion(cm) -> float:
    """Mean IoU in percent; classes absent from both prediction and truth are skipped."""
    iou = iou_per_class(cm)
    if np.all(np.isnan(iou)):
        raise ValueError("empty confusion matrix")
    return float(np.nanmean(iou) * 100.0)


def top1(pred, labels) -> float:
    pred, labels = np.asarray(pred).reshape(-1), np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise ValueError("empty dataset")
    return float((pred == labels).mean() * 100.0)


@torch.no_grad()
def predict(net, data, head, batch_size=128):
    x, _ = data
    net.eval()
    out = [net(x[i:i + batch_size], head).argmax(1) for i in range(0, x.shape[0], batch_size)]
    return torch.cat(out)


def eval_top1(net, data, batch_size=128) -> float:
    if data[0].shape[0] == 0:
        raise ValueError("empty dataset")
    return top1(predict(net, data, "cls", batch_size).numpy(), data[1].numpy())


def eval_miou(net, data, n_class, batch_size=128) -> float:
    if data[0].shape[0] == 0:
        raise ValueError("empty dataset")
    pred = predict(net, data, "seg", batch_size)
    return miou_from_confusion(confusion_matrix(pred.numpy(), data[1].numpy(), n_class))
