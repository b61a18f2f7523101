"""Toy models and float64 finite-difference oracles shared by several test modules."""

import copy

import numpy as np
import torch

from singleclass.models import CNNClassifier, GAPNet

TOY_SHAPE = (3, 8, 8)


def toy_classifier(seed, num_categories=3, widths=(4, 6), pools=(True, False), **params):
    """Small GAP network with nontrivial BatchNorm statistics."""
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = GAPNet(widths, pools, num_categories, TOY_SHAPE[0])
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.copy_(0.1 * torch.randn(m.num_features, generator=gen))
                m.running_var.copy_(0.5 + torch.rand(m.num_features, generator=gen))
                m.weight.copy_(1 + 0.2 * torch.randn(m.num_features, generator=gen))
                m.bias.copy_(0.1 * torch.randn(m.num_features, generator=gen))
    return CNNClassifier.from_module(net, TOY_SHAPE, num_categories, **params)


def as_float64(clf):
    other = copy.copy(clf)
    other.net_ = copy.deepcopy(clf.net_).double().eval()
    return other


def central_difference(fn, x, step):
    """d fn / dx for a scalar fn of a float64 array, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        up = fn(x)
        x[idx] = orig - step
        down = fn(x)
        x[idx] = orig
        g[idx] = (up - down) / (2 * step)
    return g


def scalar_loss_fn(clf64, target, kind, mode):
    """float64 forward of the loss that ``input_gradient`` differentiates."""

    def fn(x):
        xt = torch.from_numpy(x[None])
        with torch.no_grad(), clf64.differentiable(mode) as net:
            logits = net(xt)[0]
        if kind == "class_score":
            return float(logits[target])
        return float(torch.logsumexp(logits, 0) - logits[target])

    return fn


def map_loss_fn(clf64, y, target_map, interpreter, mask_cfg=None):
    """float64 forward of ||g(x) - m_t||^2 through the same map construction."""
    from singleclass.interpreters import differentiable_maps

    tm = torch.from_numpy(np.asarray(target_map, dtype=np.float64))[None]

    def fn(x):
        xt = torch.from_numpy(x[None])
        if interpreter == "cam":
            with torch.no_grad():
                m = differentiable_maps(clf64, xt, y, interpreter, mask_cfg)
        else:
            # both routes differentiate internally
            m = differentiable_maps(clf64, xt.clone().requires_grad_(True), y, interpreter,
                                    mask_cfg)
        return float(((m.detach() - tm) ** 2).sum())

    return fn


# scalar metric oracles: plain loops over Python floats

def argmax(row):
    best = 0
    for k in range(1, len(row)):
        if row[k] > row[best]:
            best = k
    return best


def oracle_rates(probs, labels, target):
    n = len(probs)
    preds = [argmax(list(r)) for r in probs]
    fooled = [i for i in range(n) if preds[i] == target]
    fool = len(fooled) / n
    flip = sum(1 for i in range(n) if preds[i] != labels[i]) / n
    conf = None
    if fooled:
        conf = sum(float(probs[i][target]) for i in fooled) / len(fooled)
    per_cat = {}
    for i in range(n):
        per_cat.setdefault(int(labels[i]), []).append(float(probs[i][labels[i]]))
    cls = {c: sum(v) / len(v) for c, v in per_cat.items()}
    return fool, flip, conf, cls


def oracle_iou(a, b, t):
    inter = union = 0
    for i in range(len(a)):
        for j in range(len(a[0])):
            x, y = a[i][j] > t, b[i][j] > t
            inter += x and y
            union += x or y
    return 1.0 if union == 0 else inter / union
