"""Numpy implementation of the skip-gram / hierarchical-softmax loop.

Same signatures and update order as the compiled ``_hs`` module.
"""

import numpy as np


def _neg_log_sigmoid(x):
    return np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def train_pairs(syn0, syn1, centers, targets, points, signs, codelens, lr_start, lr_end, start, total, work):
    loss = 0.0
    span = lr_start - lr_end
    for k in range(len(centers)):
        c = centers[k]
        t = targets[k]
        lr = lr_start - span * (start + k) / total
        n = codelens[t]
        path = points[t, :n]
        s = signs[t, :n]
        l1 = syn0[c]
        inner = syn1[path]
        f = inner @ l1
        loss += float(_neg_log_sigmoid(s * f).sum())
        g = (_sigmoid(s * f) - 1.0) * s
        neu1e = g @ inner
        syn1[path] = inner - lr * np.outer(g, l1)
        syn0[c] = l1 - lr * neu1e
    return loss


def pairs_loss(syn0, syn1, centers, targets, points, signs, codelens):
    loss = 0.0
    for k in range(len(centers)):
        t = targets[k]
        n = codelens[t]
        f = syn1[points[t, :n]] @ syn0[centers[k]]
        loss += float(_neg_log_sigmoid(signs[t, :n] * f).sum())
    return loss
