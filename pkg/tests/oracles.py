"""Slow, independent reference computations used by the test suite."""

import math


def attention_loop(Q, K, V, mask=None):
    """Explicit loops: scores, max-shifted softmax, weighted sum."""
    n_q, d_k = len(Q), len(Q[0])
    n_k, d_v = len(K), len(V[0])
    keep = [True] * n_k if mask is None else [bool(m) for m in mask]
    out = []
    for i in range(n_q):
        scores = []
        for j in range(n_k):
            s = 0.0
            for c in range(d_k):
                s += Q[i][c] * K[j][c]
            scores.append(s / math.sqrt(d_k))
        top = max(s for s, k in zip(scores, keep) if k)
        exps = [math.exp(s - top) if k else 0.0 for s, k in zip(scores, keep)]
        z = sum(exps)
        row = []
        for c in range(d_v):
            acc = 0.0
            for j in range(n_k):
                acc += exps[j] / z * V[j][c]
            row.append(acc)
        out.append(row)
    return out


def matmul_loop(A, B):
    return [[sum(A[i][k] * B[k][j] for k in range(len(B))) for j in range(len(B[0]))] for i in range(len(A))]


def multi_head_loop(Q, K, V, w_q, w_k, w_v, w_o, mask=None):
    """Loop over heads, each calling the attention oracle, then concat and project."""
    heads = []
    for i in range(len(w_q)):
        heads.append(attention_loop(matmul_loop(Q, w_q[i]), matmul_loop(K, w_k[i]), matmul_loop(V, w_v[i]), mask))
    concat = [sum((h[r] for h in heads), []) for r in range(len(Q))]
    return matmul_loop(concat, w_o)


def confusion_loop(pred, true):
    tp = fp = fn = tn = 0
    for p, t in zip(pred, true):
        if p == 1 and t == 1:
            tp += 1
        elif p == 1 and t == 0:
            fp += 1
        elif p == 0 and t == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def wilcoxon_auc(scores, truths):
    """Fraction of (positive, negative) pairs ranked correctly, ties counting one half."""
    pos = [s for s, t in zip(scores, truths) if t == 1]
    neg = [s for s, t in zip(scores, truths) if t == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def bce_loop(pairs, labels, eps=1e-7):
    total = 0.0
    for (p_fake, p_real), y in zip(pairs, labels):
        p = p_fake if y == 1 else p_real
        p = min(max(p, eps), 1 - eps)
        total += -math.log(p)
    return total / len(labels)


def max_gradient_error(module, loss_fn, h=1e-6, floor=1e-6):
    """Worst relative gap between autograd and central finite differences over every parameter entry.

    ``loss_fn()`` must recompute the scalar loss from the module's current parameters.
    """
    import torch

    module.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for param in module.parameters():
        analytic = param.grad.detach().clone().view(-1)
        flat = param.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[i].item()
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst
