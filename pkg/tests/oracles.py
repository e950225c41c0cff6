"""Independent reference implementations used by the unit and acceptance tests."""
import numpy as np
import torch


def conv2d_same(x, w, b=None):
    """Zero-padded cross-correlation, (C, H, W) * (O, C, k, k) -> (O, H, W)."""
    k = w.shape[-1]
    p = k // 2
    c, h, wd = x.shape
    xp = np.zeros((c, h + 2 * p, wd + 2 * p))
    xp[:, p:p + h, p:p + wd] = x
    out = np.zeros((w.shape[0], h, wd))
    for ki in range(k):
        for kj in range(k):
            window = xp[:, ki:ki + h, kj:kj + wd]
            for o in range(w.shape[0]):
                for ci in range(c):
                    out[o] += w[o, ci, ki, kj] * window[ci]
    if b is not None:
        out += b[:, None, None]
    return out


def bn_eval(x, bn):
    mean = bn.running_mean.double().numpy()[:, None, None]
    var = bn.running_var.double().numpy()[:, None, None]
    g = bn.weight.detach().double().numpy()[:, None, None]
    b = bn.bias.detach().double().numpy()[:, None, None]
    return (x - mean) / np.sqrt(var + bn.eps) * g + b


def residual_oracle(block, x):
    w = block.conv.weight.detach().double().numpy()
    h = np.maximum(bn_eval(conv2d_same(x, w), block.bn1), 0.0)
    h = bn_eval(conv2d_same(h, w), block.bn2)
    return np.maximum(h + x, 0.0)


def attention_oracle(block, g, x):
    """Scalar-loop gate: every pixel, every channel, one multiply at a time."""

    def unpack(seq):
        conv, bn = seq[0], seq[1]
        w = conv.weight.detach().double().numpy()[:, :, 0, 0]
        b = conv.bias.detach().double().numpy()
        s = (bn.weight.detach().double() / torch.sqrt(bn.running_var.double() + bn.eps)).numpy()
        m = bn.running_mean.double().numpy()
        beta = bn.bias.detach().double().numpy()
        return w, b, s, m, beta

    w1, b1, s1, m1, be1 = unpack(block.W1)
    w2, b2, s2, m2, be2 = unpack(block.W2)
    wp, bp, sp, mp, bep = unpack(block.psi)
    n, c, hh, ww = g.shape
    out = np.zeros_like(g)
    pmap = np.zeros((n, 1, hh, ww))
    for i in range(n):
        for r in range(hh):
            for q in range(ww):
                hidden = []
                for o in range(c):
                    a1 = b1[o]
                    a2 = b2[o]
                    for k in range(c):
                        a1 += w1[o, k] * g[i, k, r, q]
                        a2 += w2[o, k] * x[i, k, r, q]
                    a1 = (a1 - m1[o]) * s1[o] + be1[o]
                    a2 = (a2 - m2[o]) * s2[o] + be2[o]
                    hidden.append(max(a1 + a2, 0.0))
                z = bp[0]
                for k in range(c):
                    z += wp[0, k] * hidden[k]
                z = (z - mp[0]) * sp[0] + bep[0]
                p = 1.0 / (1.0 + np.exp(-z))
                pmap[i, 0, r, q] = p
                for k in range(c):
                    if block.kind == "type2":
                        out[i, k, r, q] = g[i, k, r, q] * p + x[i, k, r, q]
                    else:
                        out[i, k, r, q] = p * x[i, k, r, q]
    return out, pmap


def expected_parameters(levels=5, base=10, attention=True, resblock="shared", gate_bn=True):
    """Closed-form learnable-parameter count of the two-branch ladder."""
    ch = [base * 2 ** i for i in range(levels)]

    def res(c):
        if resblock == "plain":
            return 9 * c * c + c
        if resblock == "unshared":
            return 18 * c * c + 4 * c
        return 9 * c * c + 4 * c

    def gate(c):
        bn = 2 if gate_bn else 0
        return 2 * (c * c + c + bn * c) + (c + 1 + bn)

    branch = sum(res(c) for c in ch) + sum(res(c) for c in ch[:-1])
    for lo, hi in zip(ch[:-1], ch[1:]):
        branch += 9 * lo * hi + hi  # strided down conv
        branch += 9 * hi * lo + lo  # transposed up conv
        if attention:
            branch += gate(lo)
    stem = 9 * base + 2 * base
    head = 2 * base + 2
    return stem + 2 * branch + head


def confusion_loop(pred, truth, fov):
    tp = fp = tn = fn = 0
    for p, t, f in zip(np.ravel(pred), np.ravel(truth), np.ravel(fov)):
        if not f:
            continue
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def mann_whitney_auc(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie) over all positive/negative pairs."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def covering_oracle(model, image, size, stride):
    """Per pixel: mean of every patch output that covers it, one patch at a time."""
    from awnet.data import pad_to_grid, patch_origins

    padded = pad_to_grid(image[None].astype(np.float32), size, stride)[0]
    outs = {}
    with torch.no_grad():
        for r, c in patch_origins(*padded.shape, size, stride):
            x = torch.from_numpy(padded[r:r + size, c:c + size].copy())[None, None]
            outs[(r, c)] = model(x)[0, 0].double().numpy()
    h, w = image.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            vals = [o[i - r, j - c] for (r, c), o in outs.items() if r <= i < r + size and c <= j < c + size]
            out[i, j] = sum(vals) / len(vals)
    return out
