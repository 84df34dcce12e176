"""Independent reference implementations used as test oracles."""

import numpy as np


def naive_score(weights, positions, text_pos, visual_pos):
    """Triple loop over heads, text rows and visual columns."""
    heads = weights.shape[0]
    where = {int(p): i for i, p in enumerate(positions)}
    out = {}
    for v in visual_pos:
        total = 0.0
        for h in range(heads):
            for t in text_pos:
                total += weights[h, where[t], where[v]]
        out[int(v)] = total / (heads * len(text_pos))
    return out


def reference_layer(layer, hidden, positions, num_heads, key_bias=None, query_mask=None):
    """One decoder layer, head by head, with rotary angles built per position."""
    n, d = hidden.shape
    dh = d // num_heads
    half = dh // 2

    def norm(x, g):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            out[i] = x[i] / np.sqrt(np.mean(x[i] ** 2) + 1e-6) * g
        return out

    def rotate(vec, pos):
        out = np.empty_like(vec)
        for j in range(half):
            theta = pos * 10000.0 ** (-j / half)
            c, s = np.cos(theta), np.sin(theta)
            out[j] = vec[j] * c - vec[j + half] * s
            out[j + half] = vec[j] * s + vec[j + half] * c
        return out

    x = norm(hidden, layer.attn_gain)
    q, k, v = x @ layer.wq, x @ layer.wk, x @ layer.wv
    ctx = np.zeros((n, d))
    attn = np.zeros((num_heads, n, n))
    for h in range(num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        qh = np.array([rotate(q[i, sl], positions[i]) for i in range(n)])
        kh = np.array([rotate(k[i, sl], positions[i]) for i in range(n)])
        for i in range(n):
            logits = np.full(n, -np.inf)
            for j in range(n):
                if positions[j] <= positions[i]:
                    logits[j] = qh[i] @ kh[j] / np.sqrt(dh)
                    if key_bias is not None and query_mask[positions[i]]:
                        logits[j] += key_bias[positions[j]]
            w = np.exp(logits - logits.max())
            w /= w.sum()
            attn[h, i] = w
            ctx[i, sl] = w @ v[:, sl]
    hidden = hidden + ctx @ layer.wo
    y = norm(hidden, layer.ffn_gain)
    z = y @ layer.w1
    hidden = hidden + (z / (1.0 + np.exp(-z))) @ layer.w2
    return hidden, attn


def reference_forward(model, embeddings, schedule, key_bias=None, query_mask=None):
    """``schedule`` maps layer -> original positions active at that layer."""
    hidden = np.asarray(embeddings, dtype=np.float64)
    active = np.arange(hidden.shape[0])
    for layer in range(1, model.cfg.num_layers + 1):
        keep = np.isin(active, schedule[layer])
        hidden, active = hidden[keep], active[keep]
        hidden, _ = reference_layer(model.layers[layer - 1], hidden, active, model.cfg.num_heads,
                                    key_bias, query_mask)
    return hidden, active
