"""Pure-numpy training kernel; the fallback when the compiled one is absent."""
import math

import numpy as np

NAME = "python"

_CLAMP = 30.0


def sgd_batches(E, R, heads, rels, tails, negs, order, batch_size, lr0, lr1,
                step0, total_steps, clip, b_start, b_stop):
    """Run batches ``[b_start, b_stop)`` of one epoch in place; return summed loss."""
    n = order.shape[0]
    d = E.shape[1]
    loss = 0.0
    for b in range(b_start, b_stop):
        idx = order[b * batch_size:min((b + 1) * batch_size, n)]
        h, r, t, ng = heads[idx], rels[idx], tails[idx], negs[idx]
        e_t = E[t].astype(np.float64)
        e_n = E[ng].astype(np.float64)
        query = E[h] + R[r]
        query = query.astype(np.float64)
        x_pos = np.clip(np.einsum("bd,bd->b", e_t, query), -_CLAMP, _CLAMP)
        x_neg = np.clip(np.einsum("bkd,bd->bk", e_n, query), -_CLAMP, _CLAMP)
        loss += float(np.log1p(np.exp(-x_pos)).sum() + np.log1p(np.exp(x_neg)).sum())
        c_pos = 1.0 / (1.0 + np.exp(x_pos))
        c_neg = 1.0 / (1.0 + np.exp(-x_neg))
        g_tail = -c_pos[:, None] * query
        g_neg = c_neg[:, :, None] * query[:, None, :]
        g_head = -c_pos[:, None] * e_t + np.einsum("bk,bkd->bd", c_neg, e_n)

        rows = np.concatenate([t, ng.reshape(-1), h])
        grads = np.concatenate([g_tail, g_neg.reshape(-1, d), g_head])
        uniq, inv = np.unique(rows, return_inverse=True)
        G = np.zeros((uniq.size, d))
        np.add.at(G, inv, grads)
        urel, rinv = np.unique(r, return_inverse=True)
        GR = np.zeros((urel.size, d))
        np.add.at(GR, rinv, g_head)

        norm = math.sqrt(float(np.einsum("ij,ij->", G, G) + np.einsum("ij,ij->", GR, GR)))
        scale = clip / norm if norm > clip else 1.0
        lr = lr0 + (lr1 - lr0) * (step0 + b) / total_steps
        a = lr * scale
        E[uniq] -= (a * G).astype(E.dtype)
        R[urel] -= (a * GR).astype(R.dtype)
    return loss
