"""Numpy implementations of the compiled kernels (same signatures)."""

from __future__ import annotations

import numpy as np


def _sim_matrix(a: np.ndarray, b: np.ndarray, mode: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mode == 0:
        diff = a[:, None, :] - b[None, :, :]
        return -np.einsum("ijk,ijk->ij", diff, diff)
    return a @ b.T


def maxsim_scores(queries, packed, offsets, cand, mode: int) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.int64)
    cand = np.asarray(cand, dtype=np.int64)
    out = np.empty(len(cand), dtype=np.float64)
    nq = queries.shape[0]
    for c, pidx in enumerate(cand):
        start, stop = offsets[pidx], offsets[pidx + 1]
        if stop <= start:
            out[c] = -np.inf
            continue
        if nq == 0:
            out[c] = 0.0
            continue
        sims = _sim_matrix(queries, packed[start:stop], mode)
        out[c] = float(sims.max(axis=1).sum())
    return out


def _score_with_argmax(table, q_rows, p_rows, mode):
    sims = _sim_matrix(table[q_rows], table[p_rows], mode)
    arg = sims.argmax(axis=1)  # first index on ties
    return float(sims[np.arange(len(q_rows)), arg].sum()), p_rows[arg]


def _scatter(table, grad, q_rows, p_rows, coef, mode):
    q = table[q_rows].astype(np.float64)
    p = table[p_rows].astype(np.float64)
    if mode == 0:
        diff = q - p
        np.add.at(grad, q_rows, -2.0 * coef * diff)
        np.add.at(grad, p_rows, 2.0 * coef * diff)
    else:
        np.add.at(grad, q_rows, coef * p)
        np.add.at(grad, p_rows, coef * q)


def triple_grad(table, q_ids, q_off, p_ids, p_off, n_ids, n_off, mode: int, scale: float, grad) -> float:
    loss_sum = 0.0
    for t in range(len(q_off) - 1):
        q_rows = np.asarray(q_ids[q_off[t] : q_off[t + 1]], dtype=np.int64)
        if len(q_rows) == 0:
            loss_sum += np.log(2.0)
            continue
        p_rows = np.asarray(p_ids[p_off[t] : p_off[t + 1]], dtype=np.int64)
        n_rows = np.asarray(n_ids[n_off[t] : n_off[t + 1]], dtype=np.int64)
        s_pos, pos_arg = _score_with_argmax(table, q_rows, p_rows, mode)
        s_neg, neg_arg = _score_with_argmax(table, q_rows, n_rows, mode)
        x = s_neg - s_pos
        loss_sum += float(np.logaddexp(0.0, x))
        g = 1.0 / (1.0 + np.exp(-x)) if x >= 0 else np.exp(x) / (1.0 + np.exp(x))
        _scatter(table, grad, q_rows, pos_arg, -scale * g, mode)
        _scatter(table, grad, q_rows, neg_arg, scale * g, mode)
    return loss_sum
