"""Pure-numpy versions of the compiled kernels.

Each function keeps the same summation order as its compiled twin so that
both backends produce identical samples and log-probabilities.
"""
import numpy as np


def context_rows(texts, vocab_size, order, offsets):
    n, length = texts.shape
    rows = np.empty((n, length), dtype=np.int64)
    for t in range(length):
        code = np.zeros(n, dtype=np.int64)
        for j in range(max(0, t - order), t):
            code = code * vocab_size + texts[:, j]
        rows[:, t] = offsets[t] + code
    return rows


def gather_sum(table, rows, texts):
    vals = table[rows, texts]
    out = vals[:, 0].copy()
    for t in range(1, vals.shape[1]):
        out = out + vals[:, t]
    return out


def accumulate_score(grad, probs, rows, texts, coef):
    length = texts.shape[1]
    flat_coef = np.repeat(coef, length)
    np.add.at(grad, (rows.ravel(), texts.ravel()), flat_coef)
    row_weight = np.zeros(grad.shape[0])
    np.add.at(row_weight, rows.ravel(), flat_coef)
    nz = row_weight != 0.0
    grad[nz] -= row_weight[nz, None] * probs[nz]


def sample_texts(cdf, u, order, offsets):
    n, length = u.shape
    vocab = cdf.shape[1]
    texts = np.empty((n, length), dtype=np.int64)
    for t in range(length):
        code = np.zeros(n, dtype=np.int64)
        for j in range(max(0, t - order), t):
            code = code * vocab + texts[:, j]
        r = offsets[t] + code
        texts[:, t] = (u[:, t, None] >= cdf[r, : vocab - 1]).sum(axis=1)
    return texts


def linear_score(texts, weights, vocab_size, feature_order):
    n, length = texts.shape
    out = np.full(n, weights[0])
    for t in range(length):
        out = out + weights[1 + texts[:, t]]
    if feature_order >= 2:
        base = 1 + vocab_size
        for t in range(length - 1):
            out = out + weights[base + texts[:, t] * vocab_size + texts[:, t + 1]]
    return out


def featurize_batch(texts, vocab_size, feature_order):
    n, length = texts.shape
    base = 1 + vocab_size
    dim = base + (vocab_size * vocab_size if feature_order >= 2 else 0)
    phi = np.zeros((n, dim))
    phi[:, 0] = 1.0
    idx = np.arange(n)
    for t in range(length):
        np.add.at(phi, (idx, 1 + texts[:, t]), 1.0)
    if feature_order >= 2:
        for t in range(length - 1):
            np.add.at(phi, (idx, base + texts[:, t] * vocab_size + texts[:, t + 1]), 1.0)
    return phi
