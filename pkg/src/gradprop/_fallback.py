"""Pure NumPy versions of the batched network kernels.

Layout shared with the compiled kernels: ``params`` is a flat float64 buffer
holding one ``(fan_out, fan_in + 1)`` row-major block per layer, bias in the
last column. ``pre`` stores the pre-activations of every non-input layer,
concatenated along axis 1.
"""
import numpy as np

BACKEND = "numpy"


def _layer_blocks(params, sizes):
    p = 0
    for k in range(len(sizes) - 1):
        fi, fo = int(sizes[k]), int(sizes[k + 1])
        n = fo * (fi + 1)
        yield k, fi, fo, params[p:p + n].reshape(fo, fi + 1)
        p += n


def forward_batch(params, sizes, relu, X):
    B = X.shape[0]
    pre = np.empty((B, int(np.sum(sizes[1:]))))
    a = X
    u = 0
    for k, fi, fo, W in _layer_blocks(params, sizes):
        z = a @ W[:, :fi].T + W[:, fi]
        pre[:, u:u + fo] = z
        a = np.maximum(z, 0.0) if relu[k] else z
        u += fo
    return pre


def backward_batch(params, sizes, relu, X, pre, G):
    B = X.shape[0]
    blocks = list(_layer_blocks(params, sizes))
    offsets = np.concatenate(([0], np.cumsum(sizes[1:])))
    grad = np.empty_like(params)
    p_end = params.shape[0]
    delta = np.asarray(G, dtype=np.float64)
    for k, fi, fo, W in reversed(blocks):
        z = pre[:, offsets[k]:offsets[k + 1]]
        if relu[k]:
            delta = delta * (z > 0.0)
        if k == 0:
            a_in = X
        else:
            zp = pre[:, offsets[k - 1]:offsets[k]]
            a_in = np.maximum(zp, 0.0) if relu[k - 1] else zp
        n = fo * (fi + 1)
        block = grad[p_end - n:p_end].reshape(fo, fi + 1)
        block[:, :fi] = delta.T @ a_in
        block[:, fi] = delta.sum(axis=0)
        block /= B
        p_end -= n
        if k > 0:
            delta = delta @ W[:, :fi]
    return grad
