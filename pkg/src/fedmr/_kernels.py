"""Hot numeric kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports cleanly and the environment variable
``FEDMR_DISABLE_NUMBA`` is unset (or falsy). Both paths implement the same
arithmetic. ``stack_sum`` performs the same IEEE operations in the same order on
both paths and agrees bitwise; the others differ only in reduction order (BLAS,
``math.fsum``) and agree to rounding. Within one backend every kernel is
deterministic.

Flat MLP parameter layout: for each dense layer ``l`` with ``dims[l] -> dims[l+1]``
the weight matrix (row-major, shape ``(in, out)``) is followed by its bias.
"""

from __future__ import annotations

import math
import os

import numpy as np

_FLAG = os.environ.get("FEDMR_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("disabled by FEDMR_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def stack_sum_np(stack):
    # Neumaier compensated sum over rows, row order 0..K-1.
    s = np.zeros(stack.shape[1])
    c = np.zeros(stack.shape[1])
    for k in range(stack.shape[0]):
        x = stack[k]
        t = s + x
        c += np.where(np.abs(s) >= np.abs(x), (s - t) + x, (x - t) + s)
        s = t
    return s + c


def sq_dist_sum_np(stack, x):
    d = stack - x[None, :]
    return math.fsum((d * d).ravel())


def gram_np(stack):
    return stack @ stack.T


def _layer_views(params, dims, l, off):
    i, o = dims[l], dims[l + 1]
    w = params[off:off + i * o].reshape((i, o))
    b = params[off + i * o:off + i * o + o]
    return w, b, off + i * o + o


def mlp_logits_np(params, dims, X):
    h = X
    off = 0
    n_layers = len(dims) - 1
    for l in range(n_layers):
        w, b, off = _layer_views(params, dims, l, off)
        h = np.dot(h, w) + b
        if l < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h


def mlp_loss_grad_np(params, dims, X, y):
    n_layers = len(dims) - 1
    acts = [X]
    views = []
    off = 0
    for l in range(n_layers):
        w, b, off = _layer_views(params, dims, l, off)
        views.append(w)
        z = np.dot(acts[-1], w) + b
        if l < n_layers - 1:
            z = np.maximum(z, 0.0)
        acts.append(z)
    logits = acts[-1]
    B = X.shape[0]
    rows = np.arange(B)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1)
    logp = logits[rows, y] - m[:, 0] - np.log(s)
    loss = -logp.sum() / B

    delta = e / s[:, None]
    delta[rows, y] -= 1.0
    delta /= B
    grad = np.empty_like(params)
    off = params.shape[0]
    for l in range(n_layers - 1, -1, -1):
        i, o = dims[l], dims[l + 1]
        off -= o
        grad[off:off + o] = delta.sum(axis=0)
        off -= i * o
        grad[off:off + i * o] = np.dot(acts[l].T, delta).ravel()
        if l > 0:
            delta = np.dot(delta, views[l].T) * (acts[l] > 0.0)
    return loss, grad


def sgd_train_np(params, dims, X, y, batches, lr, momentum, prox_mu, ref):
    """Run momentum SGD over ``batches`` (rows of sample indices, -1 padded)."""
    w = params.copy()
    v = np.zeros_like(w)
    for t in range(batches.shape[0]):
        idx = batches[t]
        idx = idx[idx >= 0]
        _, g = mlp_loss_grad_np(w, dims, X[idx], y[idx])
        if prox_mu != 0.0:
            g = g + prox_mu * (w - ref)
        v = momentum * v + g
        w = w - lr * v
    return w


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def stack_sum_nb(stack):
        K, P = stack.shape
        out = np.empty(P)
        for p in range(P):
            s = 0.0
            c = 0.0
            for k in range(K):
                x = stack[k, p]
                t = s + x
                if abs(s) >= abs(x):
                    c += (s - t) + x
                else:
                    c += (x - t) + s
                s = t
            out[p] = s + c
        return out

    @njit(cache=True)
    def sq_dist_sum_nb(stack, x):
        K, P = stack.shape
        s = 0.0
        c = 0.0
        for k in range(K):
            for p in range(P):
                d = stack[k, p] - x[p]
                v = d * d
                t = s + v
                if abs(s) >= v:
                    c += (s - t) + v
                else:
                    c += (v - t) + s
                s = t
        return s + c

    @njit(cache=True)
    def gram_nb(stack):
        K, P = stack.shape
        out = np.empty((K, K))
        for i in range(K):
            for j in range(i, K):
                acc = 0.0
                for p in range(P):
                    acc += stack[i, p] * stack[j, p]
                out[i, j] = acc
                out[j, i] = acc
        return out

    @njit(cache=True)
    def mlp_logits_nb(params, dims, X):
        h = X.copy()
        off = 0
        n_layers = dims.shape[0] - 1
        for l in range(n_layers):
            i = dims[l]
            o = dims[l + 1]
            w = params[off:off + i * o].reshape((i, o))
            b = params[off + i * o:off + i * o + o]
            off += i * o + o
            z = np.dot(h, w)
            for r in range(z.shape[0]):
                for q in range(o):
                    val = z[r, q] + b[q]
                    if l < n_layers - 1 and val < 0.0:
                        val = 0.0
                    z[r, q] = val
            h = z
        return h

    @njit(cache=True)
    def mlp_loss_grad_nb(params, dims, X, y):
        n_layers = dims.shape[0] - 1
        B = X.shape[0]
        acts = [np.ascontiguousarray(X)]
        off = 0
        for l in range(n_layers):
            i = dims[l]
            o = dims[l + 1]
            w = params[off:off + i * o].reshape((i, o))
            b = params[off + i * o:off + i * o + o]
            off += i * o + o
            z = np.dot(acts[l], w)
            for r in range(B):
                for q in range(o):
                    val = z[r, q] + b[q]
                    if l < n_layers - 1 and val < 0.0:
                        val = 0.0
                    z[r, q] = val
            acts.append(z)
        logits = acts[n_layers]
        C = logits.shape[1]
        delta = np.empty((B, C))
        total = 0.0
        for r in range(B):
            m = logits[r, 0]
            for q in range(1, C):
                if logits[r, q] > m:
                    m = logits[r, q]
            s = 0.0
            for q in range(C):
                e = math.exp(logits[r, q] - m)
                delta[r, q] = e
                s += e
            total += logits[r, y[r]] - m - math.log(s)
            for q in range(C):
                delta[r, q] = delta[r, q] / s
            delta[r, y[r]] -= 1.0
        loss = -total / B
        for r in range(B):
            for q in range(C):
                delta[r, q] /= B

        grad = np.empty_like(params)
        off = params.shape[0]
        for l in range(n_layers - 1, -1, -1):
            i = dims[l]
            o = dims[l + 1]
            off -= o
            for q in range(o):
                acc = 0.0
                for r in range(B):
                    acc += delta[r, q]
                grad[off + q] = acc
            off -= i * o
            gw = np.dot(acts[l].T, delta)
            grad[off:off + i * o] = gw.ravel()
            if l > 0:
                w = params[off:off + i * o].reshape((i, o))
                nd = np.dot(delta, w.T)
                prev = acts[l]
                for r in range(B):
                    for q in range(i):
                        if prev[r, q] <= 0.0:
                            nd[r, q] = 0.0
                delta = nd
        return loss, grad

    @njit(cache=True)
    def sgd_train_nb(params, dims, X, y, batches, lr, momentum, prox_mu, ref):
        w = params.copy()
        v = np.zeros_like(w)
        P = w.shape[0]
        for t in range(batches.shape[0]):
            n = 0
            for j in range(batches.shape[1]):
                if batches[t, j] >= 0:
                    n += 1
            idx = np.empty(n, dtype=np.int64)
            n = 0
            for j in range(batches.shape[1]):
                if batches[t, j] >= 0:
                    idx[n] = batches[t, j]
                    n += 1
            xb = np.ascontiguousarray(X[idx])
            yb = y[idx]
            _, g = mlp_loss_grad_nb(w, dims, xb, yb)
            for p in range(P):
                gp = g[p]
                if prox_mu != 0.0:
                    gp = gp + prox_mu * (w[p] - ref[p])
                v[p] = momentum * v[p] + gp
                w[p] = w[p] - lr * v[p]
        return w

    stack_sum = stack_sum_nb
    sq_dist_sum = sq_dist_sum_nb
    gram = gram_nb
    mlp_logits = mlp_logits_nb
    mlp_loss_grad = mlp_loss_grad_nb
    sgd_train = sgd_train_nb
else:
    stack_sum = stack_sum_np
    sq_dist_sum = sq_dist_sum_np
    gram = gram_np
    mlp_logits = mlp_logits_np
    mlp_loss_grad = mlp_loss_grad_np
    sgd_train = sgd_train_np


def implementations() -> dict[str, dict]:
    """Both backends side by side, keyed by backend name (for tests and benchmarks)."""
    out = {
        "numpy": {
            "stack_sum": stack_sum_np,
            "sq_dist_sum": sq_dist_sum_np,
            "gram": gram_np,
            "mlp_logits": mlp_logits_np,
            "mlp_loss_grad": mlp_loss_grad_np,
            "sgd_train": sgd_train_np,
        }
    }
    if HAVE_NUMBA:
        out["numba"] = {
            "stack_sum": stack_sum_nb,
            "sq_dist_sum": sq_dist_sum_nb,
            "gram": gram_nb,
            "mlp_logits": mlp_logits_nb,
            "mlp_loss_grad": mlp_loss_grad_nb,
            "sgd_train": sgd_train_nb,
        }
    return out
