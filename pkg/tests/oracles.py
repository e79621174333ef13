"""Slow, obviously-correct reference implementations used by the tests."""

import math

import numpy as np


def two_pass_stats(f):
    """Per-channel batch and per-instance mean/variance by explicit loops in float64."""
    f = np.asarray(f, dtype=np.float64)
    n, c, h, w = f.shape
    mu_t = np.zeros(c)
    var_t = np.zeros(c)
    mu_i = np.zeros((n, c))
    var_i = np.zeros((n, c))
    for ch in range(c):
        vals = f[:, ch].ravel()
        m = sum(vals) / len(vals)
        mu_t[ch] = m
        var_t[ch] = sum((v - m) ** 2 for v in vals) / len(vals)
        for i in range(n):
            vi = f[i, ch].ravel()
            mi = sum(vi) / len(vi)
            mu_i[i, ch] = mi
            var_i[i, ch] = sum((v - mi) ** 2 for v in vi) / len(vi)
    return mu_t, var_t, mu_i, var_i


def sorted_percentile(values, lam):
    s = sorted(values)
    rank = max(1, math.ceil(lam / 100 * len(s)))
    return s[rank - 1]


def shrink(d, k):
    if d > k:
        return d - k
    if d < -k:
        return d + k
    return 0.0


def dabn_high_scalar(mu_s, var_s, mu_i, var_i, L, alpha, kappa):
    """Per-sample DABN high-branch statistics by a channel-by-channel loop."""
    n, c = mu_i.shape
    mu = np.zeros((n, c))
    var = np.zeros((n, c))
    for ch in range(c):
        k_mu = kappa * math.sqrt(var_s[ch] / L)
        k_var = kappa * math.sqrt(2 * var_s[ch] ** 2 / (L - 1))
        for i in range(n):
            mu[i, ch] = mu_s[ch] + alpha * shrink(mu_i[i, ch] - mu_s[ch], k_mu)
            var[i, ch] = max(0.0, var_s[ch] + alpha * shrink(var_i[i, ch] - var_s[ch], k_var))
    return mu, var


def angle(u, v):
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    c = sum(a * b for a, b in zip(u, v)) / (nu * nv)
    return math.acos(max(-1.0, min(1.0, c)))


def mixture_monte_carlo(w, mu, var, n, seed):
    rng = np.random.default_rng(seed)
    comp = rng.choice(len(w), size=n, p=w)
    draws = rng.normal(np.asarray(mu)[comp], np.sqrt(np.asarray(var))[comp])
    return draws.mean(), draws.var()


def central_difference(fn, x, h):
    """Gradient of scalar ``fn`` at array ``x`` by central differences."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def conv2d_loop(x, k, stride):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for j in range(o):
            for r in range(oh):
                for s in range(ow):
                    patch = x[b, :, r * stride:r * stride + kh, s * stride:s * stride + kw]
                    out[b, j, r, s] = (patch * k[j]).sum()
    return out
