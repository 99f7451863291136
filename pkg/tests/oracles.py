"""Independent reference implementations used as test oracles.

Everything here works on plain dense arrays with explicit loops or direct
formulas and shares no code with the package under test.
"""
from __future__ import annotations

import math

import numpy as np


# --- network ---------------------------------------------------------------

def smoothed_relu(x, delta):
    out = np.zeros_like(x)
    mid = (x > 0) & (x < delta)
    out[mid] = x[mid] ** 2 / (2 * delta)
    hi = x >= delta
    out[hi] = x[hi] - delta / 2
    return out


def smoothed_relu_prime(x, delta):
    out = np.zeros_like(x)
    mid = (x > 0) & (x < delta)
    out[mid] = x[mid] / delta
    out[x >= delta] = 1.0
    return out


def dense_forward(Ks, bs, x, tau):
    """Untruncated Euler states ``y_0 .. y_L`` for ``y+ = y + tau*tanh(K y + b)``."""
    ys = [np.array(x, dtype=np.float64)]
    for K, b in zip(Ks, bs):
        y = ys[-1]
        z = np.tensordot(K, y, axes=(1, 0)) + b
        ys.append(y + tau * np.tanh(z))
    return ys


def dense_objective(Ks, bs, x_in, x_ref, tau, lams, delta, weight):
    """Loss plus regularizer; ``lams`` are (encoder K, decoder K, encoder b, decoder b)."""
    n = x_in.shape[2]
    half = len(Ks) // 2
    ys = dense_forward(Ks, bs, x_in, tau)
    r = smoothed_relu(ys[-1], delta) - x_ref
    loss = weight / (2 * n) * float(np.sum(r * r))
    reg = (lams[0] / (2 * half) * sum(float(np.sum(K * K)) for K in Ks[:half])
           + lams[1] / (2 * half) * sum(float(np.sum(K * K)) for K in Ks[half:])
           + lams[2] / (2 * half) * sum(b * b for b in bs[:half])
           + lams[3] / (2 * half) * sum(b * b for b in bs[half:]))
    return loss + reg, ys


def dense_backprop(Ks, bs, x_in, x_ref, tau, lams, delta, weight):
    """Reverse-mode derivative of ``dense_objective`` written out by hand."""
    n = x_in.shape[2]
    half = len(Ks) // 2
    _, ys = dense_objective(Ks, bs, x_in, x_ref, tau, lams, delta, weight)
    g = ys[-1]
    a = weight / n * smoothed_relu_prime(g, delta) * (smoothed_relu(g, delta) - x_ref)
    gK = [None] * len(Ks)
    gb = [None] * len(Ks)
    for j in range(len(Ks) - 1, -1, -1):
        K, b, y = Ks[j], bs[j], ys[j]
        z = np.tensordot(K, y, axes=(1, 0)) + b
        s = (1 - np.tanh(z) ** 2) * a
        gK[j] = tau * np.einsum("pci,qci->pq", s, y)
        gb[j] = tau * float(np.sum(s))
        a = a + tau * np.tensordot(K.T, s, axes=(1, 0))
    for j in range(len(Ks)):
        enc = j < half
        gK[j] = gK[j] + (lams[0] if enc else lams[1]) / half * Ks[j]
        gb[j] = gb[j] + (lams[2] if enc else lams[3]) / half * bs[j]
    return gK, gb, a


# --- images ----------------------------------------------------------------

def naive_correlate2d(img, kernel):
    """Correlation with edge-replicated borders, by explicit loops."""
    kr, kc = kernel.shape
    pr, pc = kr // 2, kc // 2
    padded = np.pad(img, ((pr, pr), (pc, pc)), mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            acc = 0.0
            for u in range(kr):
                for v in range(kc):
                    acc += kernel[u, v] * padded[i + u, j + v]
            out[i, j] = acc
    return out


def gauss_kernel_2d(sigma, size):
    k = np.empty((size, size))
    c = size // 2
    for i in range(size):
        for j in range(size):
            k[i, j] = math.exp(-((i - c) ** 2 + (j - c) ** 2) / (2 * sigma**2))
    return k / k.sum()


def naive_ssim(x, y, peak=1.0, size=11, sigma=1.5):
    """Mean SSIM of one image pair from windowed sums at every pixel."""
    w = gauss_kernel_2d(sigma, size)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    h = size // 2
    xp = np.pad(x, h, mode="edge")
    yp = np.pad(y, h, mode="edge")
    vals = []
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            px = xp[i : i + size, j : j + size]
            py = yp[i : i + size, j : j + size]
            mx, my = np.sum(w * px), np.sum(w * py)
            vx = np.sum(w * px * px) - mx * mx
            vy = np.sum(w * py * py) - my * my
            cxy = np.sum(w * px * py) - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


# --- optimization ----------------------------------------------------------

def rosenbrock(x):
    f = 100.0 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
    g = np.array([-400.0 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200.0 * (x[1] - x[0] ** 2)])
    return f, g


def dense_bfgs(fg, x0, iters, c=1e-4, beta=0.5, scale_first=False):
    """Textbook BFGS on the explicit inverse-Hessian matrix with Armijo backtracking."""
    x = np.array(x0, dtype=np.float64)
    f, g = fg(x)
    H = np.eye(x.size)
    first = True
    trace = [(x.copy(), f)]
    for _ in range(iters):
        d = -H @ g
        t = 1.0
        while True:
            xt = x + t * d
            ft, gt = fg(xt)
            if ft <= f + c * t * (g @ d):
                break
            t *= beta
        s, y = xt - x, gt - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if first and scale_first:
                H = (sy / (y @ y)) * np.eye(x.size)
            first = False
            rho = 1.0 / sy
            I = np.eye(x.size)
            H = (I - rho * np.outer(s, y)) @ H @ (I - rho * np.outer(y, s)) + rho * np.outer(s, s)
        x, f, g = xt, ft, gt
        trace.append((x.copy(), f))
    return trace
