"""Independent reference implementations used only as test oracles."""

import numpy as np


def kron_all(mats):
    out = np.array([[1.0 + 0j]])
    for m in mats:
        out = np.kron(out, m)
    return out


def full_1q(u, target, n):
    """Dense 2**n operator for ``u`` on ``target`` (qubit 0 = least significant)."""
    mats = [np.eye(2)] * n
    mats[n - 1 - target] = u
    return kron_all(mats)


def full_cnot(control, target, n):
    dim = 1 << n
    m = np.zeros((dim, dim))
    for b in range(dim):
        out = b ^ (1 << target) if (b >> control) & 1 else b
        m[out, b] = 1.0
    return m


def ry(t):
    c, s = np.cos(t / 2), np.sin(t / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


def rz(t):
    return np.diag([np.exp(-0.5j * t), np.exp(0.5j * t)])


H = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
Z = np.diag([1.0, -1.0])


def circuit_reference(theta_y, theta_z, params, p_before_measurement=0.0):
    """Literal matrix-product simulation of the gated VQC for one sample."""
    theta_y = np.asarray(theta_y, float)
    theta_z = np.asarray(theta_z, float)
    n = len(theta_y)
    psi = np.zeros(1 << n, dtype=complex)
    psi[0] = 1
    for q in range(n):
        psi = full_1q(H, q, n) @ psi
        psi = full_1q(ry(theta_y[q]), q, n) @ psi
        psi = full_1q(rz(theta_z[q]), q, n) @ psi
    for layer in np.asarray(params, float):
        for i in range(n):
            psi = full_cnot(i, (i + 1) % n, n) @ psi
        for q in range(n):
            a, b, c = layer[q]
            psi = full_1q(rz(c) @ ry(b) @ rz(a), q, n) @ psi
    out = np.array([np.real(np.conj(psi) @ full_1q(Z, q, n) @ psi) for q in range(n)])
    return out * (1 - 2 * p_before_measurement)


def central_difference(fn, x, step):
    """Central finite-difference gradient of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = fn(x)
        flat[i] = old - step
        fm = fn(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * step)
    return grad


X = np.array([[0, 1], [1, 0]], dtype=complex)


def circuit_density_reference(theta_y, theta_z, params, p, after_each_layer=True):
    """Density-matrix simulation with a bit-flip channel on every qubit.

    Channels act after each variational layer (or only after the last one).
    """
    theta_y = np.asarray(theta_y, float)
    n = len(theta_y)
    psi = np.zeros(1 << n, dtype=complex)
    psi[0] = 1
    for q in range(n):
        psi = full_1q(rz(theta_z[q]) @ ry(theta_y[q]) @ H, q, n) @ psi
    rho = np.outer(psi, psi.conj())
    params = np.asarray(params, float)
    for li, layer in enumerate(params):
        for i in range(n):
            c = full_cnot(i, (i + 1) % n, n)
            rho = c @ rho @ c.T
        for q in range(n):
            a, b, g = layer[q]
            u = full_1q(rz(g) @ ry(b) @ rz(a), q, n)
            rho = u @ rho @ u.conj().T
        if after_each_layer or li == len(params) - 1:
            for q in range(n):
                x = full_1q(X, q, n)
                rho = (1 - p) * rho + p * x @ rho @ x
    return np.array([np.real(np.trace(full_1q(Z, q, n) @ rho)) for q in range(n)])


def mi_count_oracle(x, y, bins):
    """Plug-in MI by explicit loops over a rank table (no vectorisation)."""
    n = len(x)

    def labels(v):
        pairs = sorted(range(n), key=lambda i: (v[i], i))
        lab = [0] * n
        for r, i in enumerate(pairs):
            lab[i] = (r * bins) // n
        return lab

    lx, ly = labels(list(x)), labels(list(y))
    joint = {}
    for a, b in zip(lx, ly):
        joint[(a, b)] = joint.get((a, b), 0) + 1
    px = {a: lx.count(a) / n for a in set(lx)}
    py = {b: ly.count(b) / n for b in set(ly)}
    total = 0.0
    for (a, b), c in joint.items():
        pab = c / n
        total += pab * np.log2(pab / (px[a] * py[b]))
    return total


def adam_oracle(grad_fn, w0, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out from the update equations."""
    w, m, v = float(w0), 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        w = w - lr * mhat / (np.sqrt(vhat) + eps)
    return w


def savgol_normal_equations(y, window, order, i):
    """Smoothed value at index ``i`` from the normal equations.

    Near the ends the window is truncated at the series boundary and the
    order drops if too few samples remain.
    """
    y = np.asarray(y, float)
    half = window // 2
    lo, hi = max(0, i - half), min(len(y) - 1, i + half)
    x = np.arange(lo, hi + 1, dtype=float) - i
    a = np.vander(x, min(order, hi - lo) + 1, increasing=True)
    coef = np.linalg.solve(a.T @ a, a.T @ y[lo : hi + 1])
    return coef[0]
