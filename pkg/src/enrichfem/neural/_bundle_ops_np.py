"""Reference kernels for derivative-bundle propagation.

A bundle carries, for every unit of a layer, the value and its spatial
derivatives: gradient, Hessian, and the contracted third order
t_d = sum_a d^3/dx_a dx_a dx_d (the gradient of the Laplacian; full third
tensors are never needed).  Slot layout puts the unit axis last:

    Z0 (n, w)   Z1 (n, d, w)   Z2 (n, d, d, w)   Z3 (n, d, w)

Contractions over the spatial axis are written as explicit ascending loops
(d <= 2) so the compiled twin can match this arithmetic exactly; do not
replace them with sum()/einsum reductions.
"""

import numpy as np

SINE, TANH = 0, 1
BACKEND = "numpy"


def act_derivs(act, z, upto):
    """sigma(z) and its first `upto` derivatives."""
    if act == SINE:
        s, c = np.sin(z), np.cos(z)
        return (s, c, -s, -c, s)[: upto + 1]
    if act == TANH:
        t = np.tanh(z)
        s = 1.0 - t * t
        out = [t, s]
        if upto >= 2:
            out.append(-2.0 * t * s)
        if upto >= 3:
            out.append((4.0 * t * t - 2.0 * s) * s)
        if upto >= 4:
            out.append((16.0 * t * s - 8.0 * t * t * t) * s)
        return tuple(out)
    raise ValueError(f"unknown activation id {act}")


def _grad_sq(Z1, d):
    g2 = Z1[:, 0, :] * Z1[:, 0, :]
    for c in range(1, d):
        g2 = g2 + Z1[:, c, :] * Z1[:, c, :]
    return g2


def _trace(Z2, d):
    lap = Z2[:, 0, 0, :]
    for c in range(1, d):
        lap = lap + Z2[:, c, c, :]
    return lap


def _hess_dot_grad(Z2, Z1, d):
    Hz = np.empty_like(Z1)
    for dd in range(d):
        acc = Z2[:, 0, dd, :] * Z1[:, 0, :]
        for a in range(1, d):
            acc = acc + Z2[:, a, dd, :] * Z1[:, a, :]
        Hz[:, dd, :] = acc
    return Hz


def act_forward(act, Z0, Z1, Z2, Z3):
    """Push a bundle through the activation (chain rule per unit)."""
    order = 1 + (Z2 is not None) + (Z3 is not None)
    sd = act_derivs(act, Z0, order)
    V0 = sd[0]
    s1 = sd[1]
    V1 = s1[:, None, :] * Z1
    V2 = V3 = None
    if Z2 is not None:
        s2 = sd[2]
        d = Z1.shape[1]
        V2 = np.empty_like(Z2)
        for a in range(d):
            for b in range(a, d):
                # fill both triangles from one value so symmetry is exact
                val = s2 * Z1[:, a, :] * Z1[:, b, :] + s1 * Z2[:, a, b, :]
                V2[:, a, b, :] = val
                if b > a:
                    V2[:, b, a, :] = val
        if Z3 is not None:
            s3 = sd[3]
            g2 = _grad_sq(Z1, d)
            lap = _trace(Z2, d)
            Hz = _hess_dot_grad(Z2, Z1, d)
            coeff = s3 * g2 + s2 * lap
            V3 = np.empty_like(Z3)
            for dd in range(d):
                V3[:, dd, :] = (
                    coeff * Z1[:, dd, :]
                    + 2.0 * s2 * Hz[:, dd, :]
                    + s1 * Z3[:, dd, :]
                )
    return V0, V1, V2, V3


def act_backward(act, Z0, Z1, Z2, Z3, Vb0, Vb1, Vb2, Vb3):
    """Exact transpose of act_forward: bundle cotangents out of the mixing."""
    order = 1 + (Z2 is not None) + (Z3 is not None)
    sd = act_derivs(act, Z0, order + 1)
    s1, s2 = sd[1], sd[2]
    d = Z1.shape[1]

    Zb0 = Vb0 * s1
    Zb1 = s1[:, None, :] * Vb1
    for a in range(d):
        Zb0 = Zb0 + Vb1[:, a, :] * s2 * Z1[:, a, :]
    Zb2 = Zb3 = None

    if Z2 is not None:
        s3 = sd[3]
        Zb2 = s1[:, None, None, :] * Vb2
        for a in range(d):
            for b in range(d):
                vb = Vb2[:, a, b, :]
                Zb0 = Zb0 + vb * (s3 * Z1[:, a, :] * Z1[:, b, :] + s2 * Z2[:, a, b, :])
                Zb1[:, a, :] += s2 * vb * Z1[:, b, :]
                Zb1[:, b, :] += s2 * vb * Z1[:, a, :]

    if Z3 is not None:
        s4 = sd[4]
        g2 = _grad_sq(Z1, d)
        lap = _trace(Z2, d)
        Hz = _hess_dot_grad(Z2, Z1, d)
        # c = sum_d tbar_d z_d, the shared contraction of the third-order term
        c = Vb3[:, 0, :] * Z1[:, 0, :]
        for dd in range(1, d):
            c = c + Vb3[:, dd, :] * Z1[:, dd, :]
        tHz = Vb3[:, 0, :] * Hz[:, 0, :]
        tZ3 = Vb3[:, 0, :] * Z3[:, 0, :]
        for dd in range(1, d):
            tHz = tHz + Vb3[:, dd, :] * Hz[:, dd, :]
            tZ3 = tZ3 + Vb3[:, dd, :] * Z3[:, dd, :]
        Zb0 = Zb0 + s4 * g2 * c + s3 * (lap * c + 2.0 * tHz) + s2 * tZ3
        Zb3 = s1[:, None, :] * Vb3
        coeff = s3 * g2 + s2 * lap
        g2b = s3 * c
        for a in range(d):
            acc = coeff * Vb3[:, a, :] + 2.0 * g2b * Z1[:, a, :]
            for dd in range(d):
                acc = acc + 2.0 * s2 * Vb3[:, dd, :] * Z2[:, a, dd, :]
            Zb1[:, a, :] += acc
        lapb = s2 * c
        for a in range(d):
            Zb2[:, a, a, :] += lapb
            for dd in range(d):
                Zb2[:, a, dd, :] += 2.0 * s2 * Vb3[:, dd, :] * Z1[:, a, :]

    return Zb0, Zb1, Zb2, Zb3


def fourier_forward(x, freq_a, freq_b, order, F0, F1, F2, F3):
    """Fill the Fourier-feature rows of the input bundle in place.

    Feature columns per frequency l: first sin(pi a_l x_c) for each spatial
    coordinate c, then cos(pi b_l x_c).  Arrays are the feature-column views
    of the input slots.
    """
    n, d = x.shape
    for l in range(freq_a.shape[0]):
        for c in range(d):
            js, jc = l * 2 * d + c, l * 2 * d + d + c
            wa = np.pi * freq_a[l]
            wb = np.pi * freq_b[l]
            sa, ca = np.sin(wa * x[:, c]), np.cos(wa * x[:, c])
            sb, cb = np.sin(wb * x[:, c]), np.cos(wb * x[:, c])
            F0[:, js] = sa
            F0[:, jc] = cb
            F1[:, c, js] = wa * ca
            F1[:, c, jc] = -wb * sb
            if order >= 2:
                F2[:, c, c, js] = -(wa * wa) * sa
                F2[:, c, c, jc] = -(wb * wb) * cb
            if order >= 3:
                F3[:, c, js] = -(wa**3) * ca
                F3[:, c, jc] = (wb**3) * sb


def fourier_backward(x, freq_a, freq_b, order, Fb0, Fb1, Fb2, Fb3):
    """Frequency gradients from the feature-row cotangents."""
    n, d = x.shape
    n_f = freq_a.shape[0]
    da = np.zeros(n_f)
    db = np.zeros(n_f)
    pi = np.pi
    for l in range(n_f):
        for c in range(d):
            js, jc = l * 2 * d + c, l * 2 * d + d + c
            xc = x[:, c]
            wa = pi * freq_a[l]
            wb = pi * freq_b[l]
            sa, ca = np.sin(wa * xc), np.cos(wa * xc)
            sb, cb = np.sin(wb * xc), np.cos(wb * xc)
            ga = Fb0[:, js] * (pi * xc * ca)
            ga = ga + Fb1[:, c, js] * (pi * ca - wa * pi * xc * sa)
            gb = Fb0[:, jc] * (-pi * xc * sb)
            gb = gb + Fb1[:, c, jc] * (-pi * sb - wb * pi * xc * cb)
            if order >= 2:
                ga = ga + Fb2[:, c, c, js] * (
                    -2.0 * pi * wa * sa - wa * wa * pi * xc * ca
                )
                gb = gb + Fb2[:, c, c, jc] * (
                    -2.0 * pi * wb * cb + wb * wb * pi * xc * sb
                )
            if order >= 3:
                ga = ga + Fb3[:, c, js] * (
                    -3.0 * pi * wa * wa * ca + wa**3 * pi * xc * sa
                )
                gb = gb + Fb3[:, c, jc] * (
                    3.0 * pi * wb * wb * sb + wb**3 * pi * xc * cb
                )
            da[l] += ga.sum()
            db[l] += gb.sum()
    return da, db
