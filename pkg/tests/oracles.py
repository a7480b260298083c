"""Independent reference implementations used to check the library.

Nothing here imports the optimizer or geometry internals; the math is
written out with plain 3x3 homogeneous matrices.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.optimize import least_squares


def mat(x, y, th):
    c, s = math.cos(th), math.sin(th)
    return np.array([[c, -s, x], [s, c, y], [0.0, 0.0, 1.0]])


def unmat(m):
    return np.array([m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0])])


def se2_log(m):
    """Matrix logarithm of an SE(2) element via the closed form V^-1 t."""
    th = math.atan2(m[1, 0], m[0, 0])
    t = m[:2, 2]
    if abs(th) < 1e-9:
        V = np.eye(2)
    else:
        V = np.array([[math.sin(th), -(1 - math.cos(th))], [1 - math.cos(th), math.sin(th)]]) / th
    rho = np.linalg.solve(V, t)
    return np.array([rho[0], rho[1], th])


def edge_error(xi, xj, z):
    """log(Z^-1 Xi^-1 Xj) computed with matrices."""
    return se2_log(np.linalg.inv(mat(*z)) @ np.linalg.inv(mat(*xi)) @ mat(*xj))


def solve_graph(poses, fixed, edges, robust):
    """Dense least squares over the free pose coordinates.

    ``edges`` are (i, j, z, info, is_loop). Quadratic edges contribute the
    Cholesky-whitened residual; robust edges contribute
    the same vector scaled so its squared norm is c2 * ln(1 + s / c2), with c2
    the mean translational information.
    Returns the optimized (n, 3) array and the final cost.
    """
    poses = np.array(poses, dtype=float)
    free = [k for k in range(len(poses)) if k not in fixed]

    def unpack(v):
        X = poses.copy()
        X[free] = v.reshape(-1, 3)
        return X

    def resid(v):
        X = unpack(v)
        out = []
        for i, j, z, info, loop in edges:
            e = edge_error(X[i], X[j], z)
            w = np.linalg.cholesky(info).T @ e
            if robust and loop:
                # scaling the whitened vector keeps the residual smooth at zero
                c2 = 0.5 * (info[0, 0] + info[1, 1])
                s = float(w @ w)
                w = w * (math.sqrt(math.log1p(s / c2) * c2 / s) if s > 0 else 1.0)
            out.extend(w)
        return np.array(out)

    sol = least_squares(resid, poses[free].ravel(), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                        max_nfev=20000)
    X = unpack(sol.x)
    return X, float(np.sum(resid(sol.x) ** 2))


def dbscan_min1(points, eps):
    """Connected components of the eps-neighbourhood graph by flood fill."""
    pts = np.asarray(points, dtype=float)
    label = [-1] * len(pts)
    cur = 0
    for s in range(len(pts)):
        if label[s] >= 0:
            continue
        stack = [s]
        label[s] = cur
        while stack:
            a = stack.pop()
            for b in range(len(pts)):
                if label[b] < 0 and np.linalg.norm(pts[a] - pts[b]) <= eps:
                    label[b] = cur
                    stack.append(b)
        cur += 1
    return label
