"""Independent reference OPF in polar coordinates via scipy trust-constr.

This deliberately shares nothing with the package's rectangular QCQP path:
it builds the bus-admittance injection model straight from a parsed case
document, works in polar voltage coordinates with per-generator variables,
and solves with scipy's trust-region interior-point method.  Used only at
development time to freeze reference objectives into test fixtures.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import Bounds, NonlinearConstraint, minimize


def _ybus(doc):
    ids = [int(r[0]) for r in doc.bus]
    pos = {b: k for k, b in enumerate(ids)}
    n = len(ids)
    Y = np.zeros((n, n), dtype=complex)
    for r in doc.branch:
        i, j = pos[int(r[0])], pos[int(r[1])]
        y = 1.0 / complex(r[2], r[3])
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    return Y, pos


def solve_reference(doc, v0=None, tol=1e-9, max_iter=3000):
    """Minimize generation cost subject to polar power-flow balance.

    Returns (objective_dollars_per_hour, info dict).
    """
    base = doc.base_mva
    Y, pos = _ybus(doc)
    G, B = Y.real, Y.imag
    n = len(doc.bus)
    slack = next(k for k, r in enumerate(doc.bus) if int(r[1]) == 3)
    pd = np.array([r[2] for r in doc.bus]) / base
    qd = np.array([r[3] for r in doc.bus]) / base
    vmin = np.array([r[4] for r in doc.bus])
    vmax = np.array([r[5] for r in doc.bus])

    gbus = np.array([pos[int(r[0])] for r in doc.gen], dtype=int)
    ng = len(gbus)
    pgmin = np.array([r[1] for r in doc.gen]) / base
    pgmax = np.array([r[2] for r in doc.gen]) / base
    qgmin = np.array([r[3] for r in doc.gen]) / base
    qgmax = np.array([r[4] for r in doc.gen]) / base
    c2 = np.zeros(ng)
    c1 = np.zeros(ng)
    c0 = np.zeros(ng)
    for k, row in enumerate(doc.gencost):
        c2[k], c1[k], c0[k] = row

    # x = [theta (n, slack fixed by bounds), vm (n), pg (ng), qg (ng)]
    nth, nvm = n, n

    def split(x):
        th = x[:nth]
        vm = x[nth : nth + nvm]
        pg = x[nth + nvm : nth + nvm + ng]
        qg = x[nth + nvm + ng :]
        return th, vm, pg, qg

    def injections(th, vm):
        v = vm * np.exp(1j * th)
        s = v * np.conj(Y @ v)
        return s.real, s.imag

    def residuals(x):
        th, vm, pg, qg = split(x)
        p, q = injections(th, vm)
        dp = p + pd
        dq = q + qd
        np.add.at(dp, gbus, -pg)
        np.add.at(dq, gbus, -qg)
        return np.concatenate([dp, dq])

    def res_jac(x):
        th, vm, pg, qg = split(x)
        v = vm * np.exp(1j * th)
        ibus = Y @ v
        dSdVa = 1j * np.diag(v) @ (np.conj(np.diag(ibus)) - np.conj(Y @ np.diag(v)))
        dSdVm = np.diag(v / vm) @ np.conj(np.diag(ibus)) + np.diag(v) @ np.conj(
            Y @ np.diag(np.exp(1j * th))
        )
        jp = np.hstack([dSdVa.real, dSdVm.real])
        jq = np.hstack([dSdVa.imag, dSdVm.imag])
        top = np.zeros((n, 2 * n + 2 * ng))
        bot = np.zeros((n, 2 * n + 2 * ng))
        top[:, : 2 * n] = jp
        bot[:, : 2 * n] = jq
        for k, b in enumerate(gbus):
            top[b, 2 * n + k] -= 1.0
            bot[b, 2 * n + ng + k] -= 1.0
        return np.vstack([top, bot])

    def objective(x):
        _, _, pg, _ = split(x)
        pmw = pg * base
        return float(np.sum(c2 * pmw**2 + c1 * pmw + c0))

    def obj_grad(x):
        _, _, pg, _ = split(x)
        g = np.zeros_like(x)
        g[nth + nvm : nth + nvm + ng] = (2 * c2 * pg * base + c1) * base
        return g

    lo = np.concatenate(
        [np.full(n, -np.pi), vmin, pgmin, qgmin]
    )
    hi = np.concatenate([np.full(n, np.pi), vmax, pgmax, qgmax])
    lo[slack] = hi[slack] = 0.0

    x0 = np.zeros(2 * n + 2 * ng)
    x0[nth : nth + nvm] = np.clip(1.0 if v0 is None else v0, vmin, vmax)
    x0[nth + nvm : nth + nvm + ng] = np.clip(
        np.full(ng, np.sum(pd) / max(ng, 1)), pgmin, pgmax
    )
    x0[nth + nvm + ng :] = np.clip(0.0, qgmin, qgmax)

    con = NonlinearConstraint(residuals, 0.0, 0.0, jac=res_jac)
    res = minimize(
        objective,
        x0,
        jac=obj_grad,
        bounds=Bounds(lo, hi),
        constraints=[con],
        method="trust-constr",
        options={"gtol": tol, "xtol": 1e-12, "maxiter": max_iter, "verbose": 0},
    )
    th, vm, pg, qg = split(res.x)
    feas = float(np.max(np.abs(residuals(res.x))))
    return objective(res.x), {
        "status": res.status,
        "message": res.message,
        "feasibility": feas,
        "vm": vm,
        "pg_mw": pg * base,
        "niter": res.niter,
    }
