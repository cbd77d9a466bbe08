"""Dual simplex kernel for linear quantile regression.

The linear program solved is the dual of the pinball-loss problem::

    max  y'a   subject to   C'a = (1 - q) C'1,   0 <= a <= 1.

A basis is a set ``h`` of ``k`` observations (a vertex of the primal, where
those residuals are zero); non-basic dual variables sit at a bound that
matches the sign of their residual.  Each iteration removes a basic
observation whose dual value is outside ``[0, 1]`` and moves the primal
along the edge that frees it, passing breakpoints (bound flips) until the
directional derivative of the pinball loss turns non-negative.  This is the
Barrodale-Roberts line search expressed as a long-step dual simplex.
"""

from __future__ import annotations

import numba as nb
import numpy as np


@nb.njit(cache=True)
def _initial_basis(C, order, k):
    n = C.shape[0]
    basis = np.empty(k, dtype=np.int64)
    E = np.zeros((k, C.shape[1]))
    found = 0
    for idx in range(n):
        i = order[idx]
        v = C[i].copy()
        nv0 = np.sqrt(np.sum(v * v))
        if nv0 == 0.0:
            continue
        # modified Gram-Schmidt, applied twice to keep orthogonality
        for _ in range(2):
            for j in range(found):
                v -= np.dot(v, E[j]) * E[j]
        nv = np.sqrt(np.sum(v * v))
        if nv > 1e-8 * nv0:
            E[found] = v / nv
            basis[found] = i
            found += 1
            if found == k:
                break
    return basis, found


@nb.njit(cache=True)
def rq_simplex(y, C, q, order, tol, max_iter):
    """Returns ``(coef, residuals, basis, iterations, status)``.

    status: 0 optimal, 1 iteration limit, 2 no initial basis, 3 unbounded.
    """
    n, k = C.shape
    coef = np.zeros(k)
    resid = y.copy()
    basis, found = _initial_basis(C, order, k)
    if found < k:
        return coef, resid, basis, 0, 2

    in_basis = np.zeros(n, dtype=np.bool_)
    for p in range(k):
        in_basis[basis[p]] = True

    target = np.zeros(k)
    for i in range(n):
        target += (1.0 - q) * C[i]

    rownorm = np.empty(n)
    for i in range(n):
        rownorm[i] = np.sqrt(np.sum(C[i] * C[i]))

    upper = np.zeros(n, dtype=np.bool_)
    Bm = np.empty((k, k))
    for p in range(k):
        Bm[p] = C[basis[p]]
    Binv = np.linalg.inv(Bm)
    coef = Binv @ y[basis]
    resid = y - C @ coef
    for i in range(n):
        if in_basis[i]:
            resid[i] = 0.0
        else:
            upper[i] = resid[i] > 0.0

    t = np.empty(n)
    wgt = np.empty(n)
    cand = np.empty(n, dtype=np.int64)
    status = 1
    it = 0
    bland = False
    while it < max_iter:
        for p in range(k):
            Bm[p] = C[basis[p]]
        Binv = np.linalg.inv(Bm)
        coef = Binv @ y[basis]
        resid = y - C @ coef
        rhs = target.copy()
        for i in range(n):
            if in_basis[i]:
                resid[i] = 0.0
            elif upper[i]:
                rhs -= C[i]
        a = Binv.T @ rhs

        # leaving variable: the largest dual infeasibility (lowest observation
        # index on ties); after a degenerate step Bland's rule (lowest index)
        # is used instead, which rules out cycling
        leave_pos = -1
        leave_obs = n
        worst = 0.0
        for p in range(k):
            v = max(-a[p], a[p] - 1.0)
            if v <= tol:
                continue
            if bland:
                better = basis[p] < leave_obs
            else:
                better = v > worst or (v == worst and basis[p] < leave_obs)
            if better:
                worst = v
                leave_obs = basis[p]
                leave_pos = p
        if leave_pos < 0:
            status = 0
            break

        if a[leave_pos] > 1.0:
            sgn = -1.0
            slope = 1.0 - a[leave_pos]
        else:
            sgn = 1.0
            slope = a[leave_pos]

        delta = sgn * Binv[:, leave_pos]
        g = C @ delta
        # pivots that are tiny relative to |C_i| |delta| would make the next
        # basis numerically singular; such rows are treated as parallel
        dnorm = np.sqrt(np.sum(delta * delta))

        m = 0
        for i in range(n):
            if in_basis[i]:
                continue
            gi = g[i]
            gtol = 1e-10 * rownorm[i] * dnorm
            if upper[i]:
                if gi > gtol:
                    ti = resid[i] / gi
                else:
                    continue
            else:
                if gi < -gtol:
                    ti = resid[i] / gi
                else:
                    continue
            if ti < 0.0:
                ti = 0.0
            t[m] = ti
            wgt[m] = abs(gi)
            cand[m] = i
            m += 1
        if m == 0:
            status = 3
            break

        # candidates are visited in (t, observation index) order; the first
        # few are found by selection scans, the rest by a stable sort
        enter = -1
        done = 0
        while done < m and done < 8:
            best = done
            for c in range(done + 1, m):
                if t[c] < t[best] or (t[c] == t[best] and cand[c] < cand[best]):
                    best = c
            t[done], t[best] = t[best], t[done]
            wgt[done], wgt[best] = wgt[best], wgt[done]
            cand[done], cand[best] = cand[best], cand[done]
            j = cand[done]
            slope += wgt[done]
            done += 1
            if slope >= 0.0:
                enter = j
                bland = t[done - 1] <= 0.0
                break
            upper[j] = not upper[j]
        if enter < 0 and done < m:
            rest = np.empty(m - done, dtype=np.int64)
            for c in range(done, m):
                rest[c - done] = c
            # lexicographic (t, index) order
            key = np.argsort(cand[done:m], kind="mergesort")
            rest = rest[key]
            key2 = np.argsort(t[rest], kind="mergesort")
            rest = rest[key2]
            for c in range(rest.size):
                r = rest[c]
                j = cand[r]
                slope += wgt[r]
                if slope >= 0.0:
                    enter = j
                    bland = t[r] <= 0.0
                    break
                upper[j] = not upper[j]
        if enter < 0:
            status = 3
            break

        in_basis[leave_obs] = False
        upper[leave_obs] = sgn < 0.0
        in_basis[enter] = True
        upper[enter] = False
        basis[leave_pos] = enter
        it += 1

    for i in range(n):
        if in_basis[i]:
            resid[i] = 0.0
    return coef, resid, basis, it, status
