"""
Compiled log-posterior kernel.

Mirrors :meth:`biasmrp.model.PosteriorModel.reference_log_prob_and_grad`
on packed arrays so a single call does the whole evaluation without Python
overhead. The numpy implementation stays the reference; tests hold the two
together.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)
LOG_PI = math.log(math.pi)

KIND_UNSTRUCTURED = 0
KIND_RANDOM_WALK = 1
KIND_BYM2 = 2
LIK_BERNOULLI = 0
LIK_MULTINOMIAL = 1


@njit(cache=True)
def _log_sigmoid(v):
    if v > -30.0:
        return -math.log1p(math.exp(-v))
    return v - math.log1p(math.exp(v))


@njit(cache=True)
def log_prob_grad(theta, need_grad, lik, choice, offset, alpha_sd, beta_sd,
                  blk_alpha, blk_beta, n_fixed,
                  comp_kind, comp_levels, comp_main0, comp_main1, comp_xi, comp_scale,
                  P_flat, P_off, consts, island, mainland, mis, goff,
                  W_indptr, W_indices, W_data, WT_indptr, WT_indices, WT_data,
                  counts, trials):
    dim = theta.size
    grad = np.zeros(dim)
    nb = blk_alpha.size
    C = comp_levels.size
    G = goff[C]
    nf = 1 + n_fixed
    ncoef = nf + G
    coef = np.zeros((nb, ncoef))
    svals = np.zeros((nb, C))
    xivals = np.zeros((nb, C))
    omxvals = np.zeros((nb, C))
    lp = 0.0
    for b in range(nb):
        ia = blk_alpha[b]
        a = theta[ia]
        lp += -0.5 * (a / alpha_sd) ** 2 - math.log(alpha_sd) - 0.5 * LOG_2PI
        grad[ia] -= a / alpha_sd ** 2
        coef[b, 0] = a
        for p in range(n_fixed):
            j = blk_beta[b] + p
            x = theta[j]
            lp += -0.5 * (x / beta_sd) ** 2 - math.log(beta_sd) - 0.5 * LOG_2PI
            grad[j] -= x / beta_sd ** 2
            coef[b, 1 + p] = x
        for c in range(C):
            k = b * C + c
            iu = comp_scale[k]
            u = theta[iu]
            s = math.exp(u)
            svals[b, c] = s
            lp += LOG_2 - 0.5 * LOG_2PI - 0.5 * s * s + u
            grad[iu] += 1.0 - s * s
            U = comp_levels[c]
            po = P_off[c]
            lp += consts[c]
            g0 = nf + goff[c]
            if comp_kind[c] == KIND_BYM2:
                ix = comp_xi[k]
                v = theta[ix]
                lx = _log_sigmoid(v)
                lmx = _log_sigmoid(-v)
                xi = math.exp(lx)
                omx = math.exp(lmx)
                xivals[b, c] = xi
                omxvals[b, c] = omx
                lp += -LOG_PI + 0.5 * lx + 0.5 * lmx
                grad[ix] += 0.5 - xi
                ph0 = comp_main0[k]
                ps0 = comp_main1[k]
                sa = math.sqrt(omx)
                rx = math.sqrt(xi)
                for l in range(U):
                    phi = theta[ph0 + l]
                    lp += -0.5 * phi * phi - 0.5 * LOG_2PI
                    grad[ph0 + l] -= phi
                    acc = 0.0
                    for m in range(U):
                        acc += P_flat[po + l * U + m] * theta[ps0 + m]
                    psi = theta[ps0 + l]
                    lp -= 0.5 * psi * acc
                    grad[ps0 + l] -= acc
                    gl = goff[c] + l
                    coef[b, g0 + l] = s * (phi * (mainland[gl] * sa + island[gl]) + psi * rx * mis[gl])
            else:
                z0 = comp_main0[k]
                for l in range(U):
                    acc = 0.0
                    for m in range(U):
                        acc += P_flat[po + l * U + m] * theta[z0 + m]
                    z = theta[z0 + l]
                    lp -= 0.5 * z * acc
                    grad[z0 + l] -= acc
                    coef[b, g0 + l] = s * z
    n = trials.size
    if n == 0:
        return lp, grad
    resid = np.zeros((nb, n))
    for i in range(n):
        lo = W_indptr[i]
        hi = W_indptr[i + 1]
        if lik == LIK_BERNOULLI:
            e = offset
            for q in range(lo, hi):
                e += W_data[q] * coef[0, W_indices[q]]
            ex = math.exp(-abs(e))
            sp = max(e, 0.0) + math.log1p(ex)
            y = counts[i, choice]
            lp += y * e - trials[i] * sp
            inv1p = 1.0 / (1.0 + ex)
            sig = inv1p if e >= 0 else ex * inv1p
            resid[0, i] = y - trials[i] * sig
        else:
            mx = 0.0
            etas = np.empty(nb)
            for b in range(nb):
                e = 0.0
                for q in range(lo, hi):
                    e += W_data[q] * coef[b, W_indices[q]]
                etas[b] = e
                if e > mx:
                    mx = e
            tot = math.exp(-mx)
            for b in range(nb):
                tot += math.exp(etas[b] - mx)
            lse = mx + math.log(tot)
            for b in range(nb):
                lp += counts[i, b] * etas[b]
                resid[b, i] = counts[i, b] - trials[i] * math.exp(etas[b] - lse)
            lp -= trials[i] * lse
    if not need_grad or not math.isfinite(lp):
        return lp, grad
    dcoef = np.zeros(ncoef)
    for b in range(nb):
        for r in range(ncoef):
            acc = 0.0
            for q in range(WT_indptr[r], WT_indptr[r + 1]):
                acc += WT_data[q] * resid[b, WT_indices[q]]
            dcoef[r] = acc
        grad[blk_alpha[b]] += dcoef[0]
        for p in range(n_fixed):
            grad[blk_beta[b] + p] += dcoef[1 + p]
        for c in range(C):
            k = b * C + c
            s = svals[b, c]
            U = comp_levels[c]
            g0 = nf + goff[c]
            ds = 0.0
            if comp_kind[c] == KIND_BYM2:
                xi = xivals[b, c]
                omx = omxvals[b, c]
                sa = math.sqrt(omx)
                rx = math.sqrt(xi)
                ph0 = comp_main0[k]
                ps0 = comp_main1[k]
                uu = 0.0
                ww = 0.0
                for l in range(U):
                    gl = goff[c] + l
                    dg = dcoef[g0 + l]
                    cphi = mainland[gl] * sa + island[gl]
                    cpsi = rx * mis[gl]
                    phi = theta[ph0 + l]
                    psi = theta[ps0 + l]
                    grad[ph0 + l] += s * dg * cphi
                    grad[ps0 + l] += s * dg * cpsi
                    uu += dg * phi * mainland[gl]
                    ww += dg * psi * mis[gl]
                    ds += dg * (phi * cphi + psi * cpsi)
                grad[comp_xi[k]] += 0.5 * s * (-uu * sa * xi + ww * rx * omx)
            else:
                z0 = comp_main0[k]
                for l in range(U):
                    dg = dcoef[g0 + l]
                    grad[z0 + l] += s * dg
                    ds += dg * theta[z0 + l]
            grad[comp_scale[k]] += ds * s
    return lp, grad
