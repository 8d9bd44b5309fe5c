"""JIT-compiled numerical kernels shared by the network, LNA and filter code.

Everything here works on plain arrays so it can be compiled by numba.  The
parameter axis of every sensitivity array is the leading one:
``d_mean[l, j]`` is the derivative of ``mean[j]`` w.r.t. parameter ``l`` and
``d_cov[l, i, j]`` that of ``cov[i, j]``.  The first ``n_theta`` parameters
are kinetic constants, the remaining ones measurement-noise variances.

Status codes returned by the filter kernels:
    0  success
    1  non-finite moment (Euler step unstable or overflow)
    2  innovation covariance not positive definite after jitter escalation
"""

from __future__ import annotations

import numpy as np
from numba import njit

OK = 0
NON_FINITE = 1
NOT_PD = 2

_LOG_2PI = float(np.log(2.0 * np.pi))
_JITTER_STEPS = 6
# reassociation only: nan/inf checks must keep IEEE semantics
_FASTMATH = {"reassoc", "contract", "nsz", "arcp"}


# ---------------------------------------------------------------------------
# mass-action rates and their derivatives
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=_FASTMATH, error_model="numpy")
def monomial(pk, s, i, j):
    """prod_m s_m**pk[m], differentiated w.r.t. s_i and then s_j (-1 = none)."""
    coef = 1.0
    val = 1.0
    for m in range(s.shape[0]):
        e = pk[m]
        if m == i:
            coef *= e
            e -= 1
        if m == j:
            coef *= e
            e -= 1
        if coef == 0.0:
            return 0.0
        for _ in range(e):
            val *= s[m]
    return coef * val


@njit(cache=True, fastmath=_FASTMATH, error_model="numpy")
def mass_action(reactants, param_index, theta, s, order, v, mono, jac, dmono, hess):
    """Fill rate arrays in place.

    ``v[k]`` is the rate, ``mono[k] = dv_k/dtheta_{n(k)}``, ``jac[k, i] = dv_k/ds_i``,
    ``dmono[k, i] = d2 v_k / ds_i dtheta_{n(k)}`` and
    ``hess[k, i, j] = d2 v_k / ds_i ds_j``.  ``order`` selects how much is
    computed (0, 1 or 2).  A rate that evaluates negative is clamped to zero
    together with all of its derivatives.
    """
    n_reactions, n_species = reactants.shape
    for k in range(n_reactions):
        pk = reactants[k]
        th = theta[param_index[k]]
        mk = monomial(pk, s, -1, -1)
        vk = th * mk
        if vk < 0.0:
            v[k] = 0.0
            mono[k] = 0.0
            if order >= 1:
                for i in range(n_species):
                    jac[k, i] = 0.0
                    dmono[k, i] = 0.0
            if order >= 2:
                for i in range(n_species):
                    for j in range(n_species):
                        hess[k, i, j] = 0.0
            continue
        v[k] = vk
        mono[k] = mk
        if order >= 1:
            for i in range(n_species):
                d = monomial(pk, s, i, -1)
                dmono[k, i] = d
                jac[k, i] = th * d
        if order >= 2:
            for i in range(n_species):
                for j in range(i, n_species):
                    h = th * monomial(pk, s, i, j)
                    hess[k, i, j] = h
                    hess[k, j, i] = h


@njit(cache=True, fastmath=_FASTMATH, error_model="numpy")
def _drift_terms(stoich, v, jac, inv_omega, mu, a_mat, d_mat):
    """mu = C v, A = C dv/ds, D = C diag(v) C^T / Omega (exactly symmetric)."""
    n_species, n_reactions = stoich.shape
    for i in range(n_species):
        acc = 0.0
        for k in range(n_reactions):
            acc += stoich[i, k] * v[k]
        mu[i] = acc
        for j in range(n_species):
            acc = 0.0
            for k in range(n_reactions):
                acc += stoich[i, k] * jac[k, j]
            a_mat[i, j] = acc
    for i in range(n_species):
        for j in range(i, n_species):
            acc = 0.0
            for k in range(n_reactions):
                acc += stoich[i, k] * v[k] * stoich[j, k]
            acc *= inv_omega
            d_mat[i, j] = acc
            d_mat[j, i] = acc


# ---------------------------------------------------------------------------
# LNA moment propagation
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=_FASTMATH, error_model="numpy")
def lna_predict(
    reactants, param_index, stoich, inv_omega, theta,
    mean, pert, cov, d_mean, d_pert, d_cov,
    dt, substeps, with_pert, with_sens,
):
    """Advance the LNA moments by ``substeps`` explicit Euler steps in place.

    The sensitivity arrays are updated by differentiating the discrete Euler
    map itself, so they are the exact gradient of what is computed here.
    """
    n_species, n_reactions = stoich.shape
    n_par = d_mean.shape[0]
    dz = dt / substeps

    v = np.empty(n_reactions)
    mono = np.empty(n_reactions)
    jac = np.empty((n_reactions, n_species))
    dmono = np.empty((n_reactions, n_species))
    hess = np.empty((n_reactions, n_species, n_species))
    mu = np.empty(n_species)
    a_mat = np.empty((n_species, n_species))
    d_mat = np.empty((n_species, n_species))
    tmp = np.empty((n_species, n_species))
    new_cov = np.empty((n_species, n_species))
    new_pert = np.empty(n_species)
    dv = np.empty(n_reactions)
    djac = np.empty((n_reactions, n_species))
    da = np.empty((n_species, n_species))
    new_dmean = np.empty((n_par, n_species))
    new_dpert = np.empty((n_par, n_species))
    new_dcov = np.empty((n_par, n_species, n_species))

    order = 2 if with_sens else 1
    for _ in range(substeps):
        mass_action(reactants, param_index, theta, mean, order, v, mono, jac, dmono, hess)
        _drift_terms(stoich, v, jac, inv_omega, mu, a_mat, d_mat)

        if with_sens:
            for l in range(n_par):
                # directional derivative of v and dv/ds along this parameter
                for k in range(n_reactions):
                    acc = 0.0
                    for j in range(n_species):
                        acc += jac[k, j] * d_mean[l, j]
                    if param_index[k] == l:
                        acc += mono[k]
                    dv[k] = acc
                    for i in range(n_species):
                        acc = 0.0
                        for j in range(n_species):
                            if hess[k, i, j] != 0.0:
                                acc += hess[k, i, j] * d_mean[l, j]
                        if param_index[k] == l:
                            acc += dmono[k, i]
                        djac[k, i] = acc
                for i in range(n_species):
                    acc = 0.0
                    for j in range(n_species):
                        da[i, j] = 0.0
                    for k in range(n_reactions):
                        c = stoich[i, k]
                        if c != 0:
                            acc += c * dv[k]
                            for j in range(n_species):
                                da[i, j] += c * djac[k, j]
                    new_dmean[l, i] = d_mean[l, i] + acc * dz
                # X = dPsi A^T + Psi dA^T;  dPsi+ = dPsi + (X + X^T + dD) dz
                for i in range(n_species):
                    for j in range(n_species):
                        acc = 0.0
                        for m in range(n_species):
                            acc += d_cov[l, i, m] * a_mat[j, m] + cov[i, m] * da[j, m]
                        tmp[i, j] = acc
                for i in range(n_species):
                    for j in range(i, n_species):
                        dd = 0.0
                        for k in range(n_reactions):
                            if stoich[i, k] != 0 and stoich[j, k] != 0:
                                dd += stoich[i, k] * dv[k] * stoich[j, k]
                        val = d_cov[l, i, j] + (tmp[i, j] + tmp[j, i] + dd * inv_omega) * dz
                        new_dcov[l, i, j] = val
                        new_dcov[l, j, i] = val
                if with_pert:
                    for i in range(n_species):
                        acc = 0.0
                        for j in range(n_species):
                            acc += da[i, j] * pert[j] + a_mat[i, j] * d_pert[l, j]
                        new_dpert[l, i] = d_pert[l, i] + acc * dz

        # moments, all right-hand sides evaluated at the pre-step state
        for i in range(n_species):
            for j in range(n_species):
                acc = 0.0
                for m in range(n_species):
                    acc += cov[i, m] * a_mat[j, m]
                tmp[i, j] = acc
        for i in range(n_species):
            for j in range(i, n_species):
                val = cov[i, j] + (tmp[i, j] + tmp[j, i] + d_mat[i, j]) * dz
                new_cov[i, j] = val
                new_cov[j, i] = val
        if with_pert:
            for i in range(n_species):
                acc = 0.0
                for j in range(n_species):
                    acc += a_mat[i, j] * pert[j]
                new_pert[i] = pert[i] + acc * dz
        for i in range(n_species):
            mean[i] += mu[i] * dz
            if with_pert:
                pert[i] = new_pert[i]
            for j in range(n_species):
                cov[i, j] = new_cov[i, j]
        if with_sens:
            d_mean[:, :] = new_dmean
            d_cov[:, :, :] = new_dcov
            if with_pert:
                d_pert[:, :] = new_dpert

    for i in range(n_species):
        if not np.isfinite(mean[i]) or not np.isfinite(pert[i]):
            return NON_FINITE
        for j in range(n_species):
            if not np.isfinite(cov[i, j]):
                return NON_FINITE
    return OK


# ---------------------------------------------------------------------------
# measurement update
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=_FASTMATH, error_model="numpy")
def _cholesky(a, out):
    n = a.shape[0]
    for j in range(n):
        acc = a[j, j]
        for m in range(j):
            acc -= out[j, m] * out[j, m]
        if not acc > 0.0:
            return False
        ljj = np.sqrt(acc)
        out[j, j] = ljj
        for i in range(j + 1, n):
            acc = a[i, j]
            for m in range(j):
                acc -= out[i, m] * out[j, m]
            out[i, j] = acc / ljj
        for i in range(j):
            out[i, j] = 0.0
    return True


@njit(cache=True, fastmath=_FASTMATH, error_model="numpy")
def _cho_solve_vec(chol, b, out):
    n = chol.shape[0]
    for i in range(n):
        acc = b[i]
        for m in range(i):
            acc -= chol[i, m] * out[m]
        out[i] = acc / chol[i, i]
    for i in range(n - 1, -1, -1):
        acc = out[i]
        for m in range(i + 1, n):
            acc -= chol[m, i] * out[m]
        out[i] = acc / chol[i, i]


@njit(cache=True, fastmath=_FASTMATH, error_model="numpy")
def factor_innovation(s_mat, chol, jitter):
    """Cholesky of S; on failure retry with diagonals scaled by 1 + jitter * 2**m."""
    if _cholesky(s_mat, chol):
        return True
    n = s_mat.shape[0]
    work = s_mat.copy()
    for m in range(_JITTER_STEPS):
        scale = 1.0 + jitter * 2.0**m
        for i in range(n):
            work[i, i] = s_mat[i, i] * scale
        if _cholesky(work, chol):
            return True
    return False


@njit(cache=True, fastmath=_FASTMATH, error_model="numpy")
def kalman_update(
    mean, cov, d_mean, d_cov, y, obs_idx, var_pos, eta,
    with_sens, apply, jitter, grad_out,
):
    """Condition the Gaussian N(mean, cov) on y = G s + eps.

    ``obs_idx[a]`` is the species observed by entry ``a`` of ``y`` and
    ``var_pos[a]`` the position in ``eta`` of its noise variance.  Returns
    ``(status, log predictive density)``; the gradient of the latter is
    written to ``grad_out``.  With ``apply`` the state and its sensitivities
    are overwritten by the posterior (alpha, beta).
    """
    n_species = mean.shape[0]
    n_obs = y.shape[0]
    n_par = d_mean.shape[0]

    s_mat = np.empty((n_obs, n_obs))
    for a in range(n_obs):
        for b in range(n_obs):
            s_mat[a, b] = cov[obs_idx[a], obs_idx[b]]
        s_mat[a, a] += eta[var_pos[a]]
    chol = np.zeros((n_obs, n_obs))
    if not factor_innovation(s_mat, chol, jitter):
        return NOT_PD, np.nan

    resid = np.empty(n_obs)
    for a in range(n_obs):
        resid[a] = y[a] - mean[obs_idx[a]]
    w = np.empty(n_obs)
    _cho_solve_vec(chol, resid, w)

    logdet = 0.0
    quad = 0.0
    for a in range(n_obs):
        logdet += 2.0 * np.log(chol[a, a])
        quad += resid[a] * w[a]
    logpred = -0.5 * (n_obs * _LOG_2PI + logdet + quad)

    # gain K = Psi G^T S^-1, stored as (n_species, n_obs)
    gain = np.empty((n_species, n_obs))
    col = np.empty(n_obs)
    sol = np.empty(n_obs)
    for i in range(n_species):
        for a in range(n_obs):
            col[a] = cov[i, obs_idx[a]]
        _cho_solve_vec(chol, col, sol)
        for a in range(n_obs):
            gain[i, a] = sol[a]

    if with_sens:
        ds = np.empty((n_obs, n_obs))
        tmp = np.empty(n_obs)
        dw = np.empty(n_obs)
        new_dmean = np.empty((n_par, n_species))
        new_dcov = np.empty((n_par, n_species, n_species))
        for l in range(n_par):
            for a in range(n_obs):
                for b in range(n_obs):
                    ds[a, b] = d_cov[l, obs_idx[a], obs_idx[b]]
                if var_pos[a] == l:
                    ds[a, a] += 1.0
            # tr(S^-1 dS)
            trace = 0.0
            for b in range(n_obs):
                for a in range(n_obs):
                    col[a] = ds[a, b]
                _cho_solve_vec(chol, col, sol)
                trace += sol[b]
            # de = -G dm ; dlogpred = -tr/2 - w.de + w.dS.w/2
            wdw = 0.0
            wde = 0.0
            for a in range(n_obs):
                acc = 0.0
                for b in range(n_obs):
                    acc += ds[a, b] * w[b]
                tmp[a] = -d_mean[l, obs_idx[a]] - acc  # de - dS w
                wdw += w[a] * acc
                wde += -w[a] * d_mean[l, obs_idx[a]]
            grad_out[l] = -0.5 * trace - wde + 0.5 * wdw
            if not apply:
                continue
            _cho_solve_vec(chol, tmp, dw)
            # d alpha = dm + dPsi G^T w + Psi G^T dw
            for i in range(n_species):
                acc = d_mean[l, i]
                for a in range(n_obs):
                    acc += d_cov[l, i, obs_idx[a]] * w[a] + cov[i, obs_idx[a]] * dw[a]
                new_dmean[l, i] = acc
            # d beta = dPsi - dPsi G^T K^T - K G dPsi + K dS K^T
            for i in range(n_species):
                for j in range(i, n_species):
                    acc = d_cov[l, i, j]
                    for a in range(n_obs):
                        acc -= d_cov[l, i, obs_idx[a]] * gain[j, a]
                        acc -= gain[i, a] * d_cov[l, obs_idx[a], j]
                        for b in range(n_obs):
                            acc += gain[i, a] * ds[a, b] * gain[j, b]
                    new_dcov[l, i, j] = acc
                    new_dcov[l, j, i] = acc
        if apply:
            d_mean[:, :] = new_dmean
            d_cov[:, :, :] = new_dcov

    if apply:
        new_cov = np.empty((n_species, n_species))
        for i in range(n_species):
            for j in range(i, n_species):
                acc = cov[i, j]
                for a in range(n_obs):
                    acc -= gain[i, a] * cov[obs_idx[a], j]
                new_cov[i, j] = acc
                new_cov[j, i] = acc
        for i in range(n_species):
            acc = 0.0
            for a in range(n_obs):
                acc += cov[i, obs_idx[a]] * w[a]
            mean[i] += acc
        cov[:, :] = new_cov
    return OK, logpred


# ---------------------------------------------------------------------------
# whole filter
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=_FASTMATH, error_model="numpy")
def run_filter(
    reactants, param_index, stoich, inv_omega, eta, n_theta,
    init_mean, init_pert, init_cov,
    dts, substeps, obs_ptr, obs_idx, var_pos, y_flat,
    updating, with_sens, jitter,
    pred_mean, pred_cov, post_mean, post_cov, grad,
):
    """Evaluate the LNA log-likelihood of all observations.

    Observation block ``h`` occupies ``obs_ptr[h]:obs_ptr[h + 1]`` of the flat
    observation arrays.  ``updating`` selects between re-initialising the
    moments from each measurement posterior and propagating the prior LNA
    through all observation times untouched.

    Returns ``(status, failing block, loglik)``.
    """
    n_species = init_mean.shape[0]
    n_par = eta.shape[0]
    n_blocks = obs_ptr.shape[0] - 1
    theta = eta[:n_theta]

    mean = init_mean.copy()
    pert = init_pert.copy()
    cov = init_cov.copy()
    d_mean = np.zeros((n_par, n_species))
    d_pert = np.zeros((n_par, n_species))
    d_cov = np.zeros((n_par, n_species, n_species))
    total = np.empty(n_species)
    d_total = np.empty((n_par, n_species))
    block_grad = np.zeros(n_par)
    for l in range(n_par):
        grad[l] = 0.0

    with_pert = False
    for i in range(n_species):
        if pert[i] != 0.0:
            with_pert = True

    loglik = 0.0
    for h in range(n_blocks):
        if h > 0:
            status = lna_predict(
                reactants, param_index, stoich, inv_omega, theta,
                mean, pert, cov, d_mean, d_pert, d_cov,
                dts[h - 1], substeps[h - 1], with_pert, with_sens,
            )
            if status != OK:
                return status, h, np.nan
        for i in range(n_species):
            total[i] = mean[i] + pert[i]
            for l in range(n_par):
                d_total[l, i] = d_mean[l, i] + d_pert[l, i]
        pred_mean[h, :] = total
        pred_cov[h, :, :] = cov
        lo = obs_ptr[h]
        hi = obs_ptr[h + 1]
        status, logpred = kalman_update(
            total, cov, d_total, d_cov, y_flat[lo:hi], obs_idx[lo:hi], var_pos[lo:hi],
            eta, with_sens, updating, jitter, block_grad,
        )
        if status != OK:
            return status, h, np.nan
        loglik += logpred
        if with_sens:
            for l in range(n_par):
                grad[l] += block_grad[l]
        if updating:
            # restart the ODEs from the posterior; the perturbation is spent
            mean[:] = total
            d_mean[:, :] = d_total
            pert[:] = 0.0
            d_pert[:, :] = 0.0
            with_pert = False
        post_mean[h, :] = mean + pert
        post_cov[h, :, :] = cov
    return OK, -1, loglik
