"""Sparse Levenberg-Marquardt solver for calibration problems.

The linear step exploits the problem structure in two stages. Keyframe
states couple only to their temporal neighbors (inertial factors and bias
bridges), so the keyframe block of the normal equations is block
tridiagonal and is eliminated first with a banded Cholesky factorization in
O(K). The remaining reduced system over landmarks and the 26 calibration
parameters (calibration ordered last) is small and dense and is solved with
a dense Cholesky. Landmarks are dense in the reduced system because
eliminating keyframes fills in their co-observation couplings; keeping them
is cheap since their count is bounded by the landmark field, not by the
stream length.

Damping is multiplicative Marquardt scaling, H + lambda * diag(H), with
lambda growing/shrinking by a fixed factor on rejected/accepted steps.
Inertial whitening matrices are frozen at the solve's initial linearization
point so the minimized cost function is fixed across iterations; the
preintegrated increments and all Jacobians are re-evaluated at the current
bias and intrinsics estimates every iteration.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import sensor_models as sm
from .problem import (KF_DIM, LM_DIM, Problem, evaluate_factors,
                      inertial_sqrt_information, problem_cost)

_BW = 2 * KF_DIM - 1  # scalar bandwidth of the keyframe block


class SolverRankError(RuntimeError):
    """Linear system is rank deficient; names the unconstrained blocks."""

    def __init__(self, message, nullity=0, labels=()):
        super().__init__(message)
        self.nullity = nullity
        self.labels = list(labels)


@dataclass
class SolverOptions:
    lambda_init: float = 1e-4
    lambda_factor: float = 10.0
    lambda_max: float = 1e12
    max_iterations: int = 50
    cost_tol: float = 1e-8
    grad_tol: float = 1e-8
    # Costs below this are a perfect fit (whitened residuals at round-off);
    # stops the loop from polishing numerical noise on noise-free data.
    cost_abs_tol: float = 1e-18
    rank_check: bool = True
    pivot_rtol: float = 1e-7
    null_eig_rtol: float = 1e-10


@dataclass
class SolveResult:
    converged: bool
    reason: str
    cost_initial: float
    cost_final: float
    iterations: int
    rejected: int
    grad_inf: float
    runtime_s: float
    cost_history: list = field(default_factory=list)
    n_deactivated: int = 0


def run_lm(model, options: SolverOptions | None = None) -> SolveResult:
    """Generic damped Gauss-Newton loop over a linearizable model.

    The model must provide linearize() -> (cost, grad_inf), solve_step(lam),
    apply_step(step), current_cost(), save_state() and restore_state(snap).
    Accepted steps never increase the cost.
    """
    opt = options or SolverOptions()
    t0 = time.perf_counter()
    cost, grad = model.linearize()
    history = [cost]
    cost_initial = cost
    lam = opt.lambda_init
    accepted = rejected = 0
    converged, reason = False, "max_iterations"

    if cost <= opt.cost_abs_tol:
        converged, reason = True, "cost"

    while not converged and accepted + rejected < 10 * opt.max_iterations:
        if accepted >= opt.max_iterations:
            break
        if grad <= opt.grad_tol:
            converged, reason = True, "gradient"
            break
        step = model.solve_step(lam)
        snap = model.save_state()
        model.apply_step(step)
        new_cost = model.current_cost()
        if np.isfinite(new_cost) and new_cost <= cost:
            rel_decrease = (cost - new_cost) / max(cost, 1e-300)
            accepted += 1
            lam = max(lam / opt.lambda_factor, 1e-14)
            cost = new_cost
            history.append(cost)
            if cost <= opt.cost_abs_tol:
                converged, reason = True, "cost"
                break
            _, grad = model.linearize()
            if rel_decrease < opt.cost_tol:
                converged, reason = True, "cost"
                break
        else:
            model.restore_state(snap)
            rejected += 1
            lam *= opt.lambda_factor
            if lam > opt.lambda_max:
                reason = "stalled"
                break

    return SolveResult(
        converged=converged,
        reason=reason,
        cost_initial=cost_initial,
        cost_final=cost,
        iterations=accepted,
        rejected=rejected,
        grad_inf=grad,
        runtime_s=time.perf_counter() - t0,
        cost_history=history,
        n_deactivated=getattr(model, "n_deactivated", 0),
    )


# Resolve a triangular banded solver once; fall back to a full banded solve
# through the Cholesky factor when the LAPACK wrapper is unavailable.
def _resolve_tbtrs():
    try:
        (tbtrs,) = sla.get_lapack_funcs(("tbtrs",), (np.zeros((2, 2)),))
        ab = np.array([[0.0, 0.5], [2.0, 3.0]])  # upper banded 2x2
        U = np.array([[2.0, 0.5], [0.0, 3.0]])
        b = np.array([[1.0], [2.0]])
        x, info = tbtrs(ab, b, uplo="U", trans="T", diag="N")
        if info == 0 and np.allclose(U.T @ x, b):
            return tbtrs
    except Exception:
        pass
    return None


_TBTRS = _resolve_tbtrs()


class DenseLeastSquaresModel:
    """Plain dense nonlinear least squares, for small generic problems."""

    def __init__(self, residual_fn, jacobian_fn, x0):
        self.residual_fn = residual_fn
        self.jacobian_fn = jacobian_fn
        self.x = np.asarray(x0, dtype=float).copy()
        self._H = None
        self._b = None

    def linearize(self):
        r = self.residual_fn(self.x)
        J = self.jacobian_fn(self.x)
        self._H = J.T @ J
        self._b = -J.T @ r
        return float(r @ r), float(np.max(np.abs(self._b), initial=0.0))

    def solve_step(self, lam):
        H = self._H + lam * np.diag(np.diag(self._H))
        try:
            cf = sla.cho_factor(H)
        except np.linalg.LinAlgError as e:
            raise SolverRankError("dense normal equations not positive definite: %s" % e)
        return sla.cho_solve(cf, self._b)

    def apply_step(self, step):
        self.x = self.x + step

    def current_cost(self):
        r = self.residual_fn(self.x)
        return float(r @ r)

    def save_state(self):
        return self.x.copy()

    def restore_state(self, snap):
        self.x = snap.copy()


class VIProblemModel:
    """Structured normal equations and Schur elimination for a Problem."""

    def __init__(self, problem: Problem, options: SolverOptions | None = None):
        self.problem = problem
        self.opt = options or SolverOptions()
        self.linv15 = inertial_sqrt_information(problem)
        self.n_deactivated = 0
        self._rank_checked = not self.opt.rank_check
        self._lin = None
        self._build_scatter_indices()

    # ---------------------------------------------------------------- setup

    def _build_scatter_indices(self):
        p = self.problem
        K, M = p.n_kf, p.n_lm
        R = LM_DIM * M + sm.THETA_DIM
        self.R = R
        self.nx = KF_DIM * K

        # banded storage maps for the keyframe block
        a_ut, b_ut = np.triu_indices(KF_DIM)
        self._band_diag_entry = (a_ut, b_ut)
        ko = np.arange(K)[:, None]
        self._band_diag_rows = (_BW + a_ut - b_ut)[None, :].repeat(K, axis=0)
        self._band_diag_cols = KF_DIM * ko + b_ut[None, :]
        if K > 1:
            a_all, b_all = np.indices((KF_DIM, KF_DIM))
            a_all, b_all = a_all.ravel(), b_all.ravel()
            k1 = np.arange(K - 1)[:, None]
            self._band_off_entry = (a_all, b_all)
            self._band_off_rows = (KF_DIM - 1 + a_all - b_all)[None, :].repeat(K - 1, axis=0)
            self._band_off_cols = KF_DIM * (k1 + 1) + b_all[None, :]

    # ----------------------------------------------------------- linearize

    def linearize(self):
        p = self.problem
        K, M, R = p.n_kf, p.n_lm, self.R
        th_lm = LM_DIM * M
        fb = evaluate_factors(p, linv15=self.linv15)
        self.n_deactivated = fb.n_deactivated

        Hkk = np.zeros((K, KF_DIM, KF_DIM))
        Hoff = np.zeros((max(K - 1, 0), KF_DIM, KF_DIM))
        Hxr = np.zeros((self.nx, R))
        S = np.zeros((R, R))
        b_x = np.zeros((K, KF_DIM))
        b_r = np.zeros(R)

        i = fb.in_idx
        if len(i):
            Ji, Jj, Jt = fb.in_Ji, fb.in_Jj, fb.in_Jt
            np.add.at(Hkk, i, np.einsum("nri,nrj->nij", Ji, Ji))
            np.add.at(Hkk, i + 1, np.einsum("nri,nrj->nij", Jj, Jj))
            np.add.at(Hoff, i, np.einsum("nri,nrj->nij", Ji, Jj))
            np.add.at(b_x, i, -np.einsum("nri,nr->ni", Ji, fb.in_r))
            np.add.at(b_x, i + 1, -np.einsum("nri,nr->ni", Jj, fb.in_r))
            # theta_i columns sit at the right end of the reduced block
            JiT = np.einsum("nri,nrj->nij", Ji, Jt)
            JjT = np.einsum("nri,nrj->nij", Jj, Jt)
            rows = (KF_DIM * i)[:, None, None] + np.arange(KF_DIM)[None, :, None]
            cols = th_lm + 11 + np.arange(15)[None, None, :]
            np.add.at(Hxr.reshape(-1), (rows * R + cols).ravel(), JiT.ravel())
            rows1 = rows + KF_DIM
            np.add.at(Hxr.reshape(-1), (rows1 * R + cols).ravel(), JjT.ravel())
            S[th_lm + 11:, th_lm + 11:] += np.einsum("nri,nrj->ij", Jt, Jt)
            b_r[th_lm + 11:] += -np.einsum("nri,nr->i", Jt, fb.in_r)

        if p.n_obs:
            kf, lm = fb.rp_kf, fb.rp_lm
            Jx, Jl, Jt = fb.rp_Jx, fb.rp_Jl, fb.rp_Jt
            np.add.at(Hkk[:, :6, :6], kf, np.einsum("nri,nrj->nij", Jx, Jx))
            np.add.at(b_x[:, :6], kf, -np.einsum("nri,nr->ni", Jx, fb.rp_r))
            Hll = np.zeros((M, LM_DIM, LM_DIM))
            np.add.at(Hll, lm, np.einsum("nri,nrj->nij", Jl, Jl))
            Hlt = np.zeros((M, LM_DIM, 11))
            np.add.at(Hlt, lm, np.einsum("nri,nrj->nij", Jl, Jt))
            b_l = np.zeros((M, LM_DIM))
            np.add.at(b_l, lm, -np.einsum("nri,nr->ni", Jl, fb.rp_r))
            # scatter landmark blocks into the reduced system
            lj = np.arange(M) * LM_DIM
            for a in range(LM_DIM):
                for b in range(LM_DIM):
                    S[lj + a, lj + b] += Hll[:, a, b]
            S[:th_lm, th_lm:th_lm + 11] += Hlt.reshape(th_lm, 11)
            S[th_lm:th_lm + 11, :th_lm] += Hlt.reshape(th_lm, 11).T
            S[th_lm:th_lm + 11, th_lm:th_lm + 11] += np.einsum("nri,nrj->ij", Jt, Jt)
            b_r[:th_lm] += b_l.ravel()
            b_r[th_lm:th_lm + 11] += -np.einsum("nri,nr->i", Jt, fb.rp_r)
            # keyframe-landmark and keyframe-theta couplings
            rows = (KF_DIM * kf)[:, None, None] + np.arange(6)[None, :, None]
            cols_l = (LM_DIM * lm)[:, None, None] + np.arange(LM_DIM)[None, None, :]
            vals = np.einsum("nri,nrj->nij", Jx, Jl)
            np.add.at(Hxr.reshape(-1), (rows * R + cols_l).ravel(), vals.ravel())
            cols_t = th_lm + np.arange(11)[None, None, :]
            vals_t = np.einsum("nri,nrj->nij", Jx, Jt)
            np.add.at(Hxr.reshape(-1), (rows * R + cols_t).ravel(), vals_t.ravel())

        if len(fb.br_idx):
            bi = fb.br_idx
            w2 = fb.br_w**2
            W6 = np.zeros((len(bi), 6, 6))
            W6[:, np.arange(6), np.arange(6)] = w2
            np.add.at(Hkk[:, 9:15, 9:15], bi, W6)
            np.add.at(Hkk[:, 9:15, 9:15], bi + 1, W6)
            np.add.at(Hoff[:, 9:15, 9:15], bi, -W6)
            wr = fb.br_w * fb.br_r
            np.add.at(b_x[:, 9:15], bi, wr)
            np.add.at(b_x[:, 9:15], bi + 1, -wr)

        for n, k in enumerate(fb.ga_kf):
            Jg = fb.ga_J[n]
            Hkk[k, :6, :6] += Jg.T @ Jg
            b_x[k, :6] += -Jg.T @ fb.ga_r[n]

        # fixed calibration parameters: pin their tangent to zero
        fixed = np.flatnonzero(self.problem.fixed_theta) + th_lm
        b_r[fixed] = 0.0

        self._lin = {
            "Hkk": Hkk, "Hoff": Hoff, "Hxr": Hxr, "S": S,
            "b_x": b_x, "b_r": b_r, "fixed": fixed, "cost": fb.cost,
        }
        grad = 0.0
        if b_x.size:
            grad = max(grad, float(np.max(np.abs(b_x))))
        if b_r.size:
            grad = max(grad, float(np.max(np.abs(b_r))))
        return fb.cost, grad

    # ------------------------------------------------------------- stepping

    def _band_factor(self, Hkk):
        K = self.problem.n_kf
        ab = np.zeros((_BW + 1, self.nx))
        a_ut, b_ut = self._band_diag_entry
        ab[self._band_diag_rows, self._band_diag_cols] = Hkk[:, a_ut, b_ut]
        if K > 1:
            a_all, b_all = self._band_off_entry
            ab[self._band_off_rows, self._band_off_cols] = self._lin["Hoff"][:, a_all, b_all]
        try:
            return sla.cholesky_banded(ab, lower=False, check_finite=False)
        except np.linalg.LinAlgError as e:
            kf = self._minor_to_keyframe(str(e))
            raise SolverRankError(
                "keyframe block not positive definite (%s)" % kf, nullity=1, labels=[kf]
            )

    def _minor_to_keyframe(self, msg):
        import re

        m = re.search(r"(\d+)", msg)
        if m:
            return "keyframe %d" % ((int(m.group(1)) - 1) // KF_DIM)
        return "keyframe ?"

    def _schur(self, lam):
        """Damped elimination of the keyframe block; returns solve pieces."""
        lin = self._lin
        Hkk = lin["Hkk"]
        if lam > 0.0:
            Hkk = Hkk.copy()
            d = np.arange(KF_DIM)
            Hkk[:, d, d] += lam * lin["Hkk"][:, d, d]
        cb = self._band_factor(Hkk)

        Hxr, S, b_x, b_r = lin["Hxr"], lin["S"], lin["b_x"], lin["b_r"]
        bx_flat = b_x.reshape(-1)
        if lam > 0.0:
            S = S.copy()
            dr = np.arange(self.R)
            S[dr, dr] += lam * lin["S"][dr, dr]
        else:
            S = S.copy()

        if self.nx:
            if _TBTRS is not None:
                Y, info = _TBTRS(cb, Hxr, uplo="U", trans="T", diag="N")
                if info != 0:
                    raise SolverRankError("triangular banded solve failed", labels=["keyframes"])
                y0, _ = _TBTRS(cb, bx_flat[:, None], uplo="U", trans="T", diag="N")
                S -= Y.T @ Y
                b_red = b_r - Y.T @ y0[:, 0]
            else:
                W = sla.cho_solve_banded((cb, False), Hxr, check_finite=False)
                S -= Hxr.T @ W
                u0 = sla.cho_solve_banded((cb, False), bx_flat, check_finite=False)
                b_red = b_r - Hxr.T @ u0
            S = 0.5 * (S + S.T)
        else:
            b_red = b_r.copy()

        fixed = lin["fixed"]
        if len(fixed):
            S[fixed, :] = 0.0
            S[:, fixed] = 0.0
            S[fixed, fixed] = 1.0
            b_red[fixed] = 0.0
        return cb, S, b_red

    def _rank_diagnose(self, S):
        evals, evecs = np.linalg.eigh(S)
        scale = max(float(evals[-1]), 1e-300)
        null = np.flatnonzero(evals < scale * self.opt.null_eig_rtol)
        labels = []
        p = self.problem
        th_lm = LM_DIM * p.n_lm
        names = theta_labels()
        for idx in null:
            v = np.abs(evecs[:, idx])
            top = int(np.argmax(v))
            if v[top] ** 2 < 0.25:
                labels.append("distributed (gauge position/yaw not fixed?)")
            elif top >= th_lm:
                labels.append("calibration:%s" % names[top - th_lm])
            else:
                labels.append("landmark %d" % int(p.lm_ids[top // LM_DIM]))
        return len(null), labels

    def solve_step(self, lam):
        if not self._rank_checked:
            self._rank_checked = True
            _, S0, _ = self._schur(0.0)
            try:
                cf0 = sla.cho_factor(S0, check_finite=False)
                piv = np.abs(np.diag(cf0[0]))
                if piv.size and float(piv.min()) < float(piv.max()) * self.opt.pivot_rtol:
                    raise np.linalg.LinAlgError("suspicious pivot")
            except np.linalg.LinAlgError:
                nullity, labels = self._rank_diagnose(S0)
                raise SolverRankError(
                    "reduced system rank deficient (nullity %d): %s"
                    % (nullity, ", ".join(labels) or "unresolved"),
                    nullity=nullity,
                    labels=labels,
                )

        cb, S, b_red = self._schur(lam)
        try:
            cf = sla.cho_factor(S, check_finite=False)
        except np.linalg.LinAlgError:
            nullity, labels = self._rank_diagnose(S)
            raise SolverRankError(
                "damped reduced system not positive definite (nullity %d): %s"
                % (nullity, ", ".join(labels) or "unresolved"),
                nullity=nullity,
                labels=labels,
            )
        d_r = sla.cho_solve(cf, b_red, check_finite=False)
        if self.nx:
            t = self._lin["b_x"].reshape(-1) - self._lin["Hxr"] @ d_r
            d_x = sla.cho_solve_banded((cb, False), t, check_finite=False)
        else:
            d_x = np.zeros(0)
        M = self.problem.n_lm
        return (
            d_x.reshape(-1, KF_DIM),
            d_r[:LM_DIM * M].reshape(-1, LM_DIM),
            d_r[LM_DIM * M:],
        )

    # ------------------------------------------------------------ plumbing

    def apply_step(self, step):
        self.problem.apply_step(*step)

    def current_cost(self):
        return problem_cost(self.problem, linv15=self.linv15)

    def save_state(self):
        return self.problem.save_state()

    def restore_state(self, snap):
        self.problem.restore_state(snap)


def theta_labels():
    """Human-readable name of each calibration tangent component."""
    out = []
    for name, dim in sm.THETA_BLOCKS:
        if dim == 1:
            out.append(name)
        else:
            out.extend("%s[%d]" % (name, k) for k in range(dim))
    return out


def solve(problem: Problem, options: SolverOptions | None = None) -> SolveResult:
    """Levenberg-Marquardt solution of a calibration problem in place."""
    opt = options or SolverOptions()
    model = VIProblemModel(problem, opt)
    return run_lm(model, opt)


def rank_diagnostics(problem: Problem, options: SolverOptions | None = None):
    """Nullity and labels of the undamped reduced system (no solving)."""
    model = VIProblemModel(problem, options or SolverOptions())
    model.linearize()
    _, S0, _ = model._schur(0.0)
    return model._rank_diagnose(S0)
