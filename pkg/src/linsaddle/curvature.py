"""Second-order analysis along lines W + t V.

The square loss restricted to a line is a polynomial of degree 2H in t; its
quadratic coefficient c2 decides strictness of saddles.  This module provides
the exact polynomial expansion, a cached evaluator and Hessian for c2,
negative-curvature witness constructions for the two saddle mechanisms
(eigenvector swap and untightened pivots), and the nonnegative decomposition
of c2 at tightened points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg

from .critical_points import clem_d_matrix
from .data_model import DataMatrices, SigmaBundle
from .errors import (
    InternalInconsistency,
    InvalidPivot,
    InvalidShape,
    NeedsCanonicalization,
    NotApplicable,
    NotTightened,
    TooDeep,
    TooLarge,
)
from .network import Direction, Weights, partial_prefix, partial_suffix
from .ranktol import RankTolerance, numeric_rank

MAX_TAYLOR_DEPTH = 12
MAX_DENSE_PARAMS = 2000
BETA_ZERO_TOL = 1e-12


# ---------------------------------------------------------------------------
# Exact polynomial expansion of the loss along a line.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaylorCoeffs:
    """Coefficients c_0 .. c_{2H} of t -> L(W + t V)."""

    coeffs: np.ndarray

    def value(self, t: float) -> float:
        # highest degree first for polyval
        return float(np.polyval(self.coeffs[::-1], t))

    @property
    def c2(self) -> float:
        return float(self.coeffs[2])


def taylor_coeffs(w: Weights, v: Direction, data: DataMatrices) -> TaylorCoeffs:
    """Exact coefficients of the degree-2H polynomial t -> L(W + t V).

    Grouped by perturbation order: A_k = sum over all ways of substituting k
    layers by their perturbations, applied to X.  One pass over the layers
    updates all orders (A_k <- W_h A_k + V_h A_{k-1}).
    """
    H = w.shape.H
    if H > MAX_TAYLOR_DEPTH:
        raise TooDeep(f"depth {H} exceeds exact-expansion guard {MAX_TAYLOR_DEPTH}")
    if v.shape.dims != w.shape.dims:
        raise InvalidShape("direction shape does not match weights")
    A = [data.X]
    for h in range(1, H + 1):
        Wh, Vh = w.layer(h), v.layer(h)
        new = [Wh @ A[0]]
        for k in range(1, len(A)):
            new.append(Wh @ A[k] + Vh @ A[k - 1])
        new.append(Vh @ A[-1])
        A = new
    B = [A[0] - data.Y] + A[1:]
    coeffs = np.zeros(2 * H + 1)
    for k in range(H + 1):
        for l in range(H + 1):
            coeffs[k + l] += float(np.sum(B[k] * B[l]))
    return TaylorCoeffs(coeffs=coeffs)


# ---------------------------------------------------------------------------
# Cached quadratic form and Hessian.
# ---------------------------------------------------------------------------

class CurvatureCache:
    """Precomputed layer products at a fixed W for repeated c2 evaluation.

    c2(V) = ||sum_h S_{h+1} V_h P_{h-1}||^2
            + 2 sum_{i>j} <S_{i+1} V_i M_{i,j} V_j P_{j-1}, R>
    with P_h = W_h..W_1 X, S_h = W_H..W_h, M_{i,j} = W_{i-1}..W_{j+1} and
    R = W_H..W_1 X - Y the residual.
    """

    def __init__(self, w: Weights, data: DataMatrices):
        if w.shape.d_x != data.d_x or w.shape.d_y != data.d_y:
            raise InvalidShape("weights incompatible with data")
        self.w = w
        self.data = data
        H = w.shape.H
        self.H = H
        P = [data.X]
        for h in range(1, H + 1):
            P.append(w.layer(h) @ P[-1])
        self.P = P  # P[h] = W_h..W_1 X
        S = [None] * (H + 2)
        S[H + 1] = np.eye(w.shape.d_y)
        for h in range(H, 0, -1):
            S[h] = S[h + 1] @ w.layer(h)
        self.S = S  # S[h] = W_H..W_h
        self.R = P[H] - data.Y
        self.M = {}
        for j in range(1, H):
            M = np.eye(w.shape.dims[j])
            self.M[(j + 1, j)] = M
            for i in range(j + 2, H + 1):
                M = w.layer(i - 1) @ M
                self.M[(i, j)] = M

    def c2(self, v: Direction) -> float:
        H = self.H
        F = sum(self.S[h + 1] @ v.layer(h) @ self.P[h - 1] for h in range(1, H + 1))
        val = float(np.sum(F * F))
        for i in range(2, H + 1):
            for j in range(1, i):
                T = self.S[i + 1] @ v.layer(i) @ self.M[(i, j)] @ v.layer(j) @ self.P[j - 1]
                val += 2.0 * float(np.sum(T * self.R))
        return val

    def hessian_matvec(self, flat: np.ndarray) -> np.ndarray:
        """Action of the Hessian of t -> L(W + tV) at t=0 (i.e. of 2 c2)."""
        v = self._unflatten(flat)
        H = self.H
        F = sum(self.S[h + 1] @ v[h - 1] @ self.P[h - 1] for h in range(1, H + 1))
        out = []
        for h in range(1, H + 1):
            G = self.S[h + 1].T @ F @ self.P[h - 1].T
            for j in range(1, h):
                # cross term with a lower layer
                G += (self.S[h + 1].T @ self.R @ self.P[j - 1].T) @ v[j - 1].T @ self.M[(h, j)].T
            for i in range(h + 1, H + 1):
                G += self.M[(i, h)].T @ v[i - 1].T @ (self.S[i + 1].T @ self.R @ self.P[h - 1].T)
            out.append(2.0 * G)
        return np.concatenate([g.ravel() for g in out])

    def _unflatten(self, flat: np.ndarray):
        mats, off = [], 0
        for h in range(1, self.H + 1):
            rows, cols = self.w.shape.layer_shape(h)
            mats.append(flat[off:off + rows * cols].reshape(rows, cols))
            off += rows * cols
        return mats


def c2_value(w: Weights, v: Direction, data: DataMatrices) -> float:
    return CurvatureCache(w, data).c2(v)


def hessian_dense(w: Weights, data: DataMatrices) -> np.ndarray:
    """Dense Hessian of the loss at W (second derivative along lines is
    2 c2).  Assembled block-wise from the closed form of c2, guarded by a
    parameter-count limit."""
    n = w.shape.n_params
    if n > MAX_DENSE_PARAMS:
        raise TooLarge(f"{n} parameters exceed dense-Hessian guard {MAX_DENSE_PARAMS}")
    cache = CurvatureCache(w, data)
    H = w.shape.H
    sizes = [w.shape.dims[h] * w.shape.dims[h - 1] for h in range(1, H + 1)]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    B = np.zeros((n, n))
    for h in range(1, H + 1):
        for hp in range(1, h + 1):
            left = cache.S[h + 1].T @ cache.S[hp + 1]
            right = cache.P[h - 1] @ cache.P[hp - 1].T
            blk = np.einsum("ac,bd->abcd", left, right)
            if h > hp:
                G = cache.S[h + 1].T @ cache.R @ cache.P[hp - 1].T
                blk = blk + np.einsum("ad,bc->abcd", G, cache.M[(h, hp)])
            blk = blk.reshape(sizes[h - 1], sizes[hp - 1])
            B[offs[h - 1]:offs[h], offs[hp - 1]:offs[hp]] = blk
            if h != hp:
                B[offs[hp - 1]:offs[hp], offs[h - 1]:offs[h]] = blk.T
    return 2.0 * B


def hessian_min_eig(
    w: Weights, data: DataMatrices, mode: str = "dense", tol: float = 1e-6,
    return_vector: bool = False,
):
    """Smallest eigenvalue of the Hessian at W: dense eigh for small nets,
    matrix-free Lanczos probe otherwise.  With return_vector the matching
    eigenvector is reshaped to a Direction and returned alongside."""
    if mode == "dense":
        M = hessian_dense(w, data)
        if not return_vector:
            return float(np.linalg.eigvalsh(M)[0])
        vals, vecs = np.linalg.eigh(M)
        return float(vals[0]), _flat_to_direction(vecs[:, 0], w.shape)
    if mode != "probe":
        raise ValueError(f"unknown mode {mode!r}")
    cache = CurvatureCache(w, data)
    n = w.shape.n_params
    op = scipy.sparse.linalg.LinearOperator(
        (n, n), matvec=cache.hessian_matvec, dtype=float
    )
    if not return_vector:
        vals = scipy.sparse.linalg.eigsh(
            op, k=1, which="SA", tol=tol, return_eigenvectors=False
        )
        return float(vals[0])
    vals, vecs = scipy.sparse.linalg.eigsh(op, k=1, which="SA", tol=tol)
    return float(vals[0]), _flat_to_direction(vecs[:, 0], w.shape)


def _flat_to_direction(flat: np.ndarray, shape) -> Direction:
    mats, off = [], 0
    for h in range(1, shape.H + 1):
        rows, cols = shape.layer_shape(h)
        mats.append(flat[off:off + rows * cols].reshape(rows, cols))
        off += rows * cols
    return Direction(mats, shape)


# ---------------------------------------------------------------------------
# Negative-curvature witnesses.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WitnessCase:
    direction: Direction
    case: str
    c2_predicted: float
    pivot: tuple | None = None
    diagnostics: dict = field(default_factory=dict)


def witness_eigenswap(
    w: Weights,
    bundle: SigmaBundle,
    support,
    rank_tol: RankTolerance = RankTolerance(),
) -> WitnessCase:
    """Descent direction swapping an eigenvector out of the support.

    Applies whenever some unused eigenvalue exceeds a used one; the loss
    along the witness is exactly L(W) + (lambda_j - lambda_i) t^2
    + lambda_i t^4, so c2 = lambda_j - lambda_i < 0.
    """
    S = tuple(sorted(support))
    comp = sorted(set(range(1, bundle.d_y + 1)) - set(S))
    if not S or not comp or comp[0] > S[-1]:
        raise NotApplicable("no unused eigenvalue exceeds a used one")
    i, j = comp[0], S[-1]  # lambda_i > lambda_j, maximal gap
    g = S.index(j)  # 0-based position of j within S
    r = len(S)

    D, D_inv, _K = clem_d_matrix(w, bundle, S, rank_tol)
    V = np.outer(bundle.U[:, i - 1], np.eye(r)[g])  # d_y x r
    C = bundle.sigma_yx_sigma_xx_inv()
    shape = w.shape
    mats = [np.zeros(shape.layer_shape(h)) for h in range(1, shape.H + 1)]
    W1p = np.zeros(shape.layer_shape(1))
    W1p[:, :] = D_inv @ np.vstack(
        [V.T @ C, np.zeros((shape.dims[1] - r, shape.d_x))]
    )
    mats[0] = W1p
    mats[-1] = V @ (bundle.u_cols(S).T @ w.layer(shape.H))
    c2_pred = float(bundle.lambdas[j - 1] - bundle.lambdas[i - 1])
    return WitnessCase(
        direction=Direction(mats, shape),
        case="eigenswap",
        c2_predicted=c2_pred,
        diagnostics={
            "swap_in": i,
            "swap_out": j,
            "quartic_coeff": float(bundle.lambdas[i - 1]),
            "cond_D": float(np.linalg.cond(D)),
        },
    )


def _choose_beta(a: float, c: float) -> tuple[float, float]:
    """Minimize a b^2 + c b over b; returns (beta, minimum value)."""
    if abs(a) < BETA_ZERO_TOL:
        return -c, -c * c
    beta = -c / (2.0 * a)
    return beta, -c * c / (4.0 * a)


def _kernel_basis(M: np.ndarray, rank_tol: RankTolerance) -> np.ndarray:
    if M.size == 0:
        return np.eye(M.shape[1])
    u, s, vt = np.linalg.svd(M)
    thr = rank_tol.threshold(M.shape, float(s[0]) if s.size else 0.0)
    rk = int(np.count_nonzero(s > thr))
    return vt[rk:, :].T


def witness_untightened(
    w: Weights,
    bundle: SigmaBundle,
    data: DataMatrices,
    support,
    pivot: tuple,
    rank_tol: RankTolerance = RankTolerance(),
) -> WitnessCase:
    """Descent direction exploiting an untightened pivot (i, j).

    Two layers are perturbed: one injects mass along an unused output
    eigendirection, the other feeds it from the kernel of the upper layers so
    the linear term vanishes exactly.  The restricted c2 is a beta^2 + c beta
    with a >= 0 and c != 0; beta is chosen to make it negative.
    """
    i, j = pivot
    H = w.shape.H
    if not (1 <= j < i <= H):
        raise InvalidPivot(f"pivot must satisfy 1 <= j < i <= H, got {pivot}")
    S = tuple(sorted(support))
    r = len(S)
    comp = sorted(set(range(1, bundle.d_y + 1)) - set(S))
    if not comp:
        raise NotApplicable("support already uses every output eigendirection")

    if j > 1:
        # If the layers above j already exceed rank r the problem reduces to
        # a pivot anchored at the first layer.
        suf_j1 = partial_suffix(w, j + 1)
        if numeric_rank(suf_j1, rank_tol) > r:
            return witness_untightened(w, bundle, data, S, (j, 1), rank_tol)
        if i == H:
            return _witness_case3(w, bundle, data, S, comp, i, j, rank_tol)
        return _witness_case4(w, bundle, data, S, comp, i, j, rank_tol)
    if i == H:
        return _witness_case2(w, bundle, data, S, comp, rank_tol)
    return _witness_case1(w, bundle, data, S, comp, i, rank_tol)


def _zero_direction(shape):
    return [np.zeros(shape.layer_shape(h)) for h in range(1, shape.H + 1)]


def _feed_column(w: Weights, D_inv: np.ndarray, r: int, upto: int):
    """Pick the kernel direction of W_H..W_2 that survives W_upto..W_2 best.

    Returns (g0, col): a 0-based column index g0 >= r into D_inv and the
    image col = W_upto..W_2 D_inv[:, g0]."""
    M = np.eye(w.shape.dims[1])
    for k in range(2, upto + 1):
        M = w.layer(k) @ M
    cand = M @ D_inv[:, r:]
    if cand.size == 0:
        raise NotApplicable("no kernel direction available (r = d_1)")
    norms = np.linalg.norm(cand, axis=0)
    g_rel = int(np.argmax(norms))
    if norms[g_rel] <= BETA_ZERO_TOL:
        raise NotApplicable("kernel of W_H..W_2 is annihilated by the lower layers")
    return r + g_rel, cand[:, g_rel]


def _witness_case1(w, bundle, data, S, comp, i, rank_tol):
    """Pivot (i, 1) with 2 <= i <= H-1: perturb layers i and 1."""
    shape = w.shape
    r = len(S)
    U_Q = bundle.u_complement(S)
    suf = partial_suffix(w, i + 1)  # W_H .. W_{i+1}
    T = U_Q.T @ suf
    if not T.size or np.max(np.abs(T)) <= BETA_ZERO_TOL:
        raise NotApplicable("upper layers have no output outside the support")
    k_rel, l0 = np.unravel_index(int(np.argmax(np.abs(T))), T.shape)
    k = comp[k_rel]
    lam_k = float(bundle.lambdas[k - 1])

    D, D_inv, _ = clem_d_matrix(w, bundle, S, rank_tol)
    g0, col = _feed_column(w, D_inv, r, i - 1)
    a_vec = col / float(col @ col)

    mats = _zero_direction(shape)
    e_l = np.eye(shape.dims[i])[:, l0]
    mats[i - 1] = np.outer(e_l, a_vec)  # scaled by beta below
    C = bundle.sigma_yx_sigma_xx_inv()
    mats[0] = np.outer(D_inv[:, g0], bundle.U[:, k - 1] @ C)

    N = suf @ np.outer(e_l, a_vec) @ partial_prefix(w, i - 1)
    a_coef = float(np.sum((N @ data.X) ** 2))
    c_coef = -2.0 * lam_k * float(T[k_rel, l0])
    beta, c2_pred = _choose_beta(a_coef, c_coef)
    mats[i - 1] = beta * mats[i - 1]
    return WitnessCase(
        direction=Direction(mats, shape),
        case="untightened_interior_first",
        c2_predicted=c2_pred,
        pivot=(i, 1),
        diagnostics={
            "beta": beta,
            "quad_coeff": a_coef,
            "lin_coeff": c_coef,
            "eig_index": k,
            "cond_D": float(np.linalg.cond(D)),
        },
    )


def _witness_case2(w, bundle, data, S, comp, rank_tol):
    """Pivot (H, 1): perturb the outermost layers."""
    shape = w.shape
    r = len(S)
    k = comp[0]
    lam_k = float(bundle.lambdas[k - 1])
    D, D_inv, _ = clem_d_matrix(w, bundle, S, rank_tol)
    g0, col = _feed_column(w, D_inv, r, shape.H - 1)
    a_vec = col / float(col @ col)

    mats = _zero_direction(shape)
    U_k = bundle.U[:, k - 1]
    C = bundle.sigma_yx_sigma_xx_inv()
    mats[0] = np.outer(D_inv[:, g0], U_k @ C)
    WH_dir = np.outer(U_k, a_vec)
    N = WH_dir @ partial_prefix(w, shape.H - 1)
    a_coef = float(np.sum((N @ data.X) ** 2))
    c_coef = -2.0 * lam_k
    beta, c2_pred = _choose_beta(a_coef, c_coef)
    mats[-1] = beta * WH_dir
    return WitnessCase(
        direction=Direction(mats, shape),
        case="untightened_last_first",
        c2_predicted=c2_pred,
        pivot=(shape.H, 1),
        diagnostics={
            "beta": beta,
            "quad_coeff": a_coef,
            "lin_coeff": c_coef,
            "eig_index": k,
            "cond_D": float(np.linalg.cond(D)),
        },
    )


def _kernel_feed(w, i, j, rank_tol):
    """Direction b in ker(W_H..W_{j+1}) not killed by W_{i-1}..W_{j+1}."""
    suf = partial_suffix(w, j + 1)
    N1 = _kernel_basis(suf, rank_tol)
    if N1.size == 0:
        raise NotApplicable("upper layers past the pivot have trivial kernel")
    M = np.eye(w.shape.dims[j])
    for k in range(j + 1, i):
        M = w.layer(k) @ M  # W_{i-1} .. W_{j+1}
    imgs = M @ N1
    norms = np.linalg.norm(imgs, axis=0)
    idx = int(np.argmax(norms))
    if norms[idx] <= BETA_ZERO_TOL:
        raise InternalInconsistency(
            "untightened pivot promised a surviving kernel direction, found none"
        )
    return N1[:, idx], imgs[:, idx]


def _witness_case3(w, bundle, data, S, comp, i, j, rank_tol):
    """Pivot (H, j) with interior j and rank(W_H..W_{j+1}) = r."""
    shape = w.shape
    U_Q = bundle.u_complement(S)
    pre = partial_prefix(w, j - 1)
    T = pre @ bundle.sigma_xy @ U_Q
    if not T.size or np.max(np.abs(T)) <= BETA_ZERO_TOL:
        raise NotApplicable("pivot data block vanishes outside the support")
    l0, k_rel = np.unravel_index(int(np.argmax(np.abs(T))), T.shape)
    k = comp[k_rel]

    b, w_img = _kernel_feed(w, shape.H, j, rank_tol)
    a_vec = w_img / float(w_img @ w_img)

    mats = _zero_direction(shape)
    U_k = bundle.U[:, k - 1]
    mats[j - 1] = np.outer(b, np.eye(shape.dims[j - 1])[:, l0])
    WH_dir = np.outer(U_k, a_vec)
    N = WH_dir @ partial_prefix(w, shape.H - 1)
    a_coef = float(np.sum((N @ data.X) ** 2))
    c_coef = -2.0 * float(T[l0, k_rel])
    beta, c2_pred = _choose_beta(a_coef, c_coef)
    mats[-1] = beta * WH_dir
    return WitnessCase(
        direction=Direction(mats, shape),
        case="untightened_last_interior",
        c2_predicted=c2_pred,
        pivot=(shape.H, j),
        diagnostics={
            "beta": beta,
            "quad_coeff": a_coef,
            "lin_coeff": c_coef,
            "eig_index": k,
        },
    )


def _witness_case4(w, bundle, data, S, comp, i, j, rank_tol):
    """Interior pivot (i, j), 2 <= j < i <= H-1, rank(W_H..W_{j+1}) = r."""
    shape = w.shape
    U_Q = bundle.u_complement(S)
    pre = partial_prefix(w, j - 1)
    suf = partial_suffix(w, i + 1)
    T = pre @ bundle.sigma_xy @ U_Q @ U_Q.T @ suf
    if not T.size or np.max(np.abs(T)) <= BETA_ZERO_TOL:
        raise NotApplicable("pivot data block vanishes outside the support")
    l0, k0 = np.unravel_index(int(np.argmax(np.abs(T))), T.shape)

    b, w_img = _kernel_feed(w, i, j, rank_tol)
    a_vec = w_img / float(w_img @ w_img)

    mats = _zero_direction(shape)
    mats[j - 1] = np.outer(b, np.eye(shape.dims[j - 1])[:, l0])
    e_k = np.eye(shape.dims[i])[:, k0]
    Wi_dir = np.outer(e_k, a_vec)
    N = suf @ Wi_dir @ partial_prefix(w, i - 1)
    a_coef = float(np.sum((N @ data.X) ** 2))
    c_coef = -2.0 * float(T[l0, k0])
    beta, c2_pred = _choose_beta(a_coef, c_coef)
    mats[i - 1] = beta * Wi_dir
    return WitnessCase(
        direction=Direction(mats, shape),
        case="untightened_interior_interior",
        c2_predicted=c2_pred,
        pivot=(i, j),
        diagnostics={
            "beta": beta,
            "quad_coeff": a_coef,
            "lin_coeff": c_coef,
        },
    )


# ---------------------------------------------------------------------------
# Nonnegative decomposition of c2 at tightened points in canonical form.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TightenedStructure:
    p: int  # largest h in [3, H] with rank(W_H .. W_h) = r
    q: int  # smallest q in [1, min(p-1, H-2)] with rank(W_q..W_1 Sigma_XY) = r
    residual: float


@dataclass(frozen=True)
class FtStDecomposition:
    a1: float
    A2: np.ndarray
    A3: np.ndarray
    A4: np.ndarray
    structure: TightenedStructure

    @property
    def c2(self) -> float:
        return (
            self.a1
            + float(np.sum(self.A2 * self.A2))
            + float(np.sum((self.A3 - self.A4) ** 2))
        )


def _canonical_blocks(w: Weights, bundle: SigmaBundle, rank_tol, eps):
    """Verify canonical block structure and extract (r, Z_1..Z_H)."""
    shape = w.shape
    H = shape.H
    G = partial_suffix(w, 1)
    r = numeric_rank(G, rank_tol)
    if r >= shape.r_max:
        raise NotApplicable("tightened analysis targets rank-deficient points")
    U_S = bundle.U[:, :r]
    C = bundle.sigma_yx_sigma_xx_inv()
    scale = 1.0 + w.frob_norm() + np.linalg.norm(C)
    tol = eps * scale

    errs = []
    z = [None] * H
    W1 = w.layer(1)
    errs.append(np.linalg.norm(W1[:r, :] - U_S.T @ C))
    z[0] = W1[r:, :].copy()
    for h in range(2, H):
        Wh = w.layer(h)
        errs.append(np.linalg.norm(Wh[:r, :r] - np.eye(r)))
        errs.append(np.linalg.norm(Wh[:r, r:]))
        errs.append(np.linalg.norm(Wh[r:, :r]))
        z[h - 1] = Wh[r:, r:].copy()
    WH = w.layer(H)
    errs.append(np.linalg.norm(WH[:, :r] - U_S))
    z[H - 1] = bundle.U[:, r:].T @ WH[:, r:]
    errs.append(np.linalg.norm(WH[:, r:] - bundle.U[:, r:] @ z[H - 1]))
    K = partial_suffix(w, 2)
    errs.append(
        np.linalg.norm(K - np.hstack([U_S, np.zeros((shape.d_y, shape.dims[1] - r))]))
    )
    if max(errs) > tol:
        raise NeedsCanonicalization(
            f"weights deviate from canonical block form by {max(errs):.3g}"
        )
    return r, z


def tightened_structure(
    w: Weights,
    bundle: SigmaBundle,
    rank_tol: RankTolerance = RankTolerance(),
    eps: float = 1e-8,
) -> TightenedStructure:
    """Locate the rank-collapse indices (p, q) of a tightened canonical point
    and verify the product identities they imply."""
    shape = w.shape
    H = shape.H
    if H < 3:
        raise InvalidShape("tightened structure requires depth H >= 3")
    r, z = _canonical_blocks(w, bundle, rank_tol, eps)

    # All pivots must be tightened: the smaller of the two block ranks is r.
    for i in range(2, H + 1):
        for j in range(1, i):
            b1 = partial_prefix(w, j - 1) @ bundle.sigma_xy @ partial_suffix(w, i + 1)
            rank1 = numeric_rank(b1, rank_tol)
            if i == j + 1:
                rank2 = shape.dims[j]
            else:
                b2 = np.eye(shape.dims[j + 1])
                for k in range(j + 2, i):
                    b2 = w.layer(k) @ b2
                rank2 = numeric_rank(b2 @ w.layer(j + 1), rank_tol)
            if min(rank1, rank2) > r:
                raise NotTightened(f"pivot ({i}, {j}) is not tightened")

    p = None
    for h in range(H, 2, -1):
        if numeric_rank(partial_suffix(w, h), rank_tol) == r:
            p = h
            break
    if p is None:
        raise InternalInconsistency("no rank-collapse index p found above layer 2")
    q = None
    for qq in range(1, min(p - 1, H - 2) + 1):
        if numeric_rank(partial_prefix(w, qq) @ bundle.sigma_xy, rank_tol) == r:
            q = qq
            break
    if q is None:
        raise InternalInconsistency("no rank-collapse index q found below layer H-1")

    # Product identities implied by (p, q).
    U_S = bundle.U[:, :r]
    scale = 1.0 + w.frob_norm() + np.linalg.norm(bundle.sigma_xy)
    errs = [0.0]
    for i in range(1, p):
        suf = partial_suffix(w, i + 1)
        errs.append(
            np.linalg.norm(
                suf - np.hstack([U_S, np.zeros((shape.d_y, suf.shape[1] - r))])
            )
        )
    for i in range(p, H + 1):
        mid = np.eye(shape.dims[1])
        for k in range(2, i):
            mid = w.layer(k) @ mid
        tgt = np.zeros_like(mid)
        tgt[:r, :r] = np.eye(r)
        errs.append(np.linalg.norm(mid - tgt))
    U_Q = bundle.U[:, r:]
    for i in range(q + 1, H + 1):
        # Z_{i-1} .. Z_1 Sigma_XY U_Q = 0
        acc = z[0]
        for k in range(2, i):
            acc = z[k - 1] @ acc
        errs.append(np.linalg.norm(acc @ bundle.sigma_xy @ U_Q))
    for i in range(1, q + 1):
        mid = np.eye(shape.dims[i])
        for k in range(i + 1, H):
            mid = w.layer(k) @ mid
        tgt = np.zeros_like(mid)
        tgt[:r, :r] = np.eye(r)
        errs.append(np.linalg.norm(mid - tgt))
    residual = max(errs)
    if residual > eps * scale:
        raise InternalInconsistency(
            f"tightened product identities violated by {residual:.3g}"
        )
    return TightenedStructure(p=p, q=q, residual=float(residual))


def ft_st_decomposition(
    w: Weights,
    v: Direction,
    bundle: SigmaBundle,
    data: DataMatrices,
    rank_tol: RankTolerance = RankTolerance(),
    eps: float = 1e-8,
) -> FtStDecomposition:
    """Write c2 at a tightened canonical point as a sum of squares:
    c2 = a1 + ||A2||^2 + ||A3 - A4||^2 >= 0.

    Requires weights in canonical block form with support [1, r], r < r_max,
    tightened, depth >= 3.  The decomposition certifies the absence of
    second-order descent directions.
    """
    shape = w.shape
    H = shape.H
    st = tightened_structure(w, bundle, rank_tol=rank_tol, eps=eps)
    r, z = _canonical_blocks(w, bundle, rank_tol, eps)
    p, q = st.p, st.q
    d_y = bundle.d_y
    X = data.X

    J1 = range(p, H)
    J2 = range(q + 1, p)
    J3 = range(2, q + 1)

    # products of Z blocks from the top: G[i] = Z_H Z_{H-1} .. Z_{i+1}
    G = {H - 1: z[H - 1]}
    for i in range(H - 2, 0, -1):
        G[i] = G[i + 1] @ z[i]
    # products from the bottom: Kz[i] = Z_{i-1} .. Z_1  (Kz[2] = Z_1)
    Kz = {2: z[0]}
    for i in range(3, H + 1):
        Kz[i] = z[i - 2] @ Kz[i - 1]

    lam = bundle.lambdas
    U_S, U_Q = bundle.U[:, :r], bundle.U[:, r:]
    C = bundle.sigma_yx_sigma_xx_inv()
    P_S = U_S.T @ C @ X  # r x m
    V_sp = bundle.v_sprime_cols(r)
    Pi_sp = V_sp @ V_sp.T  # m x m projector onto the kept spectrum directions
    XV_Q = X @ bundle.v_q_cols(r)
    delta_q = np.sqrt(lam[r:])

    # a1: swap-type quadratic with eigenvalue gaps as weights.
    T1 = U_Q.T @ v.layer(H)[:, :r]
    for i in J1:
        T1 = T1 + G[i] @ v.layer(i)[r:, :r]
    gaps = lam[:r][None, :] - lam[r:][:, None]  # (d_y - r) x r, all > 0
    a1 = float(np.sum(gaps * T1 * T1))

    # A2: the fitting-direction aggregate.
    A2 = U_S.T @ v.layer(H)[:, :r] @ P_S
    for i in J1:
        A2 = A2 + v.layer(i)[:r, :r] @ P_S
    for i in J2:
        A2 = A2 + v.layer(i)[:r, :r] @ P_S + v.layer(i)[:r, r:] @ (Kz[i] @ X)
    for i in J3:
        A2 = A2 + v.layer(i)[:r, :r] @ P_S + v.layer(i)[:r, r:] @ (Kz[i] @ X @ Pi_sp)
    A2 = A2 + v.layer(1)[:r, :] @ X @ Pi_sp

    A3 = delta_q[:, None] * T1
    A4 = v.layer(1)[:r, :] @ XV_Q
    for i in J3:
        A4 = A4 + v.layer(i)[:r, r:] @ (Kz[i] @ XV_Q)
    A4 = A4.T

    return FtStDecomposition(a1=a1, A2=A2, A3=A3, A4=A4, structure=st)
