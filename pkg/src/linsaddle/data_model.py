"""Training data, second-moment matrices and the spectral bundle.

Everything downstream is phrased in terms of the matrices gathered here:
the second moments of the data, the whitened cross-covariance
sigma_half = Sigma_YX Sigma_XX^{-1} X and its (sign-fixed, hence
deterministic) singular value decomposition U diag(sqrt(lambda)) V^T.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import AssumptionViolated, InvalidShape
from .ranktol import RankTolerance, numeric_rank

# Default tolerances (relative unless stated otherwise).
EPS_ORTH = 1e-10
EPS_SVD = 1e-10
EPS_GAP = 1e-8  # absolute gap between consecutive eigenvalues


@dataclass(frozen=True)
class DataMatrices:
    """Column-wise samples: X is d_x x m, Y is d_y x m."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.ascontiguousarray(np.asarray(self.X, dtype=float))
        Y = np.ascontiguousarray(np.asarray(self.Y, dtype=float))
        if X.ndim != 2 or Y.ndim != 2:
            raise InvalidShape("X and Y must be 2-D matrices")
        if X.shape[1] != Y.shape[1]:
            raise InvalidShape(
                f"X and Y must share the sample axis: {X.shape[1]} != {Y.shape[1]}"
            )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise InvalidShape("data entries must be finite")
        X.flags.writeable = False
        Y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def d_x(self) -> int:
        return self.X.shape[0]

    @property
    def d_y(self) -> int:
        return self.Y.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class SigmaBundle:
    """All data-derived matrices plus the deterministic SVD of sigma_half."""

    sigma_xx: np.ndarray
    sigma_xy: np.ndarray
    sigma_yx: np.ndarray
    sigma_yy: np.ndarray
    sigma_half: np.ndarray  # d_y x m
    sigma: np.ndarray  # d_y x d_y
    U: np.ndarray  # d_y x d_y orthogonal
    delta: np.ndarray  # d_y x m rectangular diagonal
    V: np.ndarray  # m x m orthogonal
    lambdas: np.ndarray  # strictly decreasing, positive, length d_y

    @property
    def d_x(self) -> int:
        return self.sigma_xx.shape[0]

    @property
    def d_y(self) -> int:
        return self.U.shape[0]

    @property
    def m(self) -> int:
        return self.V.shape[0]

    def u_cols(self, support) -> np.ndarray:
        """Columns of U selected by a 1-based index set (sorted)."""
        idx = [s - 1 for s in sorted(support)]
        return self.U[:, idx]

    def u_complement(self, support) -> np.ndarray:
        """Columns of U outside a 1-based support set."""
        sel = sorted(set(range(1, self.d_y + 1)) - set(support))
        return self.U[:, [s - 1 for s in sel]]

    def v_q_cols(self, r: int) -> np.ndarray:
        """Columns r+1..d_y of V (associated with the discarded spectrum)."""
        return self.V[:, r:self.d_y]

    def v_sprime_cols(self, r: int) -> np.ndarray:
        """Columns of V indexed by [1,r] union [d_y+1, m]."""
        idx = list(range(r)) + list(range(self.d_y, self.m))
        return self.V[:, idx]

    def sigma_yx_sigma_xx_inv(self) -> np.ndarray:
        return np.linalg.solve(self.sigma_xx.T, self.sigma_yx.T).T


@dataclass(frozen=True)
class AssumptionReport:
    holds: bool
    checks: list = field(default_factory=list)  # (name, passed, measured, threshold)

    def failed(self):
        return [c for c in self.checks if not c[1]]


def generate_gaussian_data(d_x: int, d_y: int, m: int, seed: int) -> DataMatrices:
    """I.i.d. standard normal X (d_x x m) and Y (d_y x m) from a seeded generator.

    The same seed always produces bit-identical matrices.
    """
    if not (1 <= d_y <= d_x <= m):
        raise InvalidShape(
            f"need 1 <= d_y <= d_x <= m, got d_y={d_y}, d_x={d_x}, m={m}"
        )
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((d_x, m))
    Y = rng.standard_normal((d_y, m))
    return DataMatrices(X=X, Y=Y)


def check_assumption_h(
    data: DataMatrices,
    tol: RankTolerance = RankTolerance(),
    eps_gap: float = EPS_GAP,
) -> AssumptionReport:
    """Report on the standing assumption: dimension ordering, full ranks,
    and distinct positive eigenvalues of sigma."""
    checks = []
    dims_ok = data.d_y <= data.d_x <= data.m
    checks.append(("dimension_order", dims_ok, (data.d_y, data.d_x, data.m), None))

    sigma_xx = data.X @ data.X.T
    sigma_xy = data.X @ data.Y.T
    rk_xx = numeric_rank(sigma_xx, tol)
    checks.append(("sigma_xx_full_rank", rk_xx == data.d_x, rk_xx, data.d_x))
    rk_xy = numeric_rank(sigma_xy, tol)
    checks.append(("sigma_xy_full_rank", rk_xy == data.d_y, rk_xy, data.d_y))

    if dims_ok and rk_xx == data.d_x:
        sigma_half = np.linalg.solve(sigma_xx, data.X).T @ sigma_xy
        sigma_half = sigma_half.T  # d_y x m
        s = np.linalg.svd(sigma_half, compute_uv=False)
        lambdas = s**2
        gaps = lambdas[:-1] - lambdas[1:]
        min_gap = float(gaps.min()) if gaps.size else float("inf")
        checks.append(("eigenvalue_gaps", min_gap > eps_gap, min_gap, eps_gap))
        lam_min = float(lambdas[-1]) if lambdas.size else 0.0
        checks.append(("sigma_invertible", lam_min > eps_gap, lam_min, eps_gap))
    else:
        checks.append(("eigenvalue_gaps", False, None, eps_gap))
        checks.append(("sigma_invertible", False, None, eps_gap))

    return AssumptionReport(holds=all(c[1] for c in checks), checks=checks)


def _fix_svd_signs(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sign convention making the SVD deterministic: the first entry of each
    U column whose magnitude is non-negligible is made nonnegative (matching
    V columns flipped along).  V columns beyond d_y get the same treatment
    on their own (they never touch the reconstruction)."""
    U = U.copy()
    V = V.copy()
    d_y = U.shape[1]
    for k in range(d_y):
        col = U[:, k]
        nz = np.nonzero(np.abs(col) > 1e-12 * max(1.0, np.abs(col).max()))[0]
        if nz.size and col[nz[0]] < 0:
            U[:, k] = -col
            V[:, k] = -V[:, k]
    for k in range(d_y, V.shape[1]):
        col = V[:, k]
        nz = np.nonzero(np.abs(col) > 1e-12 * max(1.0, np.abs(col).max()))[0]
        if nz.size and col[nz[0]] < 0:
            V[:, k] = -col
    return U, V


def build_sigma_bundle(
    data: DataMatrices,
    tol: RankTolerance = RankTolerance(),
    eps_gap: float = EPS_GAP,
) -> SigmaBundle:
    report = check_assumption_h(data, tol=tol, eps_gap=eps_gap)
    if not report.holds:
        names = ", ".join(c[0] for c in report.failed())
        raise AssumptionViolated(f"assumption checks failed: {names}")

    X, Y = data.X, data.Y
    sigma_xx = X @ X.T
    sigma_xy = X @ Y.T
    sigma_yx = sigma_xy.T.copy()
    sigma_yy = Y @ Y.T
    sigma_half = np.linalg.solve(sigma_xx.T, sigma_yx.T).T @ X  # d_y x m

    U, s, Vt = np.linalg.svd(sigma_half, full_matrices=True)
    V = Vt.T
    U, V = _fix_svd_signs(U, V)

    d_y, m = sigma_half.shape
    delta = np.zeros((d_y, m))
    delta[:d_y, :d_y] = np.diag(s)
    lambdas = s**2
    sigma = sigma_half @ sigma_half.T

    bundle = SigmaBundle(
        sigma_xx=sigma_xx,
        sigma_xy=sigma_xy,
        sigma_yx=sigma_yx,
        sigma_yy=sigma_yy,
        sigma_half=sigma_half,
        sigma=sigma,
        U=U,
        delta=delta,
        V=V,
        lambdas=lambdas,
    )
    _validate_bundle(bundle)
    return bundle


def _validate_bundle(b: SigmaBundle) -> None:
    d_y = b.d_y
    if np.linalg.norm(b.U.T @ b.U - np.eye(d_y)) > EPS_ORTH * d_y:
        raise AssumptionViolated("U failed orthogonality check")
    if np.linalg.norm(b.V.T @ b.V - np.eye(b.m)) > EPS_ORTH * b.m:
        raise AssumptionViolated("V failed orthogonality check")
    recon = b.U @ b.delta @ b.V.T
    if np.linalg.norm(recon - b.sigma_half) > EPS_SVD * max(
        1.0, np.linalg.norm(b.sigma_half)
    ):
        raise AssumptionViolated("SVD reconstruction check failed")


# ---------------------------------------------------------------------------
# External interfaces: CSV matrices and JSON bundle export.
# ---------------------------------------------------------------------------

def write_matrix_csv(path, M: np.ndarray) -> None:
    M = np.asarray(M, dtype=float)
    with open(path, "w") as f:
        f.write(f"# rows={M.shape[0]} cols={M.shape[1]}\n")
        for row in M:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    with open(path) as f:
        header = f.readline().strip()
        if not header.startswith("#"):
            raise InvalidShape(f"{path}: missing '# rows=.. cols=..' header")
        fields = dict(
            tok.split("=") for tok in header.lstrip("#").split() if "=" in tok
        )
        rows, cols = int(fields["rows"]), int(fields["cols"])
        M = np.loadtxt(f, delimiter=",", ndmin=2)
    if M.shape != (rows, cols):
        raise InvalidShape(f"{path}: header says {(rows, cols)}, got {M.shape}")
    return M


def bundle_to_json(b: SigmaBundle, include_v_q: bool = False, r: int | None = None) -> str:
    obj = {
        "lambdas": b.lambdas.tolist(),
        "U": b.U.tolist(),
    }
    if include_v_q and r is not None:
        obj["V_Q_cols"] = b.v_q_cols(r).tolist()
    return json.dumps(obj)
