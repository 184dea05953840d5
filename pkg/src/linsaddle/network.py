"""The deep linear network: shapes, weights, loss, exact gradients.

Layers are stored input-to-output (W_1 first), so ``layers[h-1]`` is the
d_h x d_{h-1} matrix W_h and the realized global map is
W_H ... W_1 = layers[-1] @ ... @ layers[0].
Empty index ranges in products denote identity matrices throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data_model import DataMatrices, SigmaBundle
from .errors import InvalidRank, InvalidShape


@dataclass(frozen=True)
class NetworkShape:
    dims: tuple  # (d_0, d_1, ..., d_H)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < 3:
            raise InvalidShape("need at least depth H = 2, i.e. 3 dimensions")
        if any(d < 1 for d in dims):
            raise InvalidShape("all layer widths must be positive")
        object.__setattr__(self, "dims", dims)

    @property
    def H(self) -> int:
        return len(self.dims) - 1

    @property
    def d_x(self) -> int:
        return self.dims[0]

    @property
    def d_y(self) -> int:
        return self.dims[-1]

    @property
    def r_max(self) -> int:
        return min(self.dims)

    def layer_shape(self, h: int) -> tuple[int, int]:
        """Shape of W_h (1-based layer index)."""
        return (self.dims[h], self.dims[h - 1])

    @property
    def n_params(self) -> int:
        return sum(self.dims[h] * self.dims[h - 1] for h in range(1, self.H + 1))


class _LayerStack:
    """Immutable ordered list of layer matrices compatible with a shape."""

    __slots__ = ("layers", "shape")

    def __init__(self, layers, shape: NetworkShape):
        mats = []
        for h, M in enumerate(layers, start=1):
            M = np.ascontiguousarray(np.asarray(M, dtype=float))
            if M.shape != shape.layer_shape(h):
                raise InvalidShape(
                    f"layer {h}: expected {shape.layer_shape(h)}, got {M.shape}"
                )
            if not np.all(np.isfinite(M)):
                raise InvalidShape(f"layer {h} has non-finite entries")
            M.flags.writeable = False
            mats.append(M)
        if len(mats) != shape.H:
            raise InvalidShape(f"expected {shape.H} layers, got {len(mats)}")
        object.__setattr__(self, "layers", tuple(mats))
        object.__setattr__(self, "shape", shape)

    def __setattr__(self, *a):  # pragma: no cover - immutability guard
        raise AttributeError("immutable")

    def layer(self, h: int) -> np.ndarray:
        """W_h by 1-based index."""
        return self.layers[h - 1]

    def frob_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(M * M) for M in self.layers)))

    def sq_norm(self) -> float:
        return float(sum(np.sum(M * M) for M in self.layers))


class Weights(_LayerStack):
    pass


class Direction(_LayerStack):
    """A tangent perturbation, same layout as Weights."""


def zeros_like(shape: NetworkShape) -> Direction:
    return Direction([np.zeros(shape.layer_shape(h)) for h in range(1, shape.H + 1)], shape)


def global_map(w: _LayerStack) -> np.ndarray:
    """The product W_H ... W_1 (identity for empty ranges by convention)."""
    P = np.eye(w.shape.d_x)
    for M in w.layers:
        P = M @ P
    return P


def partial_prefix(w: _LayerStack, h: int) -> np.ndarray:
    """W_h ... W_1, with h = 0 giving I_{d_x}."""
    P = np.eye(w.shape.d_x)
    for k in range(1, h + 1):
        P = w.layer(k) @ P
    return P


def partial_suffix(w: _LayerStack, h: int) -> np.ndarray:
    """W_H ... W_h, with h = H + 1 giving I_{d_y}."""
    P = np.eye(w.shape.d_y)
    for k in range(w.shape.H, h - 1, -1):
        P = P @ w.layer(k)
    return P


def loss(w: Weights, bundle: SigmaBundle, data: DataMatrices) -> float:
    if w.shape.d_x != data.d_x or w.shape.d_y != data.d_y:
        raise InvalidShape("weights incompatible with data dimensions")
    R = global_map(w) @ data.X - data.Y
    return float(np.sum(R * R))


def gradient(w: Weights, bundle: SigmaBundle) -> Direction:
    """Exact partial gradients of the square loss.

    For every layer h the partial gradient is
    2 (W_H...W_{h+1})^T (W_H...W_1 Sigma_XX - Sigma_YX) (W_{h-1}...W_1)^T,
    with empty products equal to identity.
    """
    if w.shape.d_x != bundle.d_x or w.shape.d_y != bundle.d_y:
        raise InvalidShape("weights incompatible with bundle dimensions")
    H = w.shape.H
    # prefixes[h] = W_h ... W_1  (prefixes[0] = I)
    prefixes = [np.eye(w.shape.d_x)]
    for h in range(1, H + 1):
        prefixes.append(w.layer(h) @ prefixes[-1])
    # suffixes[h] = W_H ... W_h  (suffixes[H + 1] = I)
    suffixes = [None] * (H + 2)
    suffixes[H + 1] = np.eye(w.shape.d_y)
    for h in range(H, 0, -1):
        suffixes[h] = suffixes[h + 1] @ w.layer(h)

    G = prefixes[H] @ bundle.sigma_xx - bundle.sigma_yx
    grads = [
        2.0 * suffixes[h + 1].T @ G @ prefixes[h - 1].T for h in range(1, H + 1)
    ]
    return Direction(grads, w.shape)


def best_rank_r_map(bundle: SigmaBundle, r: int) -> np.ndarray:
    """U_S U_S^T Sigma_YX Sigma_XX^{-1} with S = [1, r]; the rank-r least
    squares optimum.  r = 0 gives the zero map."""
    if not (0 <= r <= bundle.d_y):
        raise InvalidRank(f"r must be in [0, {bundle.d_y}], got {r}")
    if r == 0:
        return np.zeros((bundle.d_y, bundle.d_x))
    U_S = bundle.U[:, :r]
    return U_S @ (U_S.T @ bundle.sigma_yx_sigma_xx_inv())


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def weights_to_json(w: _LayerStack) -> str:
    return json.dumps(
        {"dims": list(w.shape.dims), "layers": [M.tolist() for M in w.layers]}
    )


def weights_from_json(text: str) -> Weights:
    obj = json.loads(text)
    shape = NetworkShape(tuple(obj["dims"]))
    return Weights([np.asarray(L, dtype=float) for L in obj["layers"]], shape)
