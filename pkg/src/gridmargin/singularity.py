"""Proximity to and location on the singular surface of the manifold.

The singular surface is where the square reduced Jacobian dg/dy loses rank.
Its distance proxy is the smallest singular value; the associated left
singular vector r (with r^T J = 0 at the surface) certifies the direction of
degeneracy. Along a one-parameter path, sign changes of det(dg/dy) locate
nose points; counting them distinguishes a genuine collapse boundary from a
surface that can only be reached by first crossing another one.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg as sla

SIGMA_SINGULAR = 1e-4  # declared "on the singular surface" threshold


class SingularityError(RuntimeError):
    pass


class OffManifoldSample(SingularityError):
    pass


class EndpointNotSingular(SingularityError):
    pass


class SurfaceClass(str, Enum):
    CORRECT = "CorrectSurface"
    WRONG = "WrongSurface"


@dataclass(frozen=True)
class SingularDiagnosis:
    sigma_min: float
    left_vector: np.ndarray
    det_sign: int


def det_sign(J: np.ndarray) -> int:
    """Sign of det(J) from LU permutation parity and pivot signs.

    Never forms the determinant value, so it is immune to overflow and is
    invariant under positive row scaling.
    """
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(np.asarray(J, dtype=float), check_finite=False)
    diag = np.diag(lu)
    if np.any(diag == 0.0):
        return 0
    swaps = int(np.sum(piv != np.arange(len(piv))))
    sign = -1 if swaps % 2 else 1
    neg = int(np.sum(diag < 0.0))
    return sign * (-1 if neg % 2 else 1)


def canonical_sign(r: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Resolve the +/-r ambiguity: first component above tol made positive."""
    for v in r:
        if abs(v) > tol:
            return r if v > 0 else -r
    return r


def smallest_singular_pair(J: np.ndarray, max_iter: int = 200,
                           tol: float = 1e-12):
    """Smallest singular value of J and its left vector r (unit norm).

    Inverse iteration on J J^T with a tiny shift; falls back to a full SVD
    when the iteration fails to settle.
    """
    J = np.asarray(J, dtype=float)
    n = J.shape[0]
    scale = np.linalg.norm(J, ord="fro")
    if not np.all(np.isfinite(J)):
        raise ValueError("non-finite Jacobian")
    if scale == 0.0:
        r = np.zeros(n)
        r[0] = 1.0
        return 0.0, r
    A = J @ J.T
    shift = (1e-14 * scale) ** 2 + 1e-300
    try:
        cho = sla.cho_factor(A + shift * np.eye(n), check_finite=False)
    except np.linalg.LinAlgError:
        cho = None
    except sla.LinAlgError:
        cho = None
    if cho is not None:
        u = np.full(n, 1.0 / np.sqrt(n))
        sigma_prev = np.inf
        for _ in range(max_iter):
            w = sla.cho_solve(cho, u, check_finite=False)
            u = w / np.linalg.norm(w)
            sigma = np.linalg.norm(J.T @ u)
            if abs(sigma - sigma_prev) < tol * max(1.0, sigma):
                return float(sigma), canonical_sign(u)
            sigma_prev = sigma
    U, s, _ = np.linalg.svd(J)
    return float(s[-1]), canonical_sign(U[:, -1])


def diagnose(model, x, y) -> SingularDiagnosis:
    J = model.reduced_jac_y(x, y)
    sigma, r = smallest_singular_pair(J)
    return SingularDiagnosis(sigma_min=sigma, left_vector=r, det_sign=det_sign(J))


def nose_point_count(model, path_nodes, manifold_tol: float = 1e-6,
                     terminal_sigma: float = SIGMA_SINGULAR,
                     refine: bool = True):
    """Count nose points along an ordered (x, y) sample path.

    Interior crossings are det-sign changes between consecutive samples,
    refined by bisection on the linear interpolant; a terminal sample that is
    itself singular counts as the final nose point. Returns
    (count, locations) with locations as fractional node positions.
    """
    nodes = list(path_nodes)
    if not nodes:
        return 0, []
    for k, (x, y) in enumerate(nodes):
        res = np.max(np.abs(model.residual_reduced(x, y)))
        if res > manifold_tol:
            raise OffManifoldSample(f"node {k}: ||g||={res:.3e} exceeds {manifold_tol}")
    signs = [det_sign(model.reduced_jac_y(x, y)) for x, y in nodes]
    locations = []
    nonzero = [(k, s) for k, s in enumerate(signs) if s != 0]
    for (ka, sa), (kb, sb) in zip(nonzero[:-1], nonzero[1:]):
        if sa * sb < 0:
            if kb == ka + 1 and refine:
                loc = ka + _bisect_interp(model, nodes[ka], nodes[kb], sa)
            else:
                # Crossing pinned at intervening exactly-singular nodes.
                loc = 0.5 * (ka + kb)
            locations.append(loc)
    sigma_end, _ = smallest_singular_pair(model.reduced_jac_y(*nodes[-1]))
    if sigma_end < terminal_sigma:
        # A crossing inside the final segment is the same event as the
        # terminal arrival on the surface; keep only the terminal one.
        locations = [l for l in locations if l < len(nodes) - 2]
        locations.append(float(len(nodes) - 1))
    return len(locations), locations


def _bisect_interp(model, node_a, node_b, sign_a, tol: float = 1e-10) -> float:
    xa, ya = node_a
    xb, yb = node_b
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        x = (1 - mid) * xa + mid * xb
        y = (1 - mid) * ya + mid * yb
        s = det_sign(model.reduced_jac_y(x, y))
        if s == sign_a:
            lo = mid
        elif s == 0:
            return mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def classify_endpoint_surface(model, endpoint, reference_path,
                              terminal_sigma: float = SIGMA_SINGULAR) -> SurfaceClass:
    """Judge whether a singular endpoint sits on the reachable surface.

    ``reference_path`` must run on the manifold from the operating point to
    the endpoint. More than one nose point along it means another singular
    surface was crossed first, so the endpoint's margin is a false one.
    """
    x, y = endpoint
    sigma, _ = smallest_singular_pair(model.reduced_jac_y(x, y))
    if sigma >= terminal_sigma:
        raise EndpointNotSingular(f"sigma_min={sigma:.3e} at endpoint")
    count, _ = nose_point_count(model, reference_path, terminal_sigma=terminal_sigma)
    return SurfaceClass.WRONG if count > 1 else SurfaceClass.CORRECT
