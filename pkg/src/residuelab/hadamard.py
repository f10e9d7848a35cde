"""Transport hierarchy for Hadamard coefficients in normal coordinates.

Along a ray h = t*omega the hierarchy

    2k u_k + (b.eta.h) u_k + 2 t u_k' + 2 P u_{k-1} = 0,    u_0(0) = 1,

is solved radially: u_0 by exponential quadrature of the radial log-derivative
of |det gtilde|^{1/2} (by the Gauss lemma, b.eta.h = h^j d_j log|g|^{1/2}),
and u_k for k >= 1 by the regular integrating-factor formula

    u_k(t) = -t^{-k} u_0(t) * int_0^t s^{k-1} (P u_{k-1})(s w) / u_0(s w) ds.

P u_{k-1} needs off-ray second derivatives; these come from moving
least-squares quadratic fits over a direction/radius stencil, while the
metric coefficient fields (gtilde, its first derivatives, b) are exact from
the variational jets of the exponential map.  Diagonal values u_k(x,x) are
the r -> 0 limit via Richardson extrapolation over the smallest radii.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson

from .geodesics import NormalCoordinateSystem

__all__ = [
    "HadamardTable",
    "TransportError",
    "solve_transport",
    "diagonal_coefficients",
    "sphere_directions",
]

MAX_ORDER = 3
SUPPORTED_DIMS = (2, 4)


class TransportError(RuntimeError):
    pass


def sphere_directions(n, resolution):
    """Quadrature directions and weights on S^{n-1}.

    n=2: uniform angles (trapezoid, spectrally accurate).
    n=4: product rule (Gauss-Legendre in psi with sin^2 weight, in theta with
    sin weight, uniform in phi).  Weights sum to Vol(S^{n-1}).
    """
    if n == 2:
        m = int(resolution)
        th = 2 * np.pi * np.arange(m) / m
        dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
        w = np.full(m, 2 * np.pi / m)
        return dirs, w
    if n == 4:
        npsi, nth, nphi = resolution if isinstance(resolution, tuple) else (
            int(resolution), max(int(resolution) - 2, 4), int(resolution))
        xs, ws = np.polynomial.legendre.leggauss(npsi)
        psi = 0.5 * np.pi * (xs + 1.0)
        wpsi = 0.5 * np.pi * ws * np.sin(psi) ** 2
        xs, ws = np.polynomial.legendre.leggauss(nth)
        th = 0.5 * np.pi * (xs + 1.0)
        wth = 0.5 * np.pi * ws * np.sin(th)
        phi = 2 * np.pi * np.arange(nphi) / nphi
        wphi = np.full(nphi, 2 * np.pi / nphi)
        dirs, w = [], []
        for p, wp in zip(psi, wpsi):
            sp, cp = np.sin(p), np.cos(p)
            for t, wt in zip(th, wth):
                st, ct = np.sin(t), np.cos(t)
                for f, wf in zip(phi, wphi):
                    dirs.append([cp, sp * ct, sp * st * np.cos(f), sp * st * np.sin(f)])
                    w.append(wp * wt * wf)
        return np.asarray(dirs), np.asarray(w)
    raise TransportError(f"unsupported dimension {n}; desk scale covers {SUPPORTED_DIMS}")


@dataclass
class HadamardTable:
    """Radial-grid samples of transport coefficients plus diagonal values."""

    ncs: NormalCoordinateSystem
    order: int
    directions: np.ndarray        # (R, n)
    dir_weights: np.ndarray       # (R,)
    radii: np.ndarray             # (J,)
    values: np.ndarray            # (order+1, R, J)
    diagonal: np.ndarray          # (order+1,)
    diag_errors: np.ndarray       # (order+1,)
    sqrt_det: np.ndarray          # (R, J)
    diagnostics: dict = field(default_factory=dict)

    def ray_splines(self, k):
        """Cubic radial interpolants of u_k, one per direction."""
        from scipy.interpolate import CubicSpline
        return [CubicSpline(self.radii, self.values[k, r])
                for r in range(len(self.directions))]

    def to_json(self):
        return json.dumps({
            "schema": "residuelab.hadamard_table.v1",
            "metric": self.ncs.metric.name,
            "base_point": self.ncs.base.tolist(),
            "order": self.order,
            "radii": self.radii.tolist(),
            "directions": self.directions.tolist(),
            "dir_weights": self.dir_weights.tolist(),
            "values": self.values.tolist(),
            "diagonal": self.diagonal.tolist(),
            "diag_errors": self.diag_errors.tolist(),
            "diagnostics": self.diagnostics,
        }, indent=1)


# ---------------------------------------------------------------------------
# moving least-squares stencil on the structured polar grid
# ---------------------------------------------------------------------------

def _ray_adjacency(dirs):
    """Nearest rays by angular distance, for each ray of the direction grid.

    Using true angular proximity (not grid-index windows) keeps stencils
    isotropic near the poles of product grids.
    """
    n = dirs.shape[1]
    count = 9 if n == 2 else 33
    count = min(count, len(dirs))
    dots = dirs @ dirs.T
    order = np.argsort(-dots, axis=1)
    return [list(order[i, :count]) for i in range(len(dirs))]


class _Stencil:
    """Index-window quadratic fits on the (ray, radius) grid.

    Neighborhoods are chosen by grid index (angular window x radial window),
    which keeps every stencil genuinely n-dimensional; offsets are whitened
    per center before fitting so anisotropic neighborhoods stay conditioned.
    """

    RADIAL_HALF_WIDTH = 2

    def __init__(self, points_grid, ray_adjacency):
        self.pts = points_grid                 # (R, J, n)
        self.R, self.J, self.n = points_grid.shape
        self.adj = ray_adjacency
        m = 1 + self.n + self.n * (self.n + 1) // 2
        self.nbasis = m
        self.max_cond = 0.0
        self._neighbor_cache = {}

    def _neighbor_indices(self, r, j):
        key = (r, j)
        if key in self._neighbor_cache:
            return self._neighbor_cache[key]
        w = self.RADIAL_HALF_WIDTH
        if j == 0:
            stride = max(self.R // 16, 1)
            rays = range(0, self.R, stride)
            rad = range(0, min(w + 2, self.J))
        else:
            rays = self.adj[r]
            lo = min(max(j - w, 0), max(self.J - (2 * w + 1), 1))
            rad = range(lo, min(lo + 2 * w + 1, self.J))
        idx = [(rr, jj) for rr in rays for jj in rad if not (jj == 0 and rr != 0)]
        if (0 in [p[1] for p in idx]) or j <= w:
            idx.append((0, 0))
        idx = sorted(set(idx))
        self._neighbor_cache[key] = idx
        return idx

    def fit_grid(self, fields):
        """Taylor data for fields sampled on the grid.

        ``fields``: (R, J, F).  Returns values (R,J,F), gradients (R,J,n,F),
        hessians (R,J,n,n,F).
        """
        R, J, n = self.R, self.J, self.n
        F = fields.shape[-1]
        values = np.zeros((R, J, F))
        grads = np.zeros((R, J, n, F))
        hess = np.zeros((R, J, n, n, F))
        origin_done = None
        for r in range(R):
            for j in range(J):
                if j == 0 and origin_done is not None:
                    values[r, j], grads[r, j], hess[r, j] = origin_done
                    continue
                idx = self._neighbor_indices(r, j)
                rows = np.array([p[0] for p in idx])
                cols = np.array([p[1] for p in idx])
                dx = self.pts[rows, cols] - self.pts[r, j]
                fv = fields[rows, cols]
                v, g, h = self._fit_one(dx, fv)
                values[r, j], grads[r, j], hess[r, j] = v, g, h
                if j == 0:
                    origin_done = (v, g, h)
        return values, grads, hess

    def _fit_one(self, dx, fv):
        n = self.n
        # whiten offsets: dx = z diag(s) V^T
        U, s, Vt = np.linalg.svd(dx, full_matrices=False)
        s = np.maximum(s, 1e-8 * s[0])
        z = dx @ Vt.T / s
        d = np.linalg.norm(z, axis=1)
        w = np.exp(-(d / max(d.max(), 1e-12) * 1.2) ** 2)
        cols = [np.ones(len(z))]
        for i in range(n):
            cols.append(z[:, i])
        pairs = [(i, j) for i in range(n) for j in range(i, n)]
        for i, j in pairs:
            cols.append(z[:, i] * z[:, j])
        A = np.stack(cols, axis=1) * w[:, None]
        b = fv * w[:, None]
        coef, _, rank, sv = np.linalg.lstsq(A, b, rcond=None)
        cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
        self.max_cond = max(self.max_cond, float(cond))
        value = coef[0]
        grad_z = coef[1:1 + n]
        Hz = np.zeros((n, n, fv.shape[1]))
        for p, (i, j) in enumerate(pairs):
            c = coef[1 + n + p]
            if i == j:
                Hz[i, i] = 2 * c
            else:
                Hz[i, j] = Hz[j, i] = c
        # back-transform: x = z diag(s) V^T  =>  d/dx = V diag(1/s) d/dz
        W = Vt.T / s[None, :]
        grad = W @ grad_z
        hess = np.einsum("ia,abf,jb->ijf", W, Hz, W)
        return value, grad, hess


# ---------------------------------------------------------------------------
# transport solve
# ---------------------------------------------------------------------------

def solve_transport(metric, base_point, order, *, n_radii=33, rmax=None,
                    resolution=None, frame=None, ncs=None):
    """Solve the transport hierarchy up to ``order`` at one base point."""
    n = metric.dim
    if n not in SUPPORTED_DIMS:
        raise TransportError(f"dim {n} unsupported (desk scale: {SUPPORTED_DIMS})")
    if not 0 <= order <= MAX_ORDER:
        raise TransportError(f"order {order} outside cap 0..{MAX_ORDER}")
    if ncs is None:
        ncs = NormalCoordinateSystem(metric, base_point, frame=frame)
    rmax = float(rmax if rmax is not None else 0.9 * ncs.radius)
    if rmax > ncs.radius:
        raise TransportError("radial grid exceeds trust radius")
    if resolution is None:
        resolution = 64 if n == 2 else (8, 6, 8)
    dirs, dweights = sphere_directions(n, resolution)
    radii = np.linspace(0.0, rmax, int(n_radii))
    R, J = len(dirs), len(radii)

    rays = ncs.ray_data(dirs, radii)

    gt = np.stack([r.gtilde for r in rays])          # (R, J, n, n)
    dgt = np.stack([r.dgtilde for r in rays])        # (R, J, n, n, n)
    sqrt_det = np.stack([r.sqrt_det for r in rays])  # (R, J)
    gti = np.linalg.inv(gt)
    # d_k g^{im} = -g^{ia} d_k g_{ab} g^{bm}
    dgti = -np.einsum("rjia,rjkab,rjbm->rjkim", gti, dgt, gti)
    # b^m = (1/2) g^{mk} g^{ab} d_k g_{ab}
    b_vec = 0.5 * np.einsum("rjmk,rjab,rjkab->rjm", gti, gti, dgt)
    # divergence term d_i g^{im}
    div_g = np.einsum("rjiim->rjm", dgti)

    values = np.zeros((order + 1, R, J))

    # ---- u_0 by exponential quadrature of the radial log-derivative --------
    omega_full = np.broadcast_to(dirs[:, None, :], (R, J, n))
    dlog = 0.5 * np.einsum("rjab,rjkab,rjk->rj", gti, dgt, omega_full)
    integral = cumulative_simpson(dlog, x=radii, axis=1, initial=0.0)
    values[0] = np.exp(-0.5 * integral)

    # exact gradient of u_0 = |g|^{-1/4}:  d_k u_0 = -(1/4) u_0 g^{ab} d_k g_{ab}
    du0 = -0.25 * values[0][..., None] * np.einsum("rjab,rjkab->rjk", gti, dgt)

    pts = np.einsum("j,ri->rji", radii, dirs)
    stencil = _Stencil(pts, _ray_adjacency(dirs))

    diagnostics = {"stencil_cond": [], "resolution": str(resolution),
                   "n_radii": int(n_radii), "rmax": rmax}

    prev = values[0]
    prev_grad_exact = du0
    for k in range(1, order + 1):
        if prev_grad_exact is not None:
            # differentiate the exact gradient field once for the Hessian
            _, grad_of_grad, _ = stencil.fit_grid(prev_grad_exact)
            hesses = grad_of_grad                              # (R, J, n, n)
            hesses = 0.5 * (hesses + np.swapaxes(hesses, -1, -2))
            grads = prev_grad_exact
        else:
            _, g1, h1 = stencil.fit_grid(prev[..., None])
            grads = g1[..., 0]
            hesses = h1[..., 0]
        diagnostics["stencil_cond"].append(stencil.max_cond)
        Pu = (np.einsum("rjik,rjik->rj", gti, hesses)
              + np.einsum("rjk,rjk->rj", div_g + b_vec, grads))
        ratio = Pu / values[0]
        integrand = radii[None, :] ** (k - 1) * ratio
        cumint = cumulative_simpson(integrand, x=radii, axis=1, initial=0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            u_k = -radii[None, :] ** float(-k) * values[0] * cumint
        u_k[:, 0] = -Pu[:, 0] / k        # t -> 0 limit of the ray formula
        values[k] = u_k
        prev = u_k
        prev_grad_exact = None

    table = HadamardTable(
        ncs=ncs, order=order, directions=dirs, dir_weights=dweights,
        radii=radii, values=values, diagonal=np.zeros(order + 1),
        diag_errors=np.zeros(order + 1), sqrt_det=sqrt_det,
        diagnostics=diagnostics,
    )
    diag, errs = _extrapolate_diagonal(table)
    table.diagonal, table.diag_errors = diag, errs
    table.diagonal[0] = 1.0              # initial condition, exact
    table.diag_errors[0] = 0.0
    return table


def _extrapolate_diagonal(table):
    """Diagonal u_k(x,x) via Richardson over the smallest positive radii."""
    order = table.order
    radii = table.radii
    diag = np.zeros(order + 1)
    errs = np.zeros(order + 1)
    diag[0] = 1.0
    use = slice(1, 4)
    rs = radii[use]
    w = table.dir_weights / table.dir_weights.sum()
    for k in range(1, order + 1):
        per_dir = []
        for r in range(len(table.directions)):
            v = list(table.values[k, r, use])
            x = list(rs)
            for lvl in range(1, len(v)):
                for i in range(len(v) - lvl):
                    v[i] = v[i + 1] + (v[i + 1] - v[i]) * x[i + lvl] / (x[i] - x[i + lvl])
            per_dir.append(v[0])
        per_dir = np.asarray(per_dir)
        diag[k] = float(per_dir @ w)
        spread = float(np.sqrt(np.sum(w * (per_dir - diag[k]) ** 2)))
        near0 = abs(float(table.values[k, :, 1] @ w) - diag[k])
        errs[k] = spread + 0.25 * near0 + 1e-15
    return diag, errs


def diagonal_coefficients(table):
    """Extrapolated diagonal values with error estimates."""
    if not np.all(np.isfinite(table.diagonal)):
        raise TransportError("diagonal extrapolation diverged (grid too coarse)")
    return list(zip(table.diagonal.tolist(), table.diag_errors.tolist()))
