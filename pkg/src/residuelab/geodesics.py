"""Geodesics, normal coordinates and the Kuranishi matrix.

The exponential map is integrated with its first and second variational
equations in one batched ODE system, so the differential of the map (and of
its inverse) comes out of jets instead of finite differences.  A
`NormalCoordinateSystem` bundles a base point, a signature-orthonormal frame
and dense per-ray data (pulled-back metric and its first derivatives) that
the transport solver consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .metrics import MetricError, christoffel_arrays

__all__ = [
    "GeodesicError",
    "exp_map",
    "log_map",
    "build_frame",
    "NormalCoordinateSystem",
    "RayData",
]


class GeodesicError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# batched geodesic + variational integration
# ---------------------------------------------------------------------------

def _pack(*arrays):
    return np.concatenate([a.reshape(a.shape[0], -1) for a in arrays], axis=1).ravel()


class _GeodesicSystem:
    """Batched geodesic flow with optional 1st/2nd variations w.r.t. v0."""

    def __init__(self, metric, order=0):
        self.metric = metric
        self.n = metric.dim
        self.order = order
        n = self.n
        self.pairs = [(a, b) for a in range(n) for b in range(a, n)]
        width = 2 * n
        if order >= 1:
            width += 2 * n * n
        if order >= 2:
            width += 2 * n * len(self.pairs)
        self.width = width

    def initial_state(self, x0, v0s):
        """v0s: (R, n) initial velocities from common base point x0."""
        R, n = v0s.shape[0], self.n
        blocks = [np.broadcast_to(np.asarray(x0, float), (R, n)).copy(), v0s.copy()]
        if self.order >= 1:
            blocks.append(np.zeros((R, n, n)))                      # J
            blocks.append(np.broadcast_to(np.eye(n), (R, n, n)).copy())  # W
        if self.order >= 2:
            blocks.append(np.zeros((R, n, len(self.pairs))))        # K
            blocks.append(np.zeros((R, n, len(self.pairs))))        # L
        return np.concatenate([b.reshape(R, -1) for b in blocks], axis=1).ravel()

    def unpack(self, state, R):
        n = self.n
        state = state.reshape(R, self.width)
        idx = 0

        def take(shape):
            nonlocal idx
            size = int(np.prod(shape))
            out = state[:, idx:idx + size].reshape((R,) + shape)
            idx += size
            return out

        Y = take((n,))
        V = take((n,))
        out = {"Y": Y, "V": V}
        if self.order >= 1:
            out["J"] = take((n, n))
            out["W"] = take((n, n))
        if self.order >= 2:
            out["K"] = take((n, len(self.pairs)))
            out["L"] = take((n, len(self.pairs)))
        return out

    def rhs(self, s, state, R):
        n = self.n
        st = self.unpack(state, R)
        Y, V = st["Y"], st["V"]
        jet_order = 1 + self.order
        arrays = self.metric.derivative_arrays(Y.T, jet_order)
        if self.order == 0:
            g, dg = arrays
            Gamma, _ = christoffel_arrays(g, dg)
        elif self.order == 1:
            g, dg, d2g = arrays
            Gamma, _, dGamma = christoffel_arrays(g, dg, d2g)
        else:
            g, dg, d2g, d3g = arrays
            Gamma, _, dGamma, d2Gamma = christoffel_arrays(g, dg, d2g, d3g)

        dY = V
        dV = -np.einsum("ijkr,rj,rk->ri", Gamma, V, V)
        blocks = [dY, dV]
        if self.order >= 1:
            J, W = st["J"], st["W"]
            dJ = W
            dW = (-np.einsum("mijkr,rma,rj,rk->ria", dGamma, J, V, V)
                  - 2 * np.einsum("ijkr,rja,rk->ria", Gamma, W, V))
            blocks += [dJ, dW]
        if self.order >= 2:
            K, L = st["K"], st["L"]
            ia = np.array([p[0] for p in self.pairs])
            ib = np.array([p[1] for p in self.pairs])
            Ja, Jb = J[:, :, ia], J[:, :, ib]
            Wa, Wb = W[:, :, ia], W[:, :, ib]
            dK = L
            dL = (-np.einsum("pmijkr,rpq,rmq,rj,rk->riq", d2Gamma, Ja, Jb, V, V)
                  - np.einsum("mijkr,rmq,rj,rk->riq", dGamma, K, V, V)
                  - 2 * np.einsum("mijkr,rmq,rjq,rk->riq", dGamma, Ja, Wb, V)
                  - 2 * np.einsum("mijkr,rmq,rjq,rk->riq", dGamma, Jb, Wa, V)
                  - 2 * np.einsum("ijkr,rjq,rk->riq", Gamma, L, V)
                  - 2 * np.einsum("ijkr,rjq,rkq->riq", Gamma, Wa, Wb))
            blocks += [dK, dL]
        return np.concatenate([b.reshape(R, -1) for b in blocks], axis=1).ravel()

    def integrate(self, x0, v0s, s_eval, rtol=1e-11, atol=1e-12):
        v0s = np.atleast_2d(np.asarray(v0s, dtype=float))
        R = v0s.shape[0]
        s_eval = np.asarray(s_eval, dtype=float)
        s_max = float(s_eval.max())
        if s_max == 0.0:
            y0 = self.initial_state(x0, v0s)
            sol_y = y0.reshape(-1, 1)
            return [self.unpack(sol_y[:, 0], R)]
        sol = solve_ivp(
            lambda s, y: self.rhs(s, y, R),
            (0.0, s_max),
            self.initial_state(x0, v0s),
            method="DOP853",
            t_eval=s_eval,
            rtol=rtol,
            atol=atol,
            dense_output=False,
        )
        if not sol.success:
            raise GeodesicError(f"geodesic integration failed: {sol.message}")
        return [self.unpack(sol.y[:, k], R) for k in range(sol.y.shape[1])]


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def exp_map(metric, x, v, rtol=1e-11, atol=1e-12):
    """Geodesic exponential: solve x'' + Gamma(x', x') = 0, return x(1)."""
    v = np.asarray(v, dtype=float)
    sys = _GeodesicSystem(metric, order=0)
    out = sys.integrate(x, v[None, :], [1.0], rtol=rtol, atol=atol)
    return out[-1]["Y"][0]


def _exp_with_jacobian(metric, x, v, rtol=1e-11, atol=1e-12):
    sys = _GeodesicSystem(metric, order=1)
    out = sys.integrate(x, np.asarray(v, float)[None, :], [1.0], rtol=rtol, atol=atol)
    st = out[-1]
    return st["Y"][0], st["J"][0]


def log_map(metric, x, y, v0=None, tol=1e-9, max_iter=40, rtol=1e-11, atol=1e-12):
    """Invert the exponential map by Newton shooting on v -> exp_x(v) - y."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    v = np.array(y - x, dtype=float) if v0 is None else np.array(v0, dtype=float)
    last = None
    for _ in range(max_iter):
        yv, J = _exp_with_jacobian(metric, x, v, rtol=rtol, atol=atol)
        r = yv - y
        last = float(np.linalg.norm(r))
        if last <= tol:
            return v
        try:
            dv = np.linalg.solve(J, r)
        except np.linalg.LinAlgError as exc:
            raise GeodesicError(f"singular exp differential in Newton step: {exc}")
        # damped step if full Newton overshoots
        step = 1.0
        for _ in range(8):
            v_new = v - step * dv
            y_new = exp_map(metric, x, v_new, rtol=rtol, atol=atol)
            if np.linalg.norm(y_new - y) < last:
                break
            step *= 0.5
        v = v - step * dv
    raise GeodesicError(
        f"log_map Newton did not converge after {max_iter} iterations; "
        f"final residual {last:.3e}")


def build_frame(metric, x, time_orientation=True):
    """Signature-respecting Gram-Schmidt frame from the coordinate basis.

    Columns of the returned matrix are the frame vectors e_a in chart
    components, with g(e_a, e_b) = eta_{ab}.
    """
    x = np.asarray(x, dtype=float)
    g = metric.check_point(x)
    n = metric.dim
    sig = metric.signature
    E = np.zeros((n, n))
    for a in range(n):
        v = np.zeros(n)
        v[a] = 1.0
        for b in range(a):
            v = v - sig[b] * (E[:, b] @ g @ v) * E[:, b]
        norm2 = v @ g @ v
        if abs(norm2) < 1e-14:
            raise MetricError(f"degenerate metric at {x}: cannot orthonormalize")
        if np.sign(norm2) != sig[a]:
            raise MetricError(
                f"coordinate order incompatible with signature at {x} "
                f"(axis {a}: g(v,v)={norm2:+.3e}, declared {sig[a]:+d})")
        E[:, a] = v / np.sqrt(abs(norm2))
    if time_orientation and sig[0] == 1 and metric.lorentzian and E[0, 0] < 0:
        E[:, 0] = -E[:, 0]
    return E


@dataclass
class RayData:
    """Dense data along one ray h = t*omega of a normal chart."""

    direction: np.ndarray        # omega, unit vector in frame components
    radii: np.ndarray            # (J,)
    points: np.ndarray           # (J, n) chart points exp(t omega)
    gtilde: np.ndarray           # (J, n, n) pulled-back metric
    dgtilde: np.ndarray          # (J, n, n, n) [k,i,j] = d_k gtilde_{ij}
    sqrt_det: np.ndarray         # (J,) |det gtilde|^{1/2}


class NormalCoordinateSystem:
    """Normal coordinates at a base point: frame, exp/log, pulled-back metric."""

    def __init__(self, metric, base_point, frame=None, radius=None,
                 rtol=1e-11, atol=1e-12):
        self.metric = metric
        self.base = np.asarray(base_point, dtype=float)
        self.frame = build_frame(metric, self.base) if frame is None else np.asarray(frame, float)
        self.radius = float(radius if radius is not None else metric.trust_radius)
        self.rtol = rtol
        self.atol = atol
        self.eta = metric.eta
        # frame orthonormality sanity
        g = metric.component_values(self.base.reshape(-1, 1))[..., 0]
        defect = np.max(np.abs(self.frame.T @ g @ self.frame - self.eta))
        if defect > 1e-10:
            raise MetricError(f"frame not orthonormal: defect {defect:.2e}")

    # -- basic maps ---------------------------------------------------------
    def from_normal(self, h):
        h = np.asarray(h, dtype=float)
        if np.linalg.norm(h) > self.radius * (1 + 1e-12):
            raise GeodesicError(
                f"|h|={np.linalg.norm(h):.4f} exceeds trust radius {self.radius}")
        if np.linalg.norm(h) == 0.0:
            return self.base.copy()
        return exp_map(self.metric, self.base, self.frame @ h,
                       rtol=self.rtol, atol=self.atol)

    def to_normal(self, y):
        v = log_map(self.metric, self.base, y, rtol=self.rtol, atol=self.atol)
        h = np.linalg.solve(self.frame, v)
        if np.linalg.norm(h) > self.radius * (1 + 1e-9):
            raise GeodesicError("point outside trust ball")
        return h

    # -- dense ray data -----------------------------------------------------
    def ray_data(self, directions, radii):
        """Pulled-back metric and first derivatives along rays h = t*omega.

        ``directions``: (R, n) unit vectors; ``radii``: increasing, radii[0]
        may be 0.  One batched ODE solve integrates base + first + second
        variations for all rays; the scaling identities
        d exp|_{t v} = J(t)/t and d^2 exp|_{t v} = K(t)/t^2 convert flow-time
        jets into radius jets.
        """
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        radii = np.asarray(radii, dtype=float)
        if radii[-1] > self.radius * (1 + 1e-12):
            raise GeodesicError("radial grid exceeds trust radius")
        R, n = directions.shape
        sys = _GeodesicSystem(self.metric, order=2)
        v0s = directions @ self.frame.T      # v = E omega
        pos = radii > 0
        states = sys.integrate(self.base, v0s, radii[pos],
                               rtol=self.rtol, atol=self.atol)
        pairs = sys.pairs
        E = self.frame
        out = []
        g0 = self.metric.component_values(self.base.reshape(-1, 1))[..., 0]
        for r_idx in range(R):
            J = len(radii)
            pts = np.zeros((J, n))
            gt = np.zeros((J, n, n))
            dgt = np.zeros((J, n, n, n))
            sq = np.zeros(J)
            # analytic origin row
            pts[0] = self.base
            gt[0] = self.eta
            sq[0] = 1.0
            k0 = 0
            for j, t in enumerate(radii):
                if t == 0.0:
                    k0 += 1
                    continue
                st = states[j - k0]
                Y = st["Y"][r_idx]
                Jm = st["J"][r_idx] / t           # d exp at v = tEomega
                Km = st["K"][r_idx] / t ** 2
                Kfull = np.zeros((n, n, n))
                for p_idx, (a, b) in enumerate(pairs):
                    Kfull[:, a, b] = Km[:, p_idx]
                    Kfull[:, b, a] = Km[:, p_idx]
                Jh = Jm @ E                        # dy/dh
                Kh = np.einsum("mab,ai,bj->mij", Kfull, E, E)
                g, dg = self.metric.derivative_arrays(Y.reshape(-1, 1), 1)
                g, dg = g[..., 0], dg[..., 0]
                pts[j] = Y
                gt[j] = Jh.T @ g @ Jh
                dgt[j] = (np.einsum("rmn,rk,mi,nj->kij", dg, Jh, Jh, Jh)
                          + np.einsum("mn,mik,nj->kij", g, Kh, Jh)
                          + np.einsum("mn,mi,njk->kij", g, Jh, Kh))
                sq[j] = np.sqrt(abs(np.linalg.det(gt[j])))
            out.append(RayData(directions[r_idx], radii.copy(), pts, gt, dgt, sq))
        return out

    # -- Kuranishi matrix ----------------------------------------------------
    def kuranishi_matrix(self, h, quad_order=12):
        """M(x,h) = int_0^1 dG|_{x + t E h} E dt with G = frame coords of log.

        Gauss-Legendre in t; dG = E^{-1} (d exp)^{-1} from variational jets.
        Satisfies M(x,0) = Id and M(x,h) h = G(x + E h).
        """
        h = np.asarray(h, dtype=float)
        if np.linalg.norm(h) == 0.0:
            return np.eye(self.metric.dim)
        if np.linalg.norm(h) > self.radius:
            raise GeodesicError("kuranishi point outside trust region")
        nodes, weights = np.polynomial.legendre.leggauss(quad_order)
        nodes = 0.5 * (nodes + 1.0)
        weights = 0.5 * weights
        E = self.frame
        Einv = np.linalg.inv(E)
        M = np.zeros((self.metric.dim, self.metric.dim))
        v_guess = None
        for t, w in zip(nodes, weights):
            y = self.base + t * (E @ h)
            v = log_map(self.metric, self.base, y, v0=v_guess,
                        rtol=self.rtol, atol=self.atol)
            v_guess = v
            _, J = _exp_with_jacobian(self.metric, self.base, v,
                                      rtol=self.rtol, atol=self.atol)
            M += w * (Einv @ np.linalg.inv(J) @ E)
        return M

    # -- diagnostics ---------------------------------------------------------
    def gauss_defect(self, h):
        """|gtilde_{ij}(h) h^j - eta_{ij} h^j| (Gauss lemma residual)."""
        h = np.asarray(h, dtype=float)
        t = np.linalg.norm(h)
        if t == 0:
            return 0.0
        ray = self.ray_data((h / t)[None, :], np.array([0.0, t]))[0]
        gt = ray.gtilde[1]
        return float(np.linalg.norm(gt @ h - self.eta @ h))
