"""Metric definitions, curvature and the wave operator.

A metric lives in a single chart: an ``n x n`` symmetric array of expression
trees in the variables ``x0..x{n-1}`` together with a declared signature
(mostly-minus Lorentzian ``(+,-,...,-)`` or all-plus Riemannian).  Everything
downstream (geodesics, transport equations) consumes the jet evaluators
defined here.

Curvature sign conventions are pinned by the test ``R = n(n-1)/a^2`` for the
round sphere of radius ``a`` in Riemannian mode:

    R^i_{jkl} = d_k Gamma^i_{lj} - d_l Gamma^i_{kj} + Gamma Gamma - Gamma Gamma
    Ric_{jl}  = R^i_{jil},   R = g^{jl} Ric_{jl}

Applied uniformly, this makes the mostly-minus de Sitter slab come out with
R = -n(n-1); the identity u_1(x,x) = -R/6 then holds in both signatures.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np

from .expr import ExprError, Expression, Jet, parse_expression, variable_jets

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

__all__ = [
    "MetricError",
    "MetricExpr",
    "CurvatureAtPoint",
    "parse_metric",
    "zoo_metric",
    "ZOO_NAMES",
    "curvature_at",
    "wave_apply",
    "scalar_curvature_fd",
]


class MetricError(ValueError):
    pass


@dataclass
class MetricExpr:
    """Chart metric: dimension, signature and component expression trees."""

    dim: int
    signature: tuple
    components: list  # dim x dim nested list of Expression
    name: str = ""
    trust_radius: float = 0.5

    def __post_init__(self):
        n = self.dim
        if n < 2:
            raise MetricError("dim must be >= 2")
        if len(self.signature) != n or any(s not in (-1, 1) for s in self.signature):
            raise MetricError("signature must be a list of +-1 of length dim")

    @property
    def lorentzian(self):
        return any(s == -1 for s in self.signature)

    @property
    def eta(self):
        return np.diag(np.asarray(self.signature, dtype=float))

    # -- evaluation ---------------------------------------------------------
    def component_values(self, points):
        """g_ij at an (n, P) array of points; returns (n, n, P)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[0] != self.dim:
            points = points.T
        n, batch = self.dim, points.shape[1:]
        out = np.zeros((n, n) + batch)
        for i in range(n):
            for j in range(n):
                out[i, j] = np.broadcast_to(self.components[i][j](points), batch)
        return out

    def jets(self, points, order):
        """Jets of all g_ij at points (n, P); returns nested list of Jet."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[0] != self.dim:
            points = points.T
        xs = variable_jets(points, order)
        alg = xs[0].alg
        batch = points.shape[1:]

        def as_jet(v):
            if isinstance(v, Jet):
                return v
            return Jet.constant(alg, np.broadcast_to(np.asarray(v, dtype=float), batch))

        return [[as_jet(self.components[i][j](xs)) for j in range(self.dim)]
                for i in range(self.dim)]

    def derivative_arrays(self, points, order):
        """g and its partials up to ``order`` as stacked arrays.

        Returns (g, dg, d2g, ...) with dg[k,i,j] = d_k g_ij, etc.; trailing
        axes are the point batch.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[0] != self.dim:
            points = points.T
        n, batch = self.dim, points.shape[1:]
        jets = self.jets(points, order)
        g = np.zeros((n, n) + batch)
        for i in range(n):
            for j in range(n):
                g[i, j] = np.broadcast_to(jets[i][j].value, batch)
        out = [g]
        if order >= 1:
            dg = np.zeros((n, n, n) + batch)
            for i in range(n):
                for j in range(n):
                    dg[:, i, j] = np.broadcast_to(jets[i][j].gradient(), (n,) + batch)
            out.append(dg)
        if order >= 2:
            d2g = np.zeros((n, n, n, n) + batch)
            for i in range(n):
                for j in range(n):
                    d2g[:, :, i, j] = np.broadcast_to(jets[i][j].hessian(), (n, n) + batch)
            out.append(d2g)
        if order >= 3:
            d3g = np.zeros((n, n, n, n, n) + batch)
            for i in range(n):
                for j in range(n):
                    jet = jets[i][j]
                    for a in range(n):
                        for b in range(a, n):
                            for c in range(b, n):
                                gamma = [0] * n
                                gamma[a] += 1
                                gamma[b] += 1
                                gamma[c] += 1
                                val = jet.partial(tuple(gamma))
                                for p, q, r in {(a, b, c), (a, c, b), (b, a, c),
                                                (b, c, a), (c, a, b), (c, b, a)}:
                                    d3g[p, q, r, i, j] = val
            out.append(d3g)
        return tuple(out)

    def check_point(self, x, tol=1e-10):
        """Verify invertibility and signature of g(x); raise if violated."""
        g = self.component_values(np.asarray(x, dtype=float).reshape(self.dim, 1))[..., 0]
        if abs(np.linalg.det(g)) < tol:
            raise MetricError(f"singular metric at {x}")
        eig = np.linalg.eigvalsh(0.5 * (g + g.T))
        signs = tuple(int(np.sign(e)) for e in sorted(eig))
        if signs != tuple(sorted(self.signature)):
            raise MetricError(
                f"eigenvalue signs {signs} do not match declared signature at {x}")
        return g


@dataclass
class CurvatureAtPoint:
    christoffel: np.ndarray  # Gamma^i_{jk}
    riemann: np.ndarray      # R^i_{jkl}
    ricci: np.ndarray        # R_{jk}
    scalar: float


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _expr_constant(value, dim):
    return parse_expression(repr(float(value)), dim)


_ZERO_CACHE = {}


def _zero_expr(dim):
    if dim not in _ZERO_CACHE:
        _ZERO_CACHE[dim] = parse_expression("0", dim)
    return _ZERO_CACHE[dim]


def parse_metric(source, name=""):
    """Parse a metric definition.

    Two forms are accepted:

    * compact: ``"diag(c0, c1, ...)"`` with numeric constants; the dimension
      is the number of entries and the signature is their signs;
    * TOML text with keys ``dim``, ``signature``, optional ``name`` and
      ``trust_radius``, and components either as ``diag = ["expr", ...]`` or
      individual ``g00 = "expr"`` entries (unspecified off-diagonals are 0).
    """
    stripped = source.strip()
    if stripped.startswith("diag(") and stripped.endswith(")"):
        inner = stripped[len("diag("):-1]
        entries = [e.strip() for e in inner.split(",") if e.strip()]
        try:
            values = [float(e) for e in entries]
        except ValueError as exc:
            raise MetricError(f"compact diag form needs numeric entries: {exc}") from None
        dim = len(values)
        if dim < 2:
            raise MetricError("diag(...) needs at least two entries")
        if any(v == 0 for v in values):
            raise MetricError("diag(...) entries must be nonzero")
        signature = tuple(int(np.sign(v)) for v in values)
        comps = [[_zero_expr(dim) for _ in range(dim)] for _ in range(dim)]
        for i, v in enumerate(values):
            comps[i][i] = _expr_constant(v, dim)
        return MetricExpr(dim, signature, comps, name=name or "diag")

    try:
        data = _toml.loads(source)
    except _toml.TOMLDecodeError as exc:
        raise MetricError(f"metric config syntax error: {exc}") from None
    if "dim" not in data or "signature" not in data:
        raise MetricError("metric config must declare dim and signature")
    dim = int(data["dim"])
    signature = tuple(int(s) for s in data["signature"])
    if len(signature) != dim:
        raise MetricError(f"signature length {len(signature)} does not match dim {dim}")
    name = data.get("name", name)
    trust = float(data.get("trust_radius", 0.5))
    comps = [[None] * dim for _ in range(dim)]
    if "diag" in data:
        entries = data["diag"]
        if len(entries) != dim:
            raise MetricError("diag list length does not match dim")
        for i, src in enumerate(entries):
            comps[i][i] = parse_expression(str(src), dim)
    for key, value in data.items():
        if not (key.startswith("g") and len(key) == 3 and key[1:].isdigit()):
            continue
        i, j = int(key[1]), int(key[2])
        if i >= dim or j >= dim:
            raise MetricError(f"component {key} out of range for dim {dim}")
        expr = parse_expression(str(value), dim)
        if comps[i][j] is not None and comps[i][j] != expr:
            if not _exprs_agree(comps[i][j], expr, dim):
                raise MetricError(f"conflicting definitions for component g{i}{j}")
        comps[i][j] = expr
        if comps[j][i] is not None and comps[j][i] != expr:
            if not _exprs_agree(comps[j][i], expr, dim):
                raise MetricError(f"non-symmetric components g{i}{j} vs g{j}{i}")
        comps[j][i] = expr
    for i in range(dim):
        for j in range(dim):
            if comps[i][j] is None:
                comps[i][j] = _zero_expr(dim)
    metric = MetricExpr(dim, signature, comps, name=name, trust_radius=trust)
    return metric


def _exprs_agree(e1, e2, dim, samples=8, tol=1e-10):
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.7, 0.7, size=(dim, samples))
    v1 = np.broadcast_to(e1(pts), (samples,))
    v2 = np.broadcast_to(e2(pts), (samples,))
    return np.allclose(v1, v2, atol=tol, rtol=tol)


# ---------------------------------------------------------------------------
# metric zoo
# ---------------------------------------------------------------------------

_ZOO_SOURCES = {
    "minkowski2": 'dim = 2\nsignature = [1, -1]\nname = "minkowski2"\n'
                  'diag = ["1", "-1"]\ntrust_radius = 1.5\n',
    "minkowski4": 'dim = 4\nsignature = [1, -1, -1, -1]\nname = "minkowski4"\n'
                  'diag = ["1", "-1", "-1", "-1"]\ntrust_radius = 1.5\n',
    "euclidean2": 'dim = 2\nsignature = [1, 1]\nname = "euclidean2"\n'
                  'diag = ["1", "1"]\ntrust_radius = 1.5\n',
    "euclidean4": 'dim = 4\nsignature = [1, 1, 1, 1]\nname = "euclidean4"\n'
                  'diag = ["1", "1", "1", "1"]\ntrust_radius = 1.5\n',
    "desitter4": 'dim = 4\nsignature = [1, -1, -1, -1]\nname = "desitter4"\n'
                 'diag = ["1", "-exp(2*x0)", "-exp(2*x0)", "-exp(2*x0)"]\n'
                 'trust_radius = 0.45\n',
    "desitter2": 'dim = 2\nsignature = [1, -1]\nname = "desitter2"\n'
                 'diag = ["1", "-exp(2*x0)"]\ntrust_radius = 0.45\n',
    "sphere2": 'dim = 2\nsignature = [1, 1]\nname = "sphere2"\n'
               'diag = ["1", "sin(x0)^2"]\ntrust_radius = 0.9\n',
    "perturbed2": 'dim = 2\nsignature = [1, -1]\nname = "perturbed2"\n'
                  'g00 = "1 + 3/20 * bump(((x0 - 3/20)^2 + x1^2)/(2/5))"\n'
                  'g11 = "-1 + 1/10 * bump(((x0 - 3/20)^2 + (x1 - 1/10)^2)/(2/5))"\n'
                  'g01 = "1/20 * bump((x0^2 + x1^2)/(2/5))"\n'
                  'trust_radius = 0.8\n',
}

ZOO_NAMES = tuple(sorted(_ZOO_SOURCES))


def zoo_metric(name):
    """Built-in metrics: flat, de Sitter slab, round sphere, bump-perturbed."""
    if name not in _ZOO_SOURCES:
        raise MetricError(f"unknown zoo metric {name!r}; available: {ZOO_NAMES}")
    return parse_metric(_ZOO_SOURCES[name])


# sensible base points for zoo metrics (sphere chart degenerates at poles)
ZOO_BASE_POINTS = {
    "sphere2": (np.pi / 2, 0.0),
}


def zoo_base_point(metric):
    return np.asarray(ZOO_BASE_POINTS.get(metric.name, (0.0,) * metric.dim), dtype=float)


# ---------------------------------------------------------------------------
# curvature and the wave operator
# ---------------------------------------------------------------------------

def christoffel_arrays(g, dg, d2g=None, d3g=None):
    """Gamma, and optionally dGamma / d2Gamma, from metric derivative stacks.

    Index layout: Gamma[i,j,k] = Gamma^i_{jk}; dGamma[m,i,j,k] = d_m Gamma^i_{jk};
    d2Gamma[p,m,i,j,k] = d_p d_m Gamma^i_{jk}.  Batch axes trail.
    """
    gi = _inv(g)
    # low[l,j,k] = Gamma_{l,jk} = (d_j g_{lk} + d_k g_{lj} - d_l g_{jk}) / 2
    low = 0.5 * (np.einsum("jlk...->ljk...", dg) + np.einsum("klj...->ljk...", dg) - dg)
    Gamma = np.einsum("il...,ljk...->ijk...", gi, low)
    if d2g is None:
        return Gamma, gi
    dgi = -np.einsum("ia...,mab...,bj...->mij...", gi, dg, gi)
    dlow = 0.5 * (np.einsum("mjlk...->mljk...", d2g) + np.einsum("mklj...->mljk...", d2g)
                  - d2g)
    dGamma = (np.einsum("mil...,ljk...->mijk...", dgi, low)
              + np.einsum("il...,mljk...->mijk...", gi, dlow))
    if d3g is None:
        return Gamma, gi, dGamma
    d2gi = -(np.einsum("pia...,mab...,bj...->pmij...", dgi, dg, gi)
             + np.einsum("ia...,pmab...,bj...->pmij...", gi, d2g, gi)
             + np.einsum("ia...,mab...,pbj...->pmij...", gi, dg, dgi))
    d2low = 0.5 * (np.einsum("pmjlk...->pmljk...", d3g)
                   + np.einsum("pmklj...->pmljk...", d3g) - d3g)
    d2Gamma = (np.einsum("pmil...,ljk...->pmijk...", d2gi, low)
               + np.einsum("mil...,pljk...->pmijk...", dgi, dlow)
               + np.einsum("pil...,mljk...->pmijk...", dgi, dlow)
               + np.einsum("il...,pmljk...->pmijk...", gi, d2low))
    return Gamma, gi, dGamma, d2Gamma


def _inv(g):
    """Inverse of (n, n, ...) stacks of matrices."""
    moved = np.moveaxis(np.moveaxis(g, 0, -1), 0, -1)
    inv = np.linalg.inv(moved)
    return np.moveaxis(np.moveaxis(inv, -1, 0), -1, 0)


def curvature_at(metric, x):
    """Christoffel, Riemann, Ricci, scalar at a point (pinned conventions)."""
    x = np.asarray(x, dtype=float).reshape(metric.dim, 1)
    metric.check_point(x[:, 0])
    g, dg, d2g = metric.derivative_arrays(x, 2)
    g, dg, d2g = g[..., 0], dg[..., 0], d2g[..., 0]
    Gamma, gi, dGamma = christoffel_arrays(g, dg, d2g)
    # R^i_{jkl} = d_k Gamma^i_{lj} - d_l Gamma^i_{kj} + G^i_{km} G^m_{lj} - G^i_{lm} G^m_{kj}
    riemann = (np.einsum("kilj->ijkl", dGamma) - np.einsum("likj->ijkl", dGamma)
               + np.einsum("ikm,mlj->ijkl", Gamma, Gamma)
               - np.einsum("ilm,mkj->ijkl", Gamma, Gamma))
    ricci = np.einsum("ijil->jl", riemann)
    scalar = float(np.einsum("jl,jl->", gi, ricci))
    return CurvatureAtPoint(Gamma, riemann, ricci, scalar)


def wave_apply(metric, f, x):
    """(P f)(x) with P = |g|^{-1/2} d_j |g|^{1/2} g^{jk} d_k.

    ``f`` may be an expression string, a parsed Expression, or a callable
    that maps a list of coordinate jets to a jet.
    """
    x = np.asarray(x, dtype=float).reshape(metric.dim, 1)
    metric.check_point(x[:, 0])
    g, dg = metric.derivative_arrays(x, 1)
    g, dg = g[..., 0], dg[..., 0]
    gi = np.linalg.inv(g)
    dgi = -np.einsum("ia,mab,bj->mij", gi, dg, gi)
    # b^k = g^{jk} d_j log|g|^{1/2} = (1/2) g^{jk} tr(g^{-1} d_j g)
    tr = np.einsum("ab,jba->j", gi, dg)
    b = 0.5 * np.einsum("jk,j->k", gi, tr)
    if isinstance(f, str):
        f = parse_expression(f, metric.dim)
    fj = f(variable_jets(x, 2))
    grad = np.asarray(fj.gradient(), dtype=float).reshape(metric.dim)
    hess = np.asarray(fj.hessian(), dtype=float).reshape(metric.dim, metric.dim)
    val = (np.einsum("jk,jk->", gi, hess)
           + np.einsum("jjk->k", dgi) @ grad
           + b @ grad)
    return float(val)


# ---------------------------------------------------------------------------
# independent finite-difference oracle (used by tests and cmd_verify)
# ---------------------------------------------------------------------------

def scalar_curvature_fd(metric, x, step=1e-4):
    """Scalar curvature via central differences of g with one Richardson pass.

    Deliberately independent of the jet machinery: samples only
    ``metric.component_values``.
    """
    def scalar_with_step(h):
        n = metric.dim
        x0 = np.asarray(x, dtype=float)

        def gmat(p):
            return metric.component_values(p.reshape(n, 1))[..., 0]

        g = gmat(x0)
        dg = np.zeros((n, n, n))
        d2g = np.zeros((n, n, n, n))
        for k in range(n):
            e = np.zeros(n)
            e[k] = h
            dg[k] = (gmat(x0 + e) - gmat(x0 - e)) / (2 * h)
            d2g[k, k] = (gmat(x0 + e) - 2 * g + gmat(x0 - e)) / h ** 2
        for k in range(n):
            for l in range(k + 1, n):
                ek = np.zeros(n)
                el = np.zeros(n)
                ek[k] = h
                el[l] = h
                val = (gmat(x0 + ek + el) - gmat(x0 + ek - el)
                       - gmat(x0 - ek + el) + gmat(x0 - ek - el)) / (4 * h ** 2)
                d2g[k, l] = d2g[l, k] = val
        Gamma, gi, dGamma = christoffel_arrays(g, dg, d2g)
        riem = (np.einsum("kilj->ijkl", dGamma) - np.einsum("likj->ijkl", dGamma)
                + np.einsum("ikm,mlj->ijkl", Gamma, Gamma)
                - np.einsum("ilm,mkj->ijkl", Gamma, Gamma))
        ricci = np.einsum("ijil->jl", riem)
        return float(np.einsum("jl,jl->", gi, ricci))

    r1 = scalar_with_step(step)
    r2 = scalar_with_step(step / 2)
    return (4 * r2 - r1) / 3
