"""Slice diagnostics for hyperboloidal runs.

Everything here reduces to one trick: on the hyperbola chart
(s, chi) with t = s cosh(chi), r = s sinh(chi), both model fields stay
smooth on O(1) scales (the Klein-Gordon phase advances in s at the mass
frequency, the wave front is self-similar in chi), while in (t, r) the
same fields oscillate with frequency growing like t/s near the cone.
High derivative ladders are therefore tabulated as mixed
(d/ds)^p (d/dchi)^q values on per-node lattices and converted to
Cartesian d_t^i d_r^k and boost combinations by exact chain-rule
expansions whose coefficients are polynomials in
(cosh chi, sinh chi, 1/s).

Lattice values are point samples of the evolving fields, collected by a
QueryPool that watches the solver's level stream and answers each point
by tensor-product Lagrange interpolation, so no field history is ever
stored beyond a sliding window of levels.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .fields import EVEN
from .util import (FoliationError, SliceCoverageError, fd_weights,
                   lagrange_weights, reduce_sum, trapezoid_weights)


# === chain-rule expansions on the hyperbola chart ===

class CoeffPoly:
    """Polynomial in (cosh chi, sinh chi, 1/s).

    terms maps (a, b, k) -> coefficient of cosh^a sinh^b s^-k.  Closed
    under d/dchi and d/ds, which is what makes the operator expansions
    below exact.
    """

    __slots__ = ("terms",)

    def __init__(self, terms=None):
        self.terms = {key: c for key, c in (terms or {}).items() if c != 0.0}

    def add_into(self, other: "CoeffPoly"):
        for key, c in other.terms.items():
            self.terms[key] = self.terms.get(key, 0.0) + c
            if self.terms[key] == 0.0:
                del self.terms[key]

    def shifted(self, da: int, db: int, dk: int, scale: float = 1.0):
        return CoeffPoly({(a + da, b + db, k + dk): c * scale
                          for (a, b, k), c in self.terms.items()})

    def d_chi(self) -> "CoeffPoly":
        out = CoeffPoly()
        for (a, b, k), c in self.terms.items():
            if a:
                out.add_into(CoeffPoly({(a - 1, b + 1, k): a * c}))
            if b:
                out.add_into(CoeffPoly({(a + 1, b - 1, k): b * c}))
        return out

    def d_s(self) -> "CoeffPoly":
        return CoeffPoly({(a, b, k + 1): -k * c
                          for (a, b, k), c in self.terms.items() if k})

    def eval(self, ch, sh, zi):
        out = 0.0
        for (a, b, k), c in self.terms.items():
            out = out + c * ch ** a * sh ** b * zi ** k
        return out


def _apply_first_order(exp, f_s, f_chi):
    # distributes coeff * d_s + coeff * d_chi over an expansion,
    # picking up derivatives of the existing coefficients
    out = {}

    def put(key, poly):
        if key in out:
            out[key].add_into(poly)
        else:
            p = CoeffPoly()
            p.add_into(poly)
            out[key] = p

    for (p, q), f in exp.items():
        if f_s is not None:
            put((p, q), _poly_mul(f.d_s(), f_s))
            put((p + 1, q), _poly_mul(f, f_s))
        if f_chi is not None:
            put((p, q), _poly_mul(f.d_chi(), f_chi))
            put((p, q + 1), _poly_mul(f, f_chi))
    return {key: poly for key, poly in out.items() if poly.terms}


def _poly_mul(poly: CoeffPoly, mono) -> CoeffPoly:
    da, db, dk, scale = mono
    return poly.shifted(da, db, dk, scale)


# d_t = cosh d_s - (sinh/s) d_chi ; d_r = -sinh d_s + (cosh/s) d_chi
_DT = ((1, 0, 0, 1.0), (0, 1, 1, -1.0))
_DR = ((0, 1, 0, -1.0), (1, 0, 1, 1.0))


def apply_dt(exp):
    a = _apply_first_order(exp, _DT[0], None)
    b = _apply_first_order(exp, None, _DT[1])
    for key, poly in b.items():
        if key in a:
            a[key].add_into(poly)
        else:
            a[key] = poly
    return {key: poly for key, poly in a.items() if poly.terms}


def apply_dr(exp):
    a = _apply_first_order(exp, _DR[0], None)
    b = _apply_first_order(exp, None, _DR[1])
    for key, poly in b.items():
        if key in a:
            a[key].add_into(poly)
        else:
            a[key] = poly
    return {key: poly for key, poly in a.items() if poly.terms}


def apply_boost_op(exp):
    # the radial boost r d_t + t d_r collapses to d_chi at fixed s
    return _apply_first_order(exp, None, (0, 0, 0, 1.0))


@lru_cache(maxsize=None)
def combo_expansion(it: int, ir: int, j: int, outer: str = ""):
    """Expansion of d_t^it d_r^ir L^j (optionally with one more outer
    d_t or L) over the (d_s^p d_chi^q) derivative table.

    Returns {(p, q): CoeffPoly}; treat as immutable.
    """
    if outer == "t":
        return apply_dt(combo_expansion(it, ir, j))
    if outer == "chi":
        return apply_boost_op(combo_expansion(it, ir, j))
    if outer:
        raise ValueError(f"unknown outer derivative {outer!r}")
    if it:
        return apply_dt(combo_expansion(it - 1, ir, j))
    if ir:
        return apply_dr(combo_expansion(it, ir - 1, j))
    if j:
        return apply_boost_op(combo_expansion(0, 0, j - 1))
    return {(0, 0): CoeffPoly({(0, 0, 0): 1.0})}


@lru_cache(maxsize=None)
def _compiled_expansion(it, ir, j, outer=""):
    # flattened monomial arrays for vectorized contraction with tables
    P, Q, A, B, K, C = [], [], [], [], [], []
    for (p, q), poly in combo_expansion(it, ir, j, outer).items():
        for (a, b, k), c in poly.terms.items():
            P.append(p)
            Q.append(q)
            A.append(a)
            B.append(b)
            K.append(k)
            C.append(c)
    return (np.array(P), np.array(Q), np.array(A), np.array(B),
            np.array(K), np.array(C, dtype=float))


def eval_combo(comp, tables, CH, SH, ZI):
    """Contract a compiled expansion with (d_s, d_chi) tables.

    tables has shape (nodes, K+1, K+1); CH/SH are power tables of
    cosh/sinh over nodes, ZI the power vector of 1/s.
    """
    P, Q, A, B, K, C = comp
    sel = tables[:, P, Q]                                  # (nodes, M)
    w = (C * ZI[K])[None, :] * CH[A].T * SH[B].T
    return (sel * w).sum(axis=1)


def hierarchy_combos(order: int):
    """All (it, ir, j) with it + ir + j <= order."""
    out = []
    for total in range(order + 1):
        for j in range(total + 1):
            for it in range(total - j + 1):
                out.append((it, total - j - it, j))
    return out


def combo_label(field: str, it: int, ir: int, j: int) -> str:
    istr = "t" * it + "r" * ir
    return f"{field}.{istr or '-'}.L{j}"


# === grid-noise suppression ===
#
# Second order schemes shed short dispersive wavetrains (wavelength a
# few dx, group velocity near zero, never damped).  Harmless to the
# solution, fatal to high derivative estimates: each d/ds amplifies an
# additive ripple of amplitude rho by another 1/h.  The cure is a
# symmetric FIR kernel that reproduces polynomials up to `degree`
# exactly (so interpolation stencils keep their order) while minimizing
# the response energy on [cutoff, pi] where the ripple lives.

@lru_cache(maxsize=None)
def design_lowpass(halfwidth: int = 20, degree: int = 9,
                   cutoff: float = 1.4) -> np.ndarray:
    """Symmetric 2*halfwidth+1 tap kernel, least-squares stopband.

    Constrained minimum of int_cutoff^pi W(k)^2 dk with W the discrete
    transfer function, subject to sum w = 1 and vanishing even moments
    through `degree`.  Returned array runs j = -halfwidth..halfwidth.
    """
    M = int(halfwidth)
    kc = float(cutoff)
    if not 0.0 < kc < math.pi:
        raise ValueError("cutoff must lie in (0, pi)")
    npar = M + 1                      # one-sided coefficients w_0..w_M
    nmom = degree // 2                # even moments 2..2*nmom vanish

    def cosint(m: int) -> float:
        # int_kc^pi cos(m k) dk
        if m == 0:
            return math.pi - kc
        return -math.sin(m * kc) / m

    Q = np.empty((npar, npar))
    Q[0, 0] = cosint(0)
    for j in range(1, npar):
        Q[0, j] = Q[j, 0] = 2.0 * cosint(j)
        for l in range(1, j + 1):
            Q[j, l] = Q[l, j] = 2.0 * (cosint(j - l) + cosint(j + l))
    A = np.zeros((nmom + 1, npar))
    A[0, 0] = 1.0
    A[0, 1:] = 2.0
    scale = np.arange(1, npar, dtype=float) / M
    for p in range(1, nmom + 1):
        A[p, 1:] = 2.0 * scale ** (2 * p)   # rows scaled by M^2p
    b = np.zeros(nmom + 1)
    b[0] = 1.0
    kkt = np.block([[2.0 * Q, A.T],
                    [A, np.zeros((nmom + 1, nmom + 1))]])
    rhs = np.concatenate([np.zeros(npar), b])
    x = np.linalg.solve(kkt, rhs)[:npar]
    kern = np.concatenate([x[:0:-1], x])
    kern.setflags(write=False)
    return kern


def kernel_response(kern: np.ndarray, k) -> np.ndarray:
    """Transfer function of a symmetric kernel at wavenumber k (rad per
    sample)."""
    M = (len(kern) - 1) // 2
    j = np.arange(-M, M + 1)
    return np.cos(np.multiply.outer(np.asarray(k, dtype=float), j)) @ kern


def filter_level(values: np.ndarray, kern: np.ndarray,
                 parity: int = EVEN) -> np.ndarray:
    """Convolve one radial level with a symmetric kernel.

    The origin side folds with the field parity, the far side pads with
    zeros (fields are compactly supported inside the grid).
    """
    M = (len(kern) - 1) // 2
    ext = np.concatenate([float(parity) * values[M:0:-1], values,
                          np.zeros(M)])
    return np.convolve(ext, kern, mode="valid")


# === streaming point queries against a running evolution ===

class QueryPool:
    """Collects (t, r) point samples of the evolving fields.

    Register queries with add() before the run, attach on_level to the
    solver's observers, read answers afterwards.  Each point is
    answered by npts x npts Lagrange interpolation over consecutive
    levels and radial columns; the window goes one-sided at the first
    levels, and negative radii fold back with the field parity.

    level_filter (a design_lowpass kernel, or True for the default one)
    folds a grid-noise lowpass into the radial weights: answers are then
    samples of the filtered field, at the same polynomial order.
    """

    def __init__(self, grid, parity=None, npts: int = 10,
                 level_filter=None):
        self.grid = grid
        self.npts = int(npts)
        if level_filter is None:
            self.kernel = None
            self.halo = 0
        else:
            self.kernel = (design_lowpass() if level_filter is True
                           else np.asarray(level_filter, dtype=float))
            self.halo = (len(self.kernel) - 1) // 2
        self.parity = {"u": EVEN, "v": EVEN}
        if parity:
            self.parity.update(parity)
        self._pts = {"u": [], "v": []}
        self._count = {"u": 0, "v": 0}
        self.results = {}
        self._levels = {}
        self._plan = None
        self._by_target = None
        self._stash_targets = None
        self._t0 = None
        self._dt = None
        self.last_t = None

    def add(self, field: str, t, r):
        if self._plan is not None:
            raise FoliationError("query pool already streaming, cannot add")
        t = np.ravel(np.asarray(t, dtype=float)).copy()
        r = np.ravel(np.asarray(r, dtype=float)).copy()
        if t.shape != r.shape:
            raise ValueError("query t and r must have matching shapes")
        start = self._count[field]
        self._pts[field].append((t, r))
        self._count[field] += t.size
        return (field, start, t.size)

    def result(self, handle) -> np.ndarray:
        field, start, size = handle
        if field not in self.results:
            raise FoliationError("no levels streamed through the pool yet")
        return self.results[field][start:start + size]

    def unresolved(self) -> int:
        if not self.results:
            return sum(self._count.values())
        return int(sum(np.isnan(res).sum() for res in self.results.values()))

    def assert_resolved(self):
        bad = self.unresolved()
        if bad:
            needed = max((pts[0].max() for f in self._pts
                          for pts in self._pts[f] if pts[0].size), default=None)
            raise SliceCoverageError(
                f"{bad} point queries were never covered by the run",
                needed=needed, available=self.last_t)

    # -- streaming side --

    def on_level(self, t, step, u, v):
        self.last_t = t
        if self._t0 is None:
            self._t0 = t
        elif self._dt is None and step == 1:
            self._dt = t - self._t0
            self._start()
        fields = {"u": u, "v": v}
        if self._plan is None:
            # dt unknown until the second level; keep everything so far
            self._levels[step] = {f: w.copy() for f, w in fields.items()
                                  if w is not None}
            return
        if self._want_level(step):
            self._levels[step] = {}
            for f in self._plan:
                if fields[f] is None:
                    raise FoliationError(
                        f"queries registered for field {f!r} but the run "
                        "does not produce it")
                self._levels[step][f] = fields[f].copy()
        for key in [k for k in self._levels if k < step - self.npts]:
            del self._levels[key]
        batch = self._by_target.get(step)
        if batch:
            for field, idx in batch.items():
                self._eval_batch(field, idx, step)

    def _want_level(self, step: int) -> bool:
        i = np.searchsorted(self._stash_targets, step)
        return (i < len(self._stash_targets)
                and self._stash_targets[i] <= step + self.npts - 1)

    def _start(self):
        npts, dx, n = self.npts, self.grid.dx, self.grid.n
        lead = npts // 2 - 1
        self._plan = {}
        targets = []
        self._by_target = {}
        for field in ("u", "v"):
            if not self._count[field]:
                continue
            t = np.concatenate([p[0] for p in self._pts[field]])
            r = np.concatenate([p[1] for p in self._pts[field]])
            t_idx = (t - self._t0) / self._dt
            if t_idx.min() < -1e-9:
                raise SliceCoverageError(
                    "query before the first level",
                    needed=float(t.min()), available=self._t0)
            t_idx = np.maximum(t_idx, 0.0)
            base = np.maximum(np.floor(t_idx).astype(np.int64) - lead, 0)
            r_idx = r / dx
            j0 = np.floor(r_idx).astype(np.int64) - lead
            top = int(np.max(np.maximum(j0 + npts - 1 + self.halo,
                                        self.halo - j0), initial=0))
            if top > n - 1:
                raise SliceCoverageError(
                    "query columns leave the grid",
                    needed=top * dx, available=self.grid.r_max)
            target = base + npts - 1
            self._plan[field] = {"t_idx": t_idx, "r_idx": r_idx,
                                 "base": base, "j0": j0}
            self.results[field] = np.full(t.size, np.nan)
            targets.append(target)
            order = np.argsort(target, kind="stable")
            bounds = np.searchsorted(target[order],
                                     np.unique(target))
            uniq = np.unique(target)
            split = np.split(order, bounds[1:])
            for tg, idx in zip(uniq, split):
                self._by_target.setdefault(int(tg), {})[field] = idx
        if targets:
            self._stash_targets = np.unique(np.concatenate(targets))
        else:
            self._stash_targets = np.zeros(0, dtype=np.int64)
        # levels 0 and 1 were stashed blind; trim them to plan fields
        for step in list(self._levels):
            if not self._want_level(step):
                del self._levels[step]
                continue
            kept = {}
            for f in self._plan:
                if f not in self._levels[step]:
                    raise FoliationError(
                        f"queries registered for field {f!r} but the run "
                        "does not produce it")
                kept[f] = self._levels[step][f]
            self._levels[step] = kept

    def _eval_batch(self, field, idx, target):
        npts = self.npts
        plan = self._plan[field]
        k0 = target - npts + 1
        A = np.stack([self._levels[k][field] for k in range(k0, target + 1)])
        parity = float(self.parity[field])
        out = self.results[field]
        M = self.halo
        for lo in range(0, idx.size, 8192):
            sel = idx[lo:lo + 8192]
            frac_t = plan["t_idx"][sel] - (k0 + npts // 2 - 1)
            Wt = lagrange_weights(frac_t, npts)
            j0 = plan["j0"][sel]
            Wr = lagrange_weights(plan["r_idx"][sel] - (j0 + npts // 2 - 1),
                                  npts)
            if M:
                # convolving the weights == filtering the (extended)
                # level before sampling it
                wide = np.zeros((sel.size, npts + 2 * M))
                for i in range(npts):
                    wide[:, i:i + 2 * M + 1] += (Wr[:, i, None]
                                                 * self.kernel[None, :])
                Wr = wide
            cols = (j0 - M)[:, None] + np.arange(npts + 2 * M)
            sign = np.where(cols < 0, parity, 1.0)
            G = A[:, np.abs(cols)]
            out[sel] = np.einsum("bi,ibj,bj->b", Wt, G, Wr * sign,
                                 optimize=True)


# === derivative tables on one slice ===

class SliceDerivativeTable:
    """Mixed (d/ds)^p (d/dchi)^q derivatives of one field on the chi
    chart of a truncated hyperboloid.

    Every chart node gets its own (s, chi) lattice registered in the
    pool; tables() later applies Fornberg weights.  h_chi may vary per
    node so the caller can shrink it where the field develops short
    chi scales, and windows shift off-center instead of leaving the
    covered strip (s_floor below, chi_limit above).
    """

    def __init__(self, pool: QueryPool, field: str, s: float, chi,
                 max_order: int, h_s: float = 0.08, h_chi=0.1,
                 s_floor=None, chi_limit=None):
        chi = np.asarray(chi, dtype=float)
        self.field = field
        self.s = float(s)
        self.chi = chi
        self.order = int(max_order)
        K = self.order
        half = max((K + 2) // 2, 2) if K else 0
        m = 2 * half + 1
        h_chi = np.broadcast_to(np.asarray(h_chi, dtype=float), chi.shape)

        off_s = np.arange(m) - half
        if s_floor is not None and half:
            room = int(math.floor((s - s_floor) / h_s + 1e-12))
            if room < 0:
                raise SliceCoverageError(
                    f"slice s={s} sits below the covered strip",
                    needed=s, available=s_floor)
            off_s = off_s + max(half - room, 0)

        shift = np.zeros(chi.shape, dtype=np.int64)
        if chi_limit is not None and half:
            over = chi + half * h_chi - chi_limit
            shift = np.maximum(np.ceil(over / h_chi - 1e-12), 0).astype(
                np.int64)
        off_c = (np.arange(m) - half)[None, :] - shift[:, None]

        s_nodes = s + off_s * h_s
        chi_nodes = chi[:, None] + off_c * h_chi[:, None]
        t = s_nodes[None, :, None] * np.cosh(chi_nodes)[:, None, :]
        r = s_nodes[None, :, None] * np.sinh(chi_nodes)[:, None, :]
        self.t_peak = float(t.max())
        self.r_peak = float(np.abs(r).max())
        self._shape = (chi.size, m, m)
        self._handle = pool.add(field, t, r)
        self._pool = pool

        self._Ws = np.stack([fd_weights(p, tuple(off_s)) / h_s ** p
                             for p in range(K + 1)])
        Wc = np.empty((chi.size, K + 1, m))
        for i in range(chi.size):
            offs = tuple(int(o) for o in off_c[i])
            for q in range(K + 1):
                Wc[i, q] = fd_weights(q, offs) / h_chi[i] ** q
        self._Wc = Wc

    def tables(self) -> np.ndarray:
        """(nodes, K+1, K+1) array of d_s^p d_chi^q values.

        Only entries with p + q <= max_order carry the design accuracy.
        """
        vals = self._pool.result(self._handle)
        if np.isnan(vals).any():
            raise SliceCoverageError(
                f"slice s={self.s} lattice not fully resolved",
                needed=self.t_peak, available=self._pool.last_t)
        Q = vals.reshape(self._shape)
        return np.einsum("nab,pa,nqb->npq", Q, self._Ws, self._Wc,
                         optimize=True)


class SliceValueProbe:
    """Plain field values on the chi charts of several slices."""

    def __init__(self, pool: QueryPool, field: str, s_values,
                 cone_margin: float, chi_step: float = 0.02):
        self.field = field
        self.charts = {}
        self._handles = {}
        self._pool = pool
        for s in s_values:
            chi, chi_max = chart_nodes(s, cone_margin, chi_step)
            t = s * np.cosh(chi)
            r = s * np.sinh(chi)
            self.charts[float(s)] = {"chi": chi, "t": t, "r": r}
            self._handles[float(s)] = pool.add(field, t, r)

    def values(self, s: float) -> np.ndarray:
        vals = self._pool.result(self._handles[float(s)])
        if np.isnan(vals).any():
            raise SliceCoverageError(
                f"slice s={s} values not fully resolved",
                needed=float(self.charts[float(s)]["t"].max()),
                available=self._pool.last_t)
        return vals


def chart_nodes(s: float, cone_margin: float, chi_step: float):
    """Uniform chi nodes [0, chi_max] for the truncated slice."""
    c = 1.0 + cone_margin
    if s <= c:
        raise FoliationError(
            f"slice s={s} lies entirely inside the cone margin")
    t_wall = (s * s + c * c) / (2.0 * c)
    chi_max = math.acosh(t_wall / s)
    count = max(int(math.ceil(chi_max / chi_step)) + 1, 2)
    return np.linspace(0.0, chi_max, count), chi_max


# === the energy / sup-norm ladder ===

class SliceEnergySuite:
    """Ladder of slice energies E(s, d^I L^J w) streamed from one run.

    I runs over (d_t, d_r) pairs, L is the radial boost, and all
    combinations with |I| + |J| <= order are tabulated on every listed
    slice.  Attach on_level to the solver observers, then read
    energies() / stage_sups() once the run is past the last slice.
    """

    def __init__(self, grid, s_values, order: int = 0, mass: float = 1.0,
                 fields=("u", "v"), cone_margin=None, chi_step: float = 0.04,
                 h_s: float = 0.08, chi_scale: float = 0.35,
                 h_chi_u: float = 0.1, t_floor=None, npts: int = 10,
                 level_filter=None):
        margin = 2.0 * grid.dx if cone_margin is None else float(cone_margin)
        self.grid = grid
        self.order = int(order)
        self.mass = float(mass)
        self.fields = tuple(fields)
        self.s_values = [float(s) for s in s_values]
        self.pool = QueryPool(grid, npts=npts, level_filter=level_filter)
        self._tables = {}
        self._charts = {}
        self.t_max = 0.0
        for s in self.s_values:
            chi, chi_max = chart_nodes(s, margin, chi_step)
            self._charts[s] = chi
            for field in self.fields:
                if field == "v":
                    h_chi = np.minimum(0.1, chi_scale / np.cosh(chi))
                else:
                    # wave data with a sharp retarded profile compresses
                    # in chi; callers shrink this to match their data
                    h_chi = np.full(chi.shape, h_chi_u)
                tab = SliceDerivativeTable(
                    self.pool, field, s, chi, self.order + 1, h_s=h_s,
                    h_chi=h_chi, s_floor=t_floor, chi_limit=chi_max)
                self._tables[(field, s)] = tab
                self.t_max = max(self.t_max, tab.t_peak)
                room = (grid.n - npts - self.pool.halo) * grid.dx
                if tab.r_peak > room:
                    raise SliceCoverageError(
                        f"slice s={s} lattice leaves the grid",
                        needed=tab.r_peak, available=room)
        self._values = None

    @classmethod
    def plan(cls, dx: float, s_values, order: int = 0, t0: float = 2.0,
             support_radius: float = 1.0, pad: float = 0.25, **kw):
        """Build the grid wide enough for the slices, then the suite.

        Returns (suite, grid, t_end) ready for evolve_model.
        """
        from .solver import grid_for_run
        margin = kw.get("cone_margin")
        if margin is None:
            margin = 2.0 * dx
        h_s = kw.get("h_s", 0.08)
        K = order + 1
        half = max((K + 2) // 2, 2)
        s_top = max(float(s) for s in s_values)
        _, chi_max = chart_nodes(s_top, margin, 1.0)
        t_need = (s_top + half * h_s) * math.cosh(chi_max) + pad
        grid = grid_for_run(dx, t0, t_need, support_radius=support_radius)
        suite = cls(grid, s_values, order=order, t_floor=t0, **kw)
        return suite, grid, t_need

    def on_level(self, t, step, u, v):
        self.pool.on_level(t, step, u, v)

    # -- consumers --

    def _ensure_values(self):
        if self._values is not None:
            return
        self.pool.assert_resolved()
        combos = hierarchy_combos(self.order)
        comps = {}
        for combo in combos:
            for outer in ("", "t", "chi"):
                comps[combo + (outer,)] = _compiled_expansion(*combo, outer)
        pmax = max(int(np.max(c[2], initial=0)) for c in comps.values())
        bmax = max(int(np.max(c[3], initial=0)) for c in comps.values())
        kmax = max(int(np.max(c[4], initial=0)) for c in comps.values())
        self._values = {}
        self._energies = []
        for s in self.s_values:
            chi = self._charts[s]
            ch, sh = np.cosh(chi), np.sinh(chi)
            CH = ch[None, :] ** np.arange(pmax + 1)[:, None]
            SH = sh[None, :] ** np.arange(bmax + 1)[:, None]
            ZI = (1.0 / s) ** np.arange(kmax + 1)
            dmu = 4.0 * math.pi * s ** 3 * trapezoid_weights(chi) * sh * sh * ch
            for field in self.fields:
                D = self._tables[(field, s)].tables()
                for (it, ir, j) in combos:
                    W = eval_combo(comps[(it, ir, j, "")], D, CH, SH, ZI)
                    Wt = eval_combo(comps[(it, ir, j, "t")], D, CH, SH, ZI)
                    Wl = eval_combo(comps[(it, ir, j, "chi")], D, CH, SH, ZI)
                    dens = (Wt / ch) ** 2 + (Wl / (s * ch)) ** 2
                    if field == "v":
                        dens = dens + (self.mass * W) ** 2
                    E = reduce_sum(dmu * dens, "tree")
                    self._values[(field, s, it, ir, j)] = W
                    self._energies.append(
                        {"field": field, "it": it, "ir": ir, "j": j,
                         "s": s, "value": float(E)})

    def energies(self):
        """Rows {field, it, ir, j, s, value} for every combo and slice."""
        self._ensure_values()
        return list(self._energies)

    def combo_values(self, field, s, it, ir, j) -> np.ndarray:
        self._ensure_values()
        return self._values[(field, float(s), it, ir, j)]

    def stage_sups(self, delta: float):
        """Weighted sup norms per bootstrap stage, one row per slice.

        Stages split each field into low (k <= order-4) and high order;
        wave stages weigh by t, Klein-Gordon stages by
        (t/s)^(1/2-7 delta) t^(3/2).
        """
        self._ensure_values()
        low_cut = self.order - 4
        pv = 0.5 - 7.0 * delta
        stages = [("u:low", "u", 0.0, 1.0, lambda k: k <= low_cut),
                  ("v:low", "v", pv, 1.5, lambda k: k <= low_cut),
                  ("u:high", "u", 0.0, 1.0, lambda k: k > low_cut),
                  ("v:high", "v", pv, 1.5, lambda k: k > low_cut)]
        rows = []
        for label, field, p, q, member in stages:
            if field not in self.fields:
                continue
            for s in self.s_values:
                chi = self._charts[s]
                t = s * np.cosh(chi)
                weight = (t / s) ** p * t ** q
                best = 0.0
                for (it, ir, j) in hierarchy_combos(self.order):
                    if not member(it + ir + j):
                        continue
                    W = self._values[(field, s, it, ir, j)]
                    best = max(best, float(np.max(weight * np.abs(W))))
                rows.append({"field": label, "p": p, "q": q, "s": s,
                             "value": best})
        return rows


# === decay tracking and power-law fits ===

class SupTracker:
    """Running sup |w| per level, for pointwise decay fits.

    Pointwise sups at late times drown in undamped grid ripple long
    before the signal does, so a level_filter kernel (True for the
    default design) is applied before taking the max when given.
    """

    def __init__(self, field: str = "v", stride: int = 1, grid=None,
                 level_filter=None, parity: int = EVEN):
        self.field = field
        self.stride = max(int(stride), 1)
        self.grid = grid
        if level_filter is None:
            self.kernel = None
        else:
            self.kernel = (design_lowpass() if level_filter is True
                           else np.asarray(level_filter, dtype=float))
        self.parity = parity
        self.t = []
        self.sup = []
        self.r_at = []

    def on_level(self, t, step, u, v):
        if step % self.stride:
            return
        w = u if self.field == "u" else v
        if w is None:
            raise FoliationError(
                f"sup tracker for field {self.field!r} got no data")
        if self.kernel is not None:
            w = filter_level(w, self.kernel, self.parity)
        i = int(np.argmax(np.abs(w)))
        self.t.append(float(t))
        self.sup.append(float(abs(w[i])))
        self.r_at.append(i * self.grid.dx if self.grid is not None else float(i))

    def series(self):
        return np.asarray(self.t), np.asarray(self.sup)


@dataclass
class PowerFit:
    exponent: float
    amplitude: float
    rms: float
    count: int
    span: float


def fit_power_law(x, y, tail: float | None = 10.0, min_points: int = 8,
                  min_span: float = 4.0) -> PowerFit:
    """Least-squares exponent of y ~ A x^p.

    tail=10 keeps only the last decade of x; the fit refuses to run on
    fewer than min_points samples or a span under min_span.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    x, y = x[keep], y[keep]
    if tail is not None and x.size:
        keep = x >= x.max() / tail
        x, y = x[keep], y[keep]
    if x.size < min_points:
        raise FoliationError(
            f"power-law fit needs at least {min_points} points, "
            f"got {x.size}")
    span = float(x.max() / x.min())
    if span < min_span:
        raise FoliationError(
            f"power-law fit span {span:.3g} is under {min_span:.3g}")
    lx, ly = np.log(x), np.log(y)
    M = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, *_ = np.linalg.lstsq(M, ly, rcond=None)
    resid = ly - M @ coef
    return PowerFit(exponent=float(coef[0]),
                    amplitude=float(math.exp(coef[1])),
                    rms=float(np.sqrt(np.mean(resid ** 2))),
                    count=int(x.size), span=span)


def hierarchy_target(field: str, k: int, delta: float, order: int,
                     low_band: int = 4) -> float:
    """Allowed growth exponent of E(s, combo)^(1/2) at combo order k.

    Low orders (k <= order - low_band) stay flat for the wave field and
    grow like k*delta for Klein-Gordon; the top orders pick up the
    extra half power on the Klein-Gordon side.
    """
    low = k <= order - low_band
    if field == "u":
        return 0.0 if low else k * delta
    return k * delta if low else 0.5 + k * delta


def hierarchy_check(energy_rows, delta: float, order: int,
                    slack: float = 0.05, tail: float | None = 10.0,
                    min_points: int = 8, min_span: float = 4.0):
    """Fit every combo's E^(1/2) growth and compare with its target.

    Returns a list of line dicts (line, k, target, fitted, width, pass)
    sorted by field and combo order.
    """
    groups = {}
    for row in energy_rows:
        key = (row["field"], row["it"], row["ir"], row["j"])
        groups.setdefault(key, []).append((row["s"], row["value"]))
    lines = []
    for (field, it, ir, j), pts in sorted(groups.items()):
        pts.sort()
        s_arr = np.array([p[0] for p in pts])
        e_arr = np.array([p[1] for p in pts])
        fit = fit_power_law(s_arr, np.sqrt(e_arr), tail=tail,
                            min_points=min_points, min_span=min_span)
        k = it + ir + j
        target = hierarchy_target(field, k, delta, order)
        lines.append({"line": combo_label(field, it, ir, j), "k": k,
                      "target": target, "fitted": fit.exponent,
                      "width": fit.rms,
                      "pass": bool(fit.exponent <= target + slack)})
    return lines


# === Sobolev constant on truncated slices ===

@dataclass
class ChiProfile:
    """Radial slice profile psi(chi) with two derivatives in hand."""
    psi: object
    dpsi: object
    ddpsi: object
    label: str = ""


def gaussian_profile(width: float, amp: float = 1.0,
                     label: str = "") -> ChiProfile:
    w2 = float(width) ** 2

    def psi(chi):
        return amp * np.exp(-np.square(chi) / w2)

    def dpsi(chi):
        return -2.0 * chi / w2 * psi(chi)

    def ddpsi(chi):
        return (4.0 * np.square(chi) / (w2 * w2) - 2.0 / w2) * psi(chi)

    return ChiProfile(psi, dpsi, ddpsi, label or f"w={width:.4g}")


def profile_family(count: int = 10, base: float = 0.45,
                   spread: float = 0.2):
    """Shape-stable family: one Gaussian bell at several widths."""
    widths = base * (1.0 + spread * np.linspace(-1.0, 1.0, count))
    return [gaussian_profile(float(w)) for w in widths]


def shrinking_profile(s: float, base: float = 0.45,
                      s_ref: float = 2.0) -> ChiProfile:
    # concentrating width ~ s^(-1/2); breaks the uniform ratio on purpose
    return gaussian_profile(base * math.sqrt(s_ref / s),
                            label=f"shrink@s={s:.3g}")


def sobolev_ratio_profile(prof: ChiProfile, s: float,
                          cone_margin: float = 0.0,
                          n_quad: int = 4000) -> float:
    """sup t^(3/2)|u| over the truncated slice divided by the summed
    L^2 norms of u and its boosts up to second order, for the radial
    field u = psi(chi) on H_s.

    Works entirely from the angular reduction: L_a u = omega_a psi',
    L_b L_a u = omega_a omega_b A + delta_ab B with
    A = psi'' - coth(chi) psi' and B = coth(chi) psi'.
    """
    c = 1.0 + cone_margin
    if s <= c:
        raise FoliationError(f"slice s={s} inside the cone margin")
    chi_max = math.acosh((s * s + c * c) / (2.0 * c * s))
    # midpoint nodes dodge the coth singularity at the axis
    h = chi_max / n_quad
    chi = (np.arange(n_quad) + 0.5) * h
    ps = prof.psi(chi)
    dp = prof.dpsi(chi)
    ct = 1.0 / np.tanh(chi)
    A = prof.ddpsi(chi) - ct * dp
    B = ct * dp
    sh, ch = np.sinh(chi), np.cosh(chi)
    w = h * sh * sh * ch
    I2 = float(np.sum(ps * ps * w))
    I1 = float(np.sum(dp * dp * w))
    IA = float(np.sum(A * A * w))
    IAB = float(np.sum(A * B * w))
    IB = float(np.sum(B * B * w))
    s3 = s ** 3
    pi = math.pi
    denom = (math.sqrt(4.0 * pi * s3 * I2)
             + 3.0 * math.sqrt(4.0 * pi / 3.0 * s3 * I1)
             + 6.0 * math.sqrt(4.0 * pi / 15.0 * s3 * IA)
             + 3.0 * math.sqrt(s3 * (4.0 * pi / 5.0 * IA
                                     + 8.0 * pi / 3.0 * IAB
                                     + 4.0 * pi * IB)))
    peak = max(float(np.max(ch ** 1.5 * np.abs(ps))),
               float(abs(prof.psi(np.zeros(1))[0])))
    return s ** 1.5 * peak / denom


def sobolev_family_spread(profiles, s_values, cone_margin: float = 0.0):
    """Ratio table over (profile, s) plus its max/min spread."""
    table = [[sobolev_ratio_profile(p, s, cone_margin) for s in s_values]
             for p in profiles]
    flat = np.asarray(table)
    return {"table": table,
            "min": float(flat.min()),
            "max": float(flat.max()),
            "spread": float(flat.max() / flat.min())}


def sobolev_ratio_history(h, s: float, cone_margin=None) -> float:
    """The same ratio measured directly on a 3D field history.

    Boosts come from the history operators, norms from box slice
    quadrature; used to cross-check the angular reduction.
    """
    from .geometry import apply_boost, interpolate_to_slice, make_chart
    chart = make_chart(h.grid, s, cone_margin)
    t = np.sqrt(s * s + np.sum(chart.x ** 2, axis=1))

    def norm(hist):
        smp = interpolate_to_slice(hist, s, cone_margin, chart=chart)
        return math.sqrt(float(np.sum(smp.value ** 2)) * chart.cell_volume)

    base = interpolate_to_slice(h, s, cone_margin, chart=chart)
    num = float(np.max(t ** 1.5 * np.abs(base.value)))
    denom = norm(h)
    boosts = [apply_boost(h, a) for a in range(3)]
    for b in boosts:
        denom += norm(b)
    for b in boosts:
        for a in range(3):
            denom += norm(apply_boost(b, a))
    return num / denom


# === deterministic table output ===

def format_number(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def write_csv(path, header, rows):
    """Comma-separated table with LF endings and %.17g floats."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for cell in row:
            text = cell if isinstance(cell, str) else format_number(cell)
            if "," in text or "\n" in text:
                raise ValueError(f"cell {text!r} would corrupt the table")
            cells.append(text)
        lines.append(",".join(cells))
    with open(path, "w", newline="") as f:
        f.write("\n".join(lines) + "\n")


def write_json(path, obj):
    with open(path, "w", newline="") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def energy_csv_rows(rows):
    out = []
    for row in rows:
        istr = "t" * row["it"] + "r" * row["ir"]
        out.append((row["field"], istr or "-", row["j"], row["s"],
                    row["value"]))
    return out


def supnorm_csv_rows(rows):
    return [(r["field"], r["p"], r["q"], r["s"], r["value"]) for r in rows]


def hierarchy_csv_rows(lines):
    return [(ln["line"], ln["target"], ln["fitted"], ln["width"],
             ln["pass"]) for ln in lines]
