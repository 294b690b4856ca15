"""Sparse polynomial identification of terminal output dynamics.

Models have the form ``y_dot = Theta(y, u) @ Xi`` with ``Theta`` a polynomial
library over the stacked outputs and inputs. Terminal outputs are laid out
terminal-major as ``(x, y, theta)`` triples and the input is the held
terminal's world-frame twist.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_LAMBDA = 0.957
DEFAULT_THRESHOLD = 0.108


class SysIdError(ValueError):
    pass


class DimensionMismatch(SysIdError):
    pass


class MissingRigidTerms(SysIdError):
    pass


class DegenerateVariance(SysIdError):
    pass


class RankDeficient(UserWarning):
    """Some output dimension lost its whole support during thresholding."""


def output_names(n_terminals: int) -> list:
    return [f"t{i}_{c}" for i in range(n_terminals) for c in ("x", "y", "theta")]


INPUT_NAMES = ("u_vx", "u_vy", "u_omega")


@dataclass(frozen=True)
class PolyLibrary:
    """All monomials of total degree ``<= degree`` over the ``n_y + n_u`` variables.

    Terms are index tuples into the stacked variable vector ``[y, u]``; the
    empty tuple is the constant. Order: by degree, then lexicographic.
    """

    n_y: int
    n_u: int
    degree: int = 2
    names: tuple = None

    def __post_init__(self):
        if self.n_y < 0 or self.n_u < 0 or self.n_y + self.n_u == 0:
            raise DimensionMismatch("library needs at least one variable")
        if self.degree < 0:
            raise ValueError("degree must be non-negative")
        if self.names is None:
            ny = [f"y{i}" for i in range(self.n_y)]
            nu = [f"u{i}" for i in range(self.n_u)]
            object.__setattr__(self, "names", tuple(ny + nu))
        elif len(self.names) != self.n_y + self.n_u:
            raise DimensionMismatch("one name per variable expected")

    @classmethod
    def for_terminals(cls, n_terminals: int, degree: int = 2) -> "PolyLibrary":
        return cls(3 * n_terminals, 3, degree, tuple(output_names(n_terminals)) + INPUT_NAMES)

    @property
    def terms(self) -> tuple:
        cached = self.__dict__.get("_terms")
        if cached is None:
            n = self.n_y + self.n_u
            cached = tuple(t for d in range(self.degree + 1)
                           for t in itertools.combinations_with_replacement(range(n), d))
            object.__setattr__(self, "_terms", cached)
        return cached

    def __len__(self):
        return len(self.terms)

    def describe(self, term: tuple) -> str:
        if not term:
            return "1"
        parts = []
        for v, grp in itertools.groupby(term):
            k = len(list(grp))
            parts.append(self.names[v] if k == 1 else f"{self.names[v]}^{k}")
        return "*".join(parts)

    def descriptors(self) -> list:
        return [self.describe(t) for t in self.terms]

    def index(self, term) -> int:
        """Column of a monomial given as variable indices in any order; -1 if absent."""
        key = tuple(sorted(term))
        lookup = self.__dict__.get("_index")
        if lookup is None:
            lookup = {t: i for i, t in enumerate(self.terms)}
            object.__setattr__(self, "_index", lookup)
        return lookup.get(key, -1)


def build_features(y, u, library: PolyLibrary) -> np.ndarray:
    """Evaluate every library monomial; accepts single vectors or row-stacked batches."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    u2 = np.atleast_2d(u)
    if library.n_u == 0 and u.size == 0:
        u2 = np.zeros((y2.shape[0], 0))
    if y2.shape[1] != library.n_y or u2.shape[1] != library.n_u or y2.shape[0] != u2.shape[0]:
        raise DimensionMismatch(
            f"library expects y:{library.n_y}, u:{library.n_u}; got {y2.shape} and {u2.shape}")
    x = np.hstack([y2, u2])
    out = np.empty((x.shape[0], len(library)))
    for j, term in enumerate(library.terms):
        col = np.ones(x.shape[0])
        for v in term:
            col = col * x[:, v]
        out[:, j] = col
    return out[0] if single else out


@dataclass
class SparseModel:
    """Coefficients ``Xi`` (terms x outputs) in physical units.

    ``feature_scale`` and ``target_scale`` record the normalization used while
    thresholding; the threshold contract holds for ``Xi * feature_scale / target_scale``.
    """

    coefficients: np.ndarray
    library: PolyLibrary
    lam: float
    threshold: float
    feature_scale: np.ndarray = None
    target_scale: np.ndarray = None
    empty_dims: tuple = ()
    output_labels: tuple = None

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        n_terms, n_out = self.coefficients.shape
        if n_terms != len(self.library):
            raise DimensionMismatch("coefficient rows must match library terms")
        if self.feature_scale is None:
            self.feature_scale = np.ones(n_terms)
        if self.target_scale is None:
            self.target_scale = np.ones(n_out)
        if self.output_labels is None:
            self.output_labels = tuple(f"dy{i}" for i in range(n_out))

    @property
    def n_outputs(self) -> int:
        return self.coefficients.shape[1]

    @property
    def n_terms(self) -> int:
        return int(np.count_nonzero(self.coefficients))

    def normalized(self) -> np.ndarray:
        return self.coefficients * self.feature_scale[:, None] / self.target_scale[None, :]

    def predict(self, y, u) -> np.ndarray:
        return build_features(y, u, self.library) @ self.coefficients

    def support(self) -> np.ndarray:
        return self.coefficients != 0.0

    def equations(self, precision: int = 4) -> str:
        descs = self.library.descriptors()
        lines = []
        for d in range(self.n_outputs):
            terms = []
            for j in np.flatnonzero(self.coefficients[:, d]):
                c = self.coefficients[j, d]
                mono = "" if descs[j] == "1" else f" {descs[j]}"
                terms.append(f"{'-' if c < 0 else '+'} {abs(c):.{precision}g}{mono}")
            rhs = " ".join(terms) if terms else "0"
            if rhs.startswith("+ "):
                rhs = rhs[2:]
            lines.append(f"d({self.output_labels[d]})/dt = {rhs}")
        return "\n".join(lines)


def _ridge(theta: np.ndarray, target: np.ndarray, lam: float) -> np.ndarray:
    if theta.shape[1] == 0:
        return np.zeros(0)
    if lam > 0:
        a = np.vstack([theta, math.sqrt(lam) * np.eye(theta.shape[1])])
        b = np.concatenate([target, np.zeros(theta.shape[1])])
    else:
        a, b = theta, target
    return np.linalg.lstsq(a, b, rcond=None)[0]


def stlsq(features, targets, lam: float, threshold: float, max_iter: int = 50,
          library: PolyLibrary = None, warn: bool = True) -> SparseModel:
    """Sequentially thresholded ridge regression, run to a fixed point of the support."""
    theta = np.asarray(features, dtype=float)
    ydot = np.asarray(targets, dtype=float)
    if ydot.ndim == 1:
        ydot = ydot[:, None]
    if theta.ndim != 2 or theta.shape[0] != ydot.shape[0]:
        raise DimensionMismatch(f"features {theta.shape} and targets {ydot.shape} disagree")
    if theta.shape[0] < theta.shape[1]:
        raise DimensionMismatch("need at least as many samples as library terms")
    if lam < 0 or threshold < 0:
        raise ValueError("lambda and threshold must be non-negative")
    if library is None:
        library = PolyLibrary(theta.shape[1] - 1, 0, 1)
        if len(library) != theta.shape[1]:
            raise DimensionMismatch("pass the library for non-linear feature matrices")
    n_terms, n_out = theta.shape[1], ydot.shape[1]
    xi = np.zeros((n_terms, n_out))
    for d in range(n_out):
        support = np.ones(n_terms, dtype=bool)
        coef = np.zeros(n_terms)
        for _ in range(max_iter):
            coef = np.zeros(n_terms)
            coef[support] = _ridge(theta[:, support], ydot[:, d], lam)
            keep = np.abs(coef) >= threshold
            if np.array_equal(keep, support):
                break
            support = keep
        coef[np.abs(coef) < threshold] = 0.0
        xi[:, d] = coef
    empty = tuple(int(d) for d in range(n_out) if not xi[:, d].any() and np.any(ydot[:, d] != 0.0))
    if empty and warn:
        warnings.warn(f"output dimensions {empty} have an empty support; they are modeled as zero", RankDeficient)
    return SparseModel(xi, library, lam, threshold, empty_dims=empty)


def fit_normalized(y, u, ydot, library: PolyLibrary, lam: float = DEFAULT_LAMBDA,
                   threshold: float = DEFAULT_THRESHOLD, labels=None) -> SparseModel:
    """STLSQ on RMS-scaled features and targets, returned in physical units.

    Scaling without centering keeps every monomial's support unchanged.
    """
    theta = build_features(y, u, library)
    ydot = np.asarray(ydot, dtype=float)
    fs = np.sqrt(np.mean(theta ** 2, axis=0))
    fs[fs == 0.0] = 1.0
    ts = np.sqrt(np.mean(ydot ** 2, axis=0))
    ts[ts == 0.0] = 1.0
    norm = stlsq(theta / fs, ydot / ts, lam, threshold, library=library, warn=False)
    coef = norm.coefficients * ts[None, :] / fs[:, None]
    return SparseModel(coef, library, lam, threshold, fs, ts, norm.empty_dims,
                       tuple(labels) if labels is not None else None)


def _stack(trajectories):
    y = np.concatenate([t.y.reshape(len(t), -1) for t in trajectories])
    u = np.concatenate([t.u for t in trajectories])
    yd = np.concatenate([t.ydot.reshape(len(t), -1) for t in trajectories])
    return y, u, yd


def one_step_error(model: SparseModel, trajectories, dt: float) -> dict:
    """Mean translational and rotational error of ``y + dt * f(y, u)`` against the next sample."""
    trans, rot = [], []
    for t in trajectories:
        y = t.y.reshape(len(t), -1)
        pred = y[:-1] + dt * model.predict(y[:-1], t.u[:-1])
        err = (pred - y[1:]).reshape(len(t) - 1, -1, 3)
        trans.append(np.linalg.norm(err[..., :2], axis=-1).ravel())
        ang = np.arctan2(np.sin(err[..., 2]), np.cos(err[..., 2]))
        rot.append(np.abs(ang).ravel())
    trans = np.concatenate(trans)
    rot = np.concatenate(rot)
    return dict(trans_mean=float(trans.mean()), trans_std=float(trans.std()),
                rot_mean=float(rot.mean()), rot_std=float(rot.std()))


def fit_sindy(dataset, degree: int = 2, lam: float = DEFAULT_LAMBDA, threshold: float = DEFAULT_THRESHOLD,
              grid=(0.5, 1.0, 2.0), validation_fraction: float = 0.2, tolerance: float = 0.05):
    """Fit on a training split, choosing (lambda, T) from a small multiplicative grid.

    The sparsest grid point whose validation one-step error is within
    ``tolerance`` of the best is refit on all data. Returns ``(model, report)``.
    """
    trajs = list(dataset.trajectories)
    n_t = trajs[0].y.shape[1]
    dt = 1.0 / dataset.meta.get("F_c", 30)
    library = PolyLibrary.for_terminals(n_t, degree)
    labels = output_names(n_t)
    n_val = max(1, int(round(validation_fraction * len(trajs)))) if len(trajs) > 1 else 0
    train = trajs[:len(trajs) - n_val] if n_val else trajs
    val = trajs[len(trajs) - n_val:] if n_val else trajs
    y, u, yd = _stack(train)
    rows = []
    for gl in grid:
        for gt in grid:
            m = fit_normalized(y, u, yd, library, lam * gl, threshold * gt, labels)
            err = one_step_error(m, val, dt)
            rows.append(dict(lam=lam * gl, threshold=threshold * gt, n_terms=m.n_terms,
                             val_error=err["trans_mean"] + err["rot_mean"]))
    best = min(r["val_error"] for r in rows)
    ok = [r for r in rows if r["val_error"] <= best * (1.0 + tolerance)]
    choice = min(ok, key=lambda r: (r["n_terms"], r["val_error"], r["threshold"], r["lam"]))
    ya, ua, yda = _stack(trajs)
    model = fit_normalized(ya, ua, yda, library, choice["lam"], choice["threshold"], labels)
    if model.empty_dims:
        warnings.warn(f"output dimensions {model.empty_dims} have an empty support", RankDeficient)
    report = dict(grid=rows, chosen=choice, one_step=one_step_error(model, val, dt), n_terms=model.n_terms,
                  n_validation=n_val)
    return model, report


def rigid_terms(library: PolyLibrary, held: int) -> dict:
    """Monomial coefficients of the rigid-body prediction, per output dimension.

    Returns ``{dim: {term: coefficient}}`` using library variable indices.
    """
    if library.n_u != 3 or library.n_y % 3:
        raise MissingRigidTerms("rigid-body terms need terminal-pose outputs and a planar twist input")
    n_t = library.n_y // 3
    if not 0 <= held < n_t:
        raise MissingRigidTerms(f"held terminal {held} is not in the library")
    vx, vy, om = library.n_y, library.n_y + 1, library.n_y + 2
    hx, hy = 3 * held, 3 * held + 1
    out = {}
    for t in range(n_t):
        tx, ty = 3 * t, 3 * t + 1
        if t == held:
            out[3 * t] = {(vx,): 1.0}
            out[3 * t + 1] = {(vy,): 1.0}
        else:
            out[3 * t] = {(vx,): 1.0, tuple(sorted((hy, om))): 1.0, tuple(sorted((ty, om))): -1.0}
            out[3 * t + 1] = {(vy,): 1.0, tuple(sorted((tx, om))): 1.0, tuple(sorted((hx, om))): -1.0}
        out[3 * t + 2] = {(om,): 1.0}
    return out


def rigid_features(y, u, held: int) -> np.ndarray:
    """``f_rb(y, u)`` evaluated directly, one column per output dimension."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    n_t = y.shape[1] // 3
    p = y.reshape(-1, n_t, 3)
    out = np.empty_like(p)
    out[..., 0] = u[:, 0:1] + u[:, 2:3] * (p[:, held:held + 1, 1] - p[..., 1])
    out[..., 1] = u[:, 1:2] + u[:, 2:3] * (p[..., 0] - p[:, held:held + 1, 0])
    out[..., 2] = u[:, 2:3]
    return out.reshape(y.shape[0], -1)


@dataclass
class RigidDecomposition:
    gains: np.ndarray
    residual: SparseModel
    held: int

    @property
    def C(self) -> np.ndarray:
        return np.diag(self.gains)

    @property
    def positive(self) -> bool:
        return bool(np.all(self.gains > 0))

    def predict(self, y, u) -> np.ndarray:
        return rigid_features(y, u, self.held) * self.gains + self.residual.predict(y, u)


def decompose_rigid_residual(model: SparseModel, held: int = 0) -> RigidDecomposition:
    """Split each output into ``C_dd * f_rb,d`` plus a residual.

    ``C_dd`` is the least-squares match of the model's coefficients on the
    monomials of ``f_rb,d`` to their rigid-body values; whatever is left stays
    in the residual, so the split reconstructs the model exactly.
    """
    lib = model.library
    table = rigid_terms(lib, held)
    if model.n_outputs != lib.n_y:
        raise MissingRigidTerms("model outputs must be the terminal poses")
    gains = np.zeros(model.n_outputs)
    resid = model.coefficients.copy()
    for d, mono in table.items():
        cols, ref = [], []
        for term, a in mono.items():
            j = lib.index(term)
            if j < 0:
                raise MissingRigidTerms(f"library lacks {lib.describe(tuple(sorted(term)))}")
            cols.append(j)
            ref.append(a)
        ref = np.asarray(ref)
        c = float(ref @ model.coefficients[cols, d] / (ref @ ref))
        gains[d] = c
        orig = model.coefficients[cols, d]
        left = orig - c * ref
        # drop round-off left behind by an exact match
        left[np.abs(left) <= 8 * np.finfo(float).eps * np.maximum(np.abs(orig), np.abs(c * ref))] = 0.0
        resid[cols, d] = left
    residual = SparseModel(resid, lib, model.lam, model.threshold, model.feature_scale.copy(),
                           model.target_scale.copy(), model.empty_dims, model.output_labels)
    return RigidDecomposition(gains, residual, held)


def rigid_model(library: PolyLibrary, held: int = 0, scale=1.0) -> SparseModel:
    """Sparse model equal to ``scale * f_rb`` (scale may be per output)."""
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (library.n_y,))
    xi = np.zeros((len(library), library.n_y))
    for d, mono in rigid_terms(library, held).items():
        for term, a in mono.items():
            xi[library.index(term), d] = scale[d] * a
    return SparseModel(xi, library, 0.0, 0.0)


def r_squared(predictions, actuals) -> np.ndarray:
    p = np.asarray(predictions, dtype=float)
    a = np.asarray(actuals, dtype=float)
    if p.shape != a.shape:
        raise DimensionMismatch(f"shapes differ: {p.shape} vs {a.shape}")
    if a.shape[0] < 2:
        raise DegenerateVariance("need at least two samples")
    a2 = a.reshape(a.shape[0], -1)
    p2 = p.reshape(p.shape[0], -1)
    ss_tot = np.sum((a2 - a2.mean(axis=0)) ** 2, axis=0)
    if np.any(ss_tot <= 0.0):
        raise DegenerateVariance(f"constant actuals in dimensions {np.flatnonzero(ss_tot <= 0).tolist()}")
    ss_res = np.sum((a2 - p2) ** 2, axis=0)
    return (1.0 - ss_res / ss_tot).reshape(a.shape[1:])


def rigid_r_squared(dataset, held: int = 0) -> dict:
    """R^2 of ``f_rb`` against recorded ``y_dot``, averaged over free terminals per channel group."""
    y, u, yd = _stack(dataset.trajectories)
    pred = rigid_features(y, u, held)
    n_t = y.shape[1] // 3
    r2 = r_squared(pred.reshape(-1, n_t, 3)[:, [t for t in range(n_t) if t != held]],
                   yd.reshape(-1, n_t, 3)[:, [t for t in range(n_t) if t != held]])
    return dict(translational=float(r2[:, :2].mean()), rotational=float(r2[:, 2].mean()),
                per_terminal=r2.tolist())


def simulate_model(model, y0, u_series, dt: float) -> np.ndarray:
    """Forward-Euler rollout ``y <- y + dt * f(y, u)``; returns ``len(u_series) + 1`` rows."""
    y = np.asarray(y0, dtype=float).ravel().copy()
    u_series = np.atleast_2d(np.asarray(u_series, dtype=float))
    out = np.empty((u_series.shape[0] + 1, y.size))
    out[0] = y
    for k, u in enumerate(u_series):
        y = y + dt * np.asarray(model.predict(y, u)).ravel()
        out[k + 1] = y
    return out


def save_model(model: SparseModel, path) -> Path:
    """Tab-separated text: a header block, then ``output  monomial  coefficient`` rows."""
    path = Path(path)
    lib = model.library
    lines = [
        "# dlon sparse model v1",
        f"# degree\t{lib.degree}",
        f"# n_y\t{lib.n_y}",
        f"# n_u\t{lib.n_u}",
        f"# names\t{','.join(lib.names)}",
        f"# outputs\t{','.join(model.output_labels)}",
        f"# lambda\t{model.lam!r}",
        f"# threshold\t{model.threshold!r}",
        f"# feature_scale\t{','.join(repr(float(v)) for v in model.feature_scale)}",
        f"# target_scale\t{','.join(repr(float(v)) for v in model.target_scale)}",
    ]
    descs = lib.descriptors()
    for d in range(model.n_outputs):
        for j in np.flatnonzero(model.coefficients[:, d]):
            lines.append(f"{model.output_labels[d]}\t{descs[j]}\t{float(model.coefficients[j, d])!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_model(path) -> SparseModel:
    header, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].strip().split("\t")
            if len(parts) == 2:
                header[parts[0]] = parts[1]
            continue
        rows.append(line.split("\t"))
    try:
        lib = PolyLibrary(int(header["n_y"]), int(header["n_u"]), int(header["degree"]),
                          tuple(header["names"].split(",")))
        labels = tuple(header["outputs"].split(","))
    except KeyError as exc:
        raise SysIdError(f"model file is missing header field {exc}") from None
    descs = {s: j for j, s in enumerate(lib.descriptors())}
    out_idx = {s: d for d, s in enumerate(labels)}
    xi = np.zeros((len(lib), len(labels)))
    for out, mono, val in rows:
        if mono not in descs or out not in out_idx:
            raise DimensionMismatch(f"unknown term {out}:{mono}")
        xi[descs[mono], out_idx[out]] = float(val)
    fs = np.array([float(v) for v in header["feature_scale"].split(",")])
    ts = np.array([float(v) for v in header["target_scale"].split(",")])
    return SparseModel(xi, lib, float(header["lambda"]), float(header["threshold"]), fs, ts,
                       output_labels=labels)
