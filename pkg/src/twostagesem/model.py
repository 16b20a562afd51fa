"""Declarative linear SEM specification and the parameter-vector layout.

A model is described by

    latent:    eta = alpha + B eta + Gamma z + zeta,      Var(zeta) = Psi
    indicator: y   = nu + Lambda eta + K z + eps,          Var(eps)  = Omega

conditionally on the covariates ``z``.  Each matrix entry is either fixed
or tied to a free parameter label; repeated labels express equality
constraints.  The flat parameter vector holds one value per distinct label
on the natural scale.  Variance labels are optimized on the log scale by
the fitting routines, which keeps ``Psi`` and ``Omega`` diagonals positive.
"""

from __future__ import annotations

import numbers
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import yaml

from .exceptions import IdentificationError, SpecError

MATRIX_NAMES = ("nu", "Lambda", "K", "alpha", "B", "Gamma", "Psi", "Omega")


@dataclass(frozen=True)
class Fixed:
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))


@dataclass(frozen=True)
class Free:
    label: str


def as_constraint(value, default_label: str) -> Fixed | Free:
    """Coerce a user value: number -> Fixed, str -> Free(label), None -> Free(auto)."""
    if isinstance(value, (Fixed, Free)):
        return value
    if value is None:
        return Free(default_label)
    if isinstance(value, bool):
        raise SpecError(f"boolean is not a valid constraint for {default_label!r}")
    if isinstance(value, numbers.Real):
        return Fixed(float(value))
    if isinstance(value, str):
        if value.strip() == "":
            raise SpecError(f"empty label for {default_label!r}")
        return Free(value)
    raise SpecError(f"cannot interpret {value!r} as a constraint for {default_label!r}")


class Matrices(NamedTuple):
    nu: np.ndarray
    Lambda: np.ndarray
    K: np.ndarray
    alpha: np.ndarray
    B: np.ndarray
    Gamma: np.ndarray
    Psi: np.ndarray
    Omega: np.ndarray


class ParamLayout:
    """Mapping between free labels and matrix positions.

    Attributes
    ----------
    labels : tuple of str
        Free parameter labels in vector order.
    slots : list of list of (matrix, row, col)
        All matrix positions filled by each label.  Symmetric off-diagonal
        entries of ``Psi``/``Omega`` appear once; the transpose is implied.
    is_variance : ndarray of bool
        True for labels that fill only diagonal entries of ``Psi``/``Omega``.
    """

    def __init__(self, labels, slots, is_variance, kinds):
        self.labels = tuple(labels)
        self.slots = slots
        self.is_variance = np.asarray(is_variance, dtype=bool)
        self.kinds = tuple(kinds)
        self.index = {lab: i for i, lab in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    def __repr__(self):
        return f"ParamLayout({list(self.labels)})"

    def to_unconstrained(self, theta: np.ndarray) -> np.ndarray:
        u = np.array(theta, dtype=float, copy=True)
        if np.any(u[self.is_variance] <= 0):
            raise SpecError("variance parameters must be positive")
        u[self.is_variance] = np.log(u[self.is_variance])
        return u

    def from_unconstrained(self, u: np.ndarray) -> np.ndarray:
        theta = np.array(u, dtype=float, copy=True)
        theta[self.is_variance] = np.exp(theta[self.is_variance])
        return theta

    def chain_factor(self, theta: np.ndarray) -> np.ndarray:
        """d theta / d u for the log-variance reparameterization."""
        out = np.ones(len(self))
        out[self.is_variance] = theta[self.is_variance]
        return out


@dataclass(frozen=True)
class ParamVector:
    """Flat free-parameter values (natural scale) bound to a layout."""

    values: np.ndarray
    layout: ParamLayout = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(self.layout),):
            raise SpecError(
                f"parameter vector has shape {values.shape}, layout expects ({len(self.layout)},)"
            )
        object.__setattr__(self, "values", values)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.layout.labels, self.values.tolist()))

    def __getitem__(self, label: str) -> float:
        return float(self.values[self.layout.index[label]])


def _tuplify(items) -> tuple:
    return tuple(tuple(x) if isinstance(x, list) else x for x in (items or ()))


@dataclass(frozen=True)
class SemSpec:
    """Linear SEM structure.

    Parameters
    ----------
    observed : sequence of str
        Indicator names, in data-column order for the likelihood.
    latents : sequence of str
    covariates : sequence of str
        Exogenous variables the model conditions on.
    loadings : sequence of (indicator, latent, constraint)
    regressions : sequence of (target, source, constraint)
        latent-on-latent (``B``), latent-on-covariate (``Gamma``) and
        indicator-on-covariate (``K``) paths.
    intercepts, variances : mapping name -> constraint
        Entries not listed are fixed at zero.
    covariances : sequence of (name_a, name_b, constraint)
        Off-diagonal residual covariances (indicator pairs or latent pairs).

    Constraints may be given as :class:`Fixed`/:class:`Free`, a number
    (fixed value), a string (free label) or ``None`` (free, auto-labelled).
    """

    observed: tuple
    latents: tuple
    covariates: tuple = ()
    loadings: tuple = ()
    regressions: tuple = ()
    intercepts: tuple = ()
    variances: tuple = ()
    covariances: tuple = ()

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("observed", tuple(self.observed))
        set_("latents", tuple(self.latents))
        set_("covariates", tuple(self.covariates))
        names = self.observed + self.latents + self.covariates
        if len(set(names)) != len(names):
            raise SpecError("variable names must be unique across observed/latents/covariates")
        if not self.observed:
            raise SpecError("at least one observed indicator is required")

        set_("loadings", tuple(
            (i, l, as_constraint(c, f"{i}~{l}")) for i, l, c in (_pad_path(e, "loadings") for e in _tuplify(self.loadings))
        ))
        set_("regressions", tuple(
            (t, s, as_constraint(c, f"{t}~{s}")) for t, s, c in (_pad_path(e, "regressions") for e in _tuplify(self.regressions))
        ))
        set_("intercepts", self._named(self.intercepts, lambda n: n))
        set_("variances", self._named(self.variances, lambda n: f"{n}~~{n}"))
        set_("covariances", tuple(
            (a, b, as_constraint(c, f"{a}~~{b}")) for a, b, c in (_pad_path(e, "covariances") for e in _tuplify(self.covariances))
        ))
        self._validate()
        self.layout  # noqa: B018 - build eagerly so label errors surface here
        problems = self.identification_problems()
        if problems:
            raise IdentificationError("; ".join(problems))

    @staticmethod
    def _named(entries, auto) -> tuple:
        if isinstance(entries, Mapping):
            entries = entries.items()
        return tuple((n, as_constraint(c, auto(n))) for n, c in _tuplify(entries))

    # ------------------------------------------------------------------ checks
    def _validate(self):
        obs, lat, cov = set(self.observed), set(self.latents), set(self.covariates)
        seen = set()
        for i, l, _ in self.loadings:
            if i not in obs or l not in lat:
                raise SpecError(f"loading {i}~{l}: indicator must be observed, source latent")
            if (i, l) in seen:
                raise SpecError(f"duplicate loading {i}~{l}")
            seen.add((i, l))
        for t, s, _ in self.regressions:
            if t in lat and s in lat:
                if t == s:
                    raise SpecError(f"latent {t} cannot regress on itself")
            elif t in lat and s in cov:
                pass
            elif t in obs and s in cov:
                pass
            else:
                raise SpecError(f"unsupported regression path {t}~{s}")
            if (t, s) in seen:
                raise SpecError(f"duplicate path {t}~{s}")
            seen.add((t, s))
        for group, what in ((self.intercepts, "intercept"), (self.variances, "variance")):
            names = [n for n, _ in group]
            if len(set(names)) != len(names):
                raise SpecError(f"duplicate {what} entries")
            for n in names:
                if n not in obs and n not in lat:
                    raise SpecError(f"{what} for unknown variable {n!r}")
        for a, b, _ in self.covariances:
            if a == b or not ({a, b} <= obs or {a, b} <= lat):
                raise SpecError(f"covariance {a}~~{b} must join two distinct indicators or latents")

    def identification_problems(self) -> list[str]:
        problems = []
        icpt = dict(self.intercepts)
        var = dict(self.variances)
        for l in self.latents:
            if self.reference_indicator(l) is not None:
                continue
            if isinstance(var.get(l, Fixed(0.0)), Fixed) and isinstance(icpt.get(l, Fixed(0.0)), Fixed):
                continue
            problems.append(
                f"latent {l!r} needs a reference indicator (loading 1, intercept 0) "
                "or fixed variance and intercept"
            )
        return problems

    def reference_indicator(self, latent: str) -> str | None:
        icpt = dict(self.intercepts)
        for i, l, c in self.loadings:
            if l == latent and isinstance(c, Fixed) and c.value == 1.0:
                ic = icpt.get(i, Fixed(0.0))
                if isinstance(ic, Fixed) and ic.value == 0.0:
                    return i
        return None

    # ------------------------------------------------------------------ layout
    @property
    def shape(self) -> tuple[int, int, int]:
        return len(self.observed), len(self.latents), len(self.covariates)

    def _entries(self):
        """Yield (matrix, row, col, constraint, is_diag_variance) for every entry."""
        oi = {n: k for k, n in enumerate(self.observed)}
        li = {n: k for k, n in enumerate(self.latents)}
        ci = {n: k for k, n in enumerate(self.covariates)}
        for i, l, c in self.loadings:
            yield "Lambda", oi[i], li[l], c, False
        for t, s, c in self.regressions:
            if t in li and s in li:
                yield "B", li[t], li[s], c, False
            elif t in li:
                yield "Gamma", li[t], ci[s], c, False
            else:
                yield "K", oi[t], ci[s], c, False
        for n, c in self.intercepts:
            yield ("nu", oi[n], 0, c, False) if n in oi else ("alpha", li[n], 0, c, False)
        for n, c in self.variances:
            yield ("Omega", oi[n], oi[n], c, True) if n in oi else ("Psi", li[n], li[n], c, True)
        for a, b, c in self.covariances:
            if a in oi:
                r, s = sorted((oi[a], oi[b]))
                yield "Omega", s, r, c, False
            else:
                r, s = sorted((li[a], li[b]))
                yield "Psi", s, r, c, False

    @cached_property
    def layout(self) -> ParamLayout:
        labels, slots, var_flags, kinds = [], {}, {}, {}
        for mat, r, c, con, is_var in self._entries():
            if not isinstance(con, Free):
                continue
            if con.label not in slots:
                labels.append(con.label)
                slots[con.label] = []
                var_flags[con.label] = is_var
                kinds[con.label] = mat
            elif var_flags[con.label] != is_var:
                raise SpecError(
                    f"label {con.label!r} is shared between a variance and a non-variance entry"
                )
            slots[con.label].append((mat, r, c))
        return ParamLayout(
            labels,
            [slots[lab] for lab in labels],
            [var_flags[lab] for lab in labels],
            [kinds[lab] for lab in labels],
        )

    @cached_property
    def _fixed_matrices(self) -> Matrices:
        p, q, r = self.shape
        mats = {
            "nu": np.zeros(p), "Lambda": np.zeros((p, q)), "K": np.zeros((p, r)),
            "alpha": np.zeros(q), "B": np.zeros((q, q)), "Gamma": np.zeros((q, r)),
            "Psi": np.zeros((q, q)), "Omega": np.zeros((p, p)),
        }
        for mat, row, col, con, _ in self._entries():
            if isinstance(con, Fixed):
                _assign(mats[mat], mat, row, col, con.value)
        return Matrices(**mats)

    @property
    def n_free(self) -> int:
        return len(self.layout)

    @property
    def psi_labels(self) -> tuple[str, ...]:
        """Labels that parameterize the latent residual covariance."""
        return tuple(l for l, k in zip(self.layout.labels, self.layout.kinds) if k == "Psi")

    # ----------------------------------------------------------------- helpers
    def param_vector(self, values) -> ParamVector:
        if isinstance(values, ParamVector):
            if values.layout.labels != self.layout.labels:
                raise SpecError("parameter vector layout does not match this spec")
            return values
        if isinstance(values, Mapping):
            missing = set(self.layout.labels) - set(values)
            if missing:
                raise SpecError(f"missing parameter values for {sorted(missing)}")
            values = [values[lab] for lab in self.layout.labels]
        return ParamVector(np.asarray(values, dtype=float), self.layout)

    def with_paths(self, regressions: Iterable = (), covariates: Sequence[str] = ()) -> "SemSpec":
        """Return a copy with extra covariates and regression paths appended."""
        covs = self.covariates + tuple(c for c in covariates if c not in self.covariates)
        return SemSpec(
            observed=self.observed, latents=self.latents, covariates=covs,
            loadings=self.loadings, regressions=self.regressions + tuple(regressions),
            intercepts=self.intercepts, variances=self.variances,
            covariances=self.covariances,
        )

    @classmethod
    def factor_model(
        cls,
        measurement: Mapping[str, Sequence[str]],
        regressions: Iterable = (),
        covariates: Sequence[str] = (),
        latent_covariances: bool = False,
    ) -> "SemSpec":
        """Build a spec with reference-indicator identification.

        The first indicator listed for each latent is the reference
        (loading 1, intercept 0); remaining loadings, indicator intercepts,
        latent intercepts and all residual variances are free.  With
        ``latent_covariances`` all latent residual covariances are free too
        (unstructured ``Psi``).

        Examples
        --------
        >>> spec = SemSpec.factor_model({"xi": ["x1", "x2", "x3"]},
        ...                             regressions=[("xi", "z")], covariates=["z"])
        >>> spec.layout.labels[:3]
        ('x2~xi', 'x3~xi', 'xi~z')
        """
        latents = tuple(measurement)
        observed = tuple(i for l in latents for i in measurement[l])
        loadings, intercepts = [], {}
        for l in latents:
            for k, i in enumerate(measurement[l]):
                loadings.append((i, l, 1.0 if k == 0 else None))
                intercepts[i] = 0.0 if k == 0 else None
        for l in latents:
            intercepts[l] = None
        regs = [tuple(r) + (None,) if len(r) == 2 else tuple(r) for r in regressions]
        variances = {n: None for n in observed + latents}
        cov = []
        if latent_covariances:
            cov = [(a, b, None) for k, a in enumerate(latents) for b in latents[k + 1:]]
        return cls(
            observed=observed, latents=latents, covariates=tuple(covariates),
            loadings=tuple(loadings), regressions=tuple(regs),
            intercepts=intercepts, variances=variances, covariances=tuple(cov),
        )

    # -------------------------------------------------------------- serialize
    def to_dict(self) -> dict:
        enc = lambda c: c.value if isinstance(c, Fixed) else c.label  # noqa: E731
        return {
            "observed": list(self.observed),
            "latents": list(self.latents),
            "covariates": list(self.covariates),
            "loadings": [[i, l, enc(c)] for i, l, c in self.loadings],
            "regressions": [[t, s, enc(c)] for t, s, c in self.regressions],
            "intercepts": {n: enc(c) for n, c in self.intercepts},
            "variances": {n: enc(c) for n, c in self.variances},
            "covariances": [[a, b, enc(c)] for a, b, c in self.covariances],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SemSpec":
        known = {"observed", "latents", "covariates", "loadings", "regressions",
                 "intercepts", "variances", "covariances"}
        unknown = set(doc) - known
        if unknown:
            raise SpecError(f"unknown model spec keys: {sorted(unknown)}")
        for key in ("observed", "latents"):
            if key not in doc:
                raise SpecError(f"model spec is missing {key!r}")
        kw = {k: doc[k] for k in known if k in doc and doc[k] is not None}
        for k in ("loadings", "regressions", "covariances"):
            if k in kw:
                kw[k] = [_pad_path(p, k) for p in kw[k]]
        return cls(**kw)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "SemSpec":
        doc = yaml.safe_load(text)
        if not isinstance(doc, Mapping):
            raise SpecError("model spec document must be a mapping")
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "SemSpec":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _pad_path(entry, key):
    entry = list(entry)
    if len(entry) == 2:
        entry.append(None)
    if len(entry) != 3:
        raise SpecError(f"{key} entries must be [a, b] or [a, b, constraint], got {entry!r}")
    return tuple(entry)


def _assign(arr, mat, row, col, value):
    if arr.ndim == 1:
        arr[row] = value
    else:
        arr[row, col] = value
        if mat in ("Psi", "Omega"):
            arr[col, row] = value


def build_matrices(spec: SemSpec, theta) -> Matrices:
    """Fill the model matrices from a natural-scale parameter vector."""
    theta = spec.param_vector(theta).values
    base = spec._fixed_matrices
    mats = {name: getattr(base, name).copy() for name in MATRIX_NAMES}
    for value, slots in zip(theta, spec.layout.slots):
        for mat, row, col in slots:
            _assign(mats[mat], mat, row, col, value)
    return Matrices(**mats)


def pack(spec: SemSpec, matrices: Matrices) -> ParamVector:
    """Read free entries back out of filled matrices (inverse of build_matrices)."""
    values = np.empty(spec.n_free)
    for j, slots in enumerate(spec.layout.slots):
        mat, row, col = slots[0]
        arr = getattr(matrices, mat)
        values[j] = arr[row] if arr.ndim == 1 else arr[row, col]
    return ParamVector(values, spec.layout)


def unpack(spec: SemSpec, theta) -> Matrices:
    return build_matrices(spec, theta)


def derivative_slots(spec: SemSpec):
    """Per free parameter, the unit-derivative positions (matrix, row, col)."""
    return spec.layout.slots
