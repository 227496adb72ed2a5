"""Grouped OLS with robust standard errors and LMG relative-importance shares.

The two model cores follow the scikit-learn estimator protocol (``fit``,
fitted attributes with trailing underscores, ``get_params``) so they compose
with the wider ecosystem; the design-matrix assembly stays a plain function
over the pipeline's tables.
"""

from __future__ import annotations

import logging
import math
import warnings

import numpy as np
import pandas as pd
import scipy.linalg
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .validation import ParameterError

log = logging.getLogger(__name__)

MAX_LMG_GROUPS = 8


def _as_matrix(X):
    if isinstance(X, pd.DataFrame):
        return X.to_numpy(dtype=float), list(X.columns)
    arr = np.asarray(X, dtype=float)
    return arr, [f"x{j}" for j in range(arr.shape[1])]


def r_squared(X, y) -> float:
    """Plain least-squares R^2, tolerant of collinear columns (min-norm fit)."""
    y = np.asarray(y, dtype=float)
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0.0:
        return 0.0
    if X.shape[1] == 0:
        return 0.0
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    ssr = float(((y - X @ beta) ** 2).sum())
    return 1.0 - ssr / sst


class RobustOLS(BaseEstimator):
    """Ordinary least squares via pivoted QR with HC1 robust standard errors.

    Columns are rescaled internally for conditioning; reported coefficients
    and standard errors are on the original scale. The design matrix is taken
    as given (add your own constant column).

    Parameters
    ----------
    robust : bool
        HC1 heteroskedasticity-consistent standard errors when True,
        classical homoskedastic ones otherwise.

    Attributes
    ----------
    coef_ : ndarray of shape (p,)
    bse_ : ndarray of shape (p,)
        Standard errors of the coefficients.
    rsquared_ : float
    residuals_ : ndarray of shape (n,)
    column_names_ : list of str
    """

    def __init__(self, robust: bool = True):
        self.robust = robust

    def fit(self, X, y):
        M, names = _as_matrix(X)
        y = np.asarray(y, dtype=float)
        n, p = M.shape
        if n <= p:
            raise ParameterError(f"need n > p, got n={n}, p={p}")
        scale = np.linalg.norm(M, axis=0)
        scale[scale == 0] = 1.0
        Ms = M / scale

        q_mat, r_mat, piv = scipy.linalg.qr(Ms, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r_mat))
        tol = diag[0] * max(n, p) * np.finfo(float).eps if diag.size else 0.0
        rank = int((diag > tol).sum())
        if rank < p:
            dependent = [names[j] for j in piv[rank:]]
            raise ParameterError(f"design matrix is rank deficient; dependent columns: {dependent}")

        qty = q_mat.T @ y
        beta_pivoted = scipy.linalg.solve_triangular(r_mat, qty)
        beta_s = np.empty(p)
        beta_s[piv] = beta_pivoted
        resid = y - Ms @ beta_s

        # (X'X)^-1 from the pivoted R factor
        r_inv = scipy.linalg.solve_triangular(r_mat, np.eye(p))
        xtx_inv_pivoted = r_inv @ r_inv.T
        xtx_inv = np.empty((p, p))
        xtx_inv[np.ix_(piv, piv)] = xtx_inv_pivoted

        if self.robust:
            meat = (Ms.T * resid**2) @ Ms
            cov = xtx_inv @ meat @ xtx_inv * (n / (n - p))
        else:
            sigma2 = float(resid @ resid) / (n - p)
            cov = xtx_inv * sigma2

        self.coef_ = beta_s / scale
        self.bse_ = np.sqrt(np.diag(cov)) / scale
        self.residuals_ = resid
        sst = float(((y - y.mean()) ** 2).sum())
        self.rsquared_ = 1.0 - float(resid @ resid) / sst if sst > 0 else 0.0
        self.column_names_ = names
        self.n_obs_ = n
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        M, _ = _as_matrix(X)
        return M @ self.coef_

    def summary_frame(self) -> pd.DataFrame:
        check_is_fitted(self, "coef_")
        z = np.divide(self.coef_, self.bse_, out=np.zeros_like(self.coef_), where=self.bse_ > 0)
        return pd.DataFrame(
            {"term": self.column_names_, "coef": self.coef_, "robust_se": self.bse_, "z": z}
        )


class LmgDecomposition(BaseEstimator):
    """LMG decomposition of R^2 over named column groups.

    Caches R^2 for all 2^g group subsets and combines them with analytic
    Shapley weights; identical to averaging incremental R^2 over all g!
    orderings. A constant column named in `always_include` is part of every
    subset fit (and of the empty model, whose R^2 is 0).

    Parameters
    ----------
    groups : mapping of str -> list
        Group name to the column names (DataFrame input) or indices (array
        input) it contains. At most 8 groups (exact enumeration regime).
    always_include : sequence
        Columns present in every subset model, e.g. ("const",).
    robust : bool
        Passed to the full-model coefficient fit.

    Attributes
    ----------
    shares_ : dict of str -> float
        Absolute share of R^2 per group; sums to `rsquared_`.
    normalized_shares_ : dict of str -> float
        Shares rescaled to sum to 1.
    rsquared_ : float
    coef_frame_ : DataFrame or None
        Full-model coefficients with robust SEs; None when the full design
        is collinear (shares are still well defined).
    """

    def __init__(self, groups, always_include=("const",), robust: bool = True):
        self.groups = groups
        self.always_include = always_include
        self.robust = robust

    def fit(self, X, y):
        groups = dict(self.groups)
        g = len(groups)
        if g == 0:
            raise ParameterError("at least one group is required")
        if g > MAX_LMG_GROUPS:
            raise ParameterError(f"at most {MAX_LMG_GROUPS} groups supported, got {g}")
        M, names = _as_matrix(X)
        y = np.asarray(y, dtype=float)
        col_of = {name: j for j, name in enumerate(names)}

        def cols_for(members):
            idx = []
            for m in members:
                idx.append(col_of[m] if isinstance(m, str) else int(m))
            return idx

        base_cols = cols_for(self.always_include) if self.always_include else []
        group_names = list(groups)
        group_cols = [cols_for(groups[name]) for name in group_names]

        r2 = np.empty(1 << g)
        for mask in range(1 << g):
            cols = list(base_cols)
            for b in range(g):
                if mask >> b & 1:
                    cols.extend(group_cols[b])
            r2[mask] = r_squared(M[:, cols], y) if cols else 0.0

        fact = [math.factorial(i) for i in range(g + 1)]
        shares = np.zeros(g)
        for b in range(g):
            bit = 1 << b
            for mask in range(1 << g):
                if mask & bit:
                    continue
                a = bin(mask).count("1")
                weight = fact[a] * fact[g - a - 1] / fact[g]
                shares[b] += weight * (r2[mask | bit] - r2[mask])

        self.rsquared_ = float(r2[(1 << g) - 1])
        self.shares_ = {name: float(s) for name, s in zip(group_names, shares)}
        total = shares.sum()
        self.normalized_shares_ = {
            name: float(s / total) if total > 0 else float("nan")
            for name, s in zip(group_names, shares)
        }
        try:
            full = RobustOLS(robust=self.robust).fit(X, y)
            self.coef_frame_ = full.summary_frame()
        except ParameterError as exc:
            log.warning("full-model coefficients unavailable: %s", exc)
            self.coef_frame_ = None
        return self


# --- design matrix -----------------------------------------------------------

GENDER_BASELINE = "female"
WORK_BASELINE = "full_time"


def _aliased_columns(X: pd.DataFrame, protect=()) -> list:
    """Columns a pivoted-QR rank probe marks linearly dependent, never the
    protected ones; iterates until the remainder is full rank."""
    aliased: list = []
    cols = list(X.columns)
    while True:
        M = X[cols].to_numpy(dtype=float)
        scale = np.linalg.norm(M, axis=0)
        scale[scale == 0] = 1.0
        _, r_mat, piv = scipy.linalg.qr(M / scale, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r_mat))
        tol = diag[0] * max(M.shape) * np.finfo(float).eps if diag.size else 0.0
        rank = int((diag > tol).sum())
        if rank == len(cols):
            return aliased
        offenders = [cols[j] for j in piv[rank:] if cols[j] not in protect]
        if not offenders:
            return aliased
        aliased.extend(offenders)
        cols = [c for c in cols if c not in offenders]


def build_design_matrix(
    persons: pd.DataFrame,
    mixing_frame: pd.DataFrame,
    grouping_assignment: pd.Series,
    caregiver: pd.Series,
    access: pd.DataFrame,
    exposure_pd: pd.DataFrame,
    exposure_ph: pd.DataFrame,
    legs: pd.DataFrame,
    k: int = 4,
):
    """Assemble the five-variable-group regression design for the mixing outcome.

    Groups: S (sociodemographics incl. accessibility), H (hub distances),
    PD / PH (exposure vectors), M (mode fractions). Returns
    (X DataFrame incl. const, y Series, groups dict, report dict). Zero
    variance columns are dropped with a warning; join losses are counted.
    """
    base = mixing_frame[["person_id", "dm"]].merge(persons, on="person_id", how="inner")
    n_start = len(mixing_frame)
    base["income_group"] = base["person_id"].map(grouping_assignment)
    base["caregiver"] = base["person_id"].map(caregiver).fillna(False).astype(float)
    base = base.merge(access, on="person_id", how="inner")
    base = base.merge(exposure_pd, on="person_id", how="inner")
    base = base.merge(exposure_ph, on="person_id", how="inner")
    base = base.loc[base["income_group"].notna()]

    mode_counts = (
        legs.assign(
            is_pt=(legs["mode"] == "public_transit").astype(float),
            is_car=(legs["mode"] == "private_car").astype(float),
        )
        .groupby("person_id")
        .agg(n=("mode", "size"), pt=("is_pt", "sum"), car=("is_car", "sum"))
    )
    frac_pt = (mode_counts["pt"] / mode_counts["n"]).rename("frac_public_transit")
    frac_car = (mode_counts["car"] / mode_counts["n"]).rename("frac_private_car")
    base["frac_public_transit"] = base["person_id"].map(frac_pt).fillna(0.0)
    base["frac_private_car"] = base["person_id"].map(frac_car).fillna(0.0)
    base = base.reset_index(drop=True)

    X = pd.DataFrame(index=base.index)
    groups: dict[str, list] = {"S": [], "H": [], "PD": [], "PH": [], "M": []}

    for q in range(1, k):
        col = f"income_g{q}"
        X[col] = (base["income_group"] == q).astype(float)
        groups["S"].append(col)
    X["age"] = base["age"].astype(float)
    groups["S"].append("age")
    for gender in ("male", "other"):
        col = f"gender_{gender}"
        X[col] = (base["gender"] == gender).astype(float)
        groups["S"].append(col)
    X["caregiver"] = base["caregiver"]
    groups["S"].append("caregiver")
    for status in ("part_time", "student", "homemaker", "retired", "unemployed", "other"):
        col = f"work_{status}"
        X[col] = (base["work_status"] == status).astype(float)
        groups["S"].append(col)
    X["car_ownership"] = base.get("car_ownership", pd.Series(0.0, index=base.index)).astype(float)
    groups["S"].append("car_ownership")
    for col in ("train_access", "bus_access"):
        X[col] = base[col].astype(float)
        groups["S"].append(col)

    for col in ("hub_dist_mono_km", "hub_dist_poly_km"):
        X[col] = base[col].astype(float)
        groups["H"].append(col)

    for col in exposure_pd.columns:
        if col != "person_id":
            X[col] = base[col].astype(float)
            groups["PD"].append(col)
    for col in exposure_ph.columns:
        if col != "person_id":
            X[col] = base[col].astype(float)
            groups["PH"].append(col)

    for col in ("frac_public_transit", "frac_private_car"):
        X[col] = base[col]
        groups["M"].append(col)

    dropped = [c for c in X.columns if X[c].nunique() <= 1]
    if dropped:
        warnings.warn(f"dropping zero-variance columns: {dropped}", stacklevel=2)
        X = X.drop(columns=dropped)
    dup_mask = X.T.duplicated()
    duplicates = list(X.columns[dup_mask.to_numpy()])
    if duplicates:
        warnings.warn(f"dropping duplicated columns: {duplicates}", stacklevel=2)
        X = X.drop(columns=duplicates)
        dropped = dropped + duplicates

    X.insert(0, "const", 1.0)
    # rank probe only makes sense once a fit is possible at all
    aliased = _aliased_columns(X, protect=("const",)) if len(X) > X.shape[1] else []
    if aliased:
        warnings.warn(f"dropping linearly dependent columns: {aliased}", stacklevel=2)
        X = X.drop(columns=aliased)
        dropped = dropped + aliased
    for name in groups:
        groups[name] = [c for c in groups[name] if c not in dropped]
    groups = {name: cols for name, cols in groups.items() if cols}
    y = base["dm"].rename("dm")
    report = {
        "n_outcome": n_start,
        "n_sample": int(len(base)),
        "n_join_losses": int(n_start - len(base)),
        "dropped_columns": dropped,
    }
    return X, y, groups, report, base["person_id"]


def stratified_lmg(X: pd.DataFrame, y, groups, bands: pd.Series, robust: bool = True):
    """Independent LMG per stratum; strata with n <= p are skipped with a warning.

    Returns (per-band results dict, band sizes dict).
    """
    results: dict = {}
    sizes: dict = {}
    bands = pd.Series(np.asarray(bands), index=X.index)
    levels = (
        list(bands.cat.categories) if isinstance(bands.dtype, pd.CategoricalDtype)
        else sorted(bands.dropna().unique())
    )
    for band in levels:
        idx = bands == band
        sizes[band] = int(idx.sum())
        sub_X = X.loc[idx]
        sub_y = np.asarray(y)[idx.to_numpy()]
        if sizes[band] <= sub_X.shape[1]:
            warnings.warn(f"band {band!r} skipped: n={sizes[band]} <= p={sub_X.shape[1]}", stacklevel=2)
            continue
        nonconst = [c for c in sub_X.columns if c != "const" and sub_X[c].nunique() > 1]
        sub_X = sub_X[["const"] + nonconst]
        aliased = _aliased_columns(sub_X, protect=("const",)) if len(sub_X) > sub_X.shape[1] else []
        if aliased:
            sub_X = sub_X.drop(columns=aliased)
            nonconst = [c for c in nonconst if c not in aliased]
        sub_groups = {name: [c for c in cols if c in nonconst] for name, cols in groups.items()}
        sub_groups = {name: cols for name, cols in sub_groups.items() if cols}
        model = LmgDecomposition(sub_groups, robust=robust)
        results[band] = model.fit(sub_X, sub_y)
    return results, sizes
