"""Supervised autoencoder predicting place-exposure vectors from component embeddings.

Per-component encoders (one affine layer + rectifier, width 32) feed a
concatenated latent code into an affine decoder. Components: h_h (mean POI
embedding of the home walking isochrone), h_a (mean embedding over the daily
activity-space hull), h_d (demographics; income excluded). Ablation zeroes a
component's block of the latent code at inference. Training is seeded
full-batch gradient descent with a fixed step, so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
import shapely
from shapely.geometry import MultiPoint
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .hexgrid import HexGrid
from .pois import WALKING_SPEED_M_PER_MIN
from .survey import GENDERS, WORK_STATUSES, SurveyDataset
from .validation import ParameterError

COMPONENTS = ("h_h", "h_a", "h_d")
DEFAULT_WALK_RADIUS_M = WALKING_SPEED_M_PER_MIN * 15.0


# --- component features -------------------------------------------------------


@dataclass
class ComponentFeatures:
    """Per-person component inputs, aligned on person_ids."""

    person_ids: np.ndarray
    arrays: dict  # component name -> (n, d) float array
    h_h_empty: np.ndarray  # True where the home isochrone held no POIs
    h_a_empty: np.ndarray

    def __len__(self) -> int:
        return len(self.person_ids)

    def subset(self, idx) -> dict:
        return {name: arr[idx] for name, arr in self.arrays.items()}


def demographic_vector(persons: pd.DataFrame) -> np.ndarray:
    """Normalized age plus gender and work-status indicators (no income)."""
    cols = [persons["age"].to_numpy(dtype=float) / 100.0]
    for gender in GENDERS:
        cols.append((persons["gender"] == gender).to_numpy(dtype=float))
    for status in WORK_STATUSES:
        cols.append((persons["work_status"] == status).to_numpy(dtype=float))
    return np.column_stack(cols)


def activity_hull(points_xy: np.ndarray, walk_radius_m: float = DEFAULT_WALK_RADIUS_M):
    """Convex hull of visited points; degenerate hulls (a point or a segment)
    are buffered by the walking radius."""
    hull = MultiPoint([tuple(p) for p in points_xy]).convex_hull
    if hull.geom_type != "Polygon":
        hull = hull.buffer(walk_radius_m, quad_segs=32)
    return hull


def pois_in_hull(hull, poi_xy: np.ndarray) -> np.ndarray:
    """Indices of POIs covered by the hull (boundary inclusive)."""
    if len(poi_xy) == 0:
        return np.empty(0, dtype=np.int64)
    pts = shapely.points(poi_xy[:, 0], poi_xy[:, 1])
    inside = shapely.covers(hull, pts)
    return np.nonzero(inside)[0]


def component_features(
    dataset: SurveyDataset,
    grid: HexGrid,
    embeddings: np.ndarray,
    poi_xy: np.ndarray,
    isochrone_provider,
    minutes: float = 15.0,
) -> ComponentFeatures:
    """h_h / h_a / h_d for every person with at least one visited point.

    `embeddings` rows must align with the POI table behind both `poi_xy` and
    the isochrone provider. Empty home isochrones and empty hulls produce zero
    vectors with the corresponding flag set.
    """
    legs = dataset.legs
    persons = dataset.persons
    dim = embeddings.shape[1]
    visited: dict = {}
    for pid, olat, olon, dlat, dlon in zip(
        legs["person_id"], legs["o_lat"], legs["o_lon"], legs["d_lat"], legs["d_lon"]
    ):
        visited.setdefault(pid, []).append((olat, olon))
        visited[pid].append((dlat, dlon))

    keep = persons["person_id"].isin(visited.keys())
    sub = persons.loc[keep].reset_index(drop=True)
    n = len(sub)
    h_h = np.zeros((n, dim))
    h_a = np.zeros((n, dim))
    h_h_empty = np.zeros(n, dtype=bool)
    h_a_empty = np.zeros(n, dtype=bool)
    walk_radius = WALKING_SPEED_M_PER_MIN * minutes

    for row, (pid, hlat, hlon) in enumerate(zip(sub["person_id"], sub["home_lat"], sub["home_lon"])):
        if pd.notna(hlat) and pd.notna(hlon):
            idx = isochrone_provider.poi_indices(float(hlat), float(hlon), minutes)
        else:
            idx = np.empty(0, dtype=np.int64)
        if len(idx):
            h_h[row] = embeddings[idx].mean(axis=0)
        else:
            h_h_empty[row] = True

        pts = np.array(visited[pid], dtype=float)
        x, y = grid.project(pts[:, 0], pts[:, 1])
        hull = activity_hull(np.column_stack([x, y]), walk_radius)
        inside = pois_in_hull(hull, poi_xy)
        if len(inside):
            h_a[row] = embeddings[inside].mean(axis=0)
        else:
            h_a_empty[row] = True

    arrays = {"h_h": h_h, "h_a": h_a, "h_d": demographic_vector(sub)}
    return ComponentFeatures(
        person_ids=sub["person_id"].to_numpy(),
        arrays=arrays,
        h_h_empty=h_h_empty,
        h_a_empty=h_a_empty,
    )


# --- model --------------------------------------------------------------------


def ae_init_params(rng: np.random.Generator, dims: dict, hidden: int, n_out: int) -> dict:
    params = {}
    for name, d_in in dims.items():
        limit = np.sqrt(6.0 / (d_in + hidden))
        params[f"W_{name}"] = rng.uniform(-limit, limit, size=(d_in, hidden))
        params[f"b_{name}"] = np.zeros(hidden)
    z_dim = hidden * len(dims)
    limit = np.sqrt(6.0 / (z_dim + n_out))
    params["W_d"] = rng.uniform(-limit, limit, size=(z_dim, n_out))
    params["b_d"] = np.zeros(n_out)
    return params


def ae_forward(inputs: dict, params: dict, combo, ablate=()):
    """Returns (latent z, prediction). `ablate` zeroes those components' blocks."""
    blocks = []
    for name in combo:
        pre = inputs[name] @ params[f"W_{name}"] + params[f"b_{name}"]
        block = np.maximum(pre, 0.0)
        if name in ablate:
            block = np.zeros_like(block)
        blocks.append(block)
    z = np.concatenate(blocks, axis=1)
    return z, z @ params["W_d"] + params["b_d"]


def ae_loss_and_grad(inputs: dict, y: np.ndarray, params: dict, combo):
    """Mean-squared-error loss and analytic gradients for all parameters."""
    pres = {}
    blocks = []
    for name in combo:
        pre = inputs[name] @ params[f"W_{name}"] + params[f"b_{name}"]
        pres[name] = pre
        blocks.append(np.maximum(pre, 0.0))
    z = np.concatenate(blocks, axis=1)
    yhat = z @ params["W_d"] + params["b_d"]
    resid = yhat - y
    n, n_out = y.shape
    loss = float((resid**2).mean())

    d_yhat = 2.0 * resid / (n * n_out)
    grads = {"W_d": z.T @ d_yhat, "b_d": d_yhat.sum(axis=0)}
    dz = d_yhat @ params["W_d"].T
    hidden = blocks[0].shape[1]
    for pos, name in enumerate(combo):
        dblock = dz[:, pos * hidden : (pos + 1) * hidden]
        dpre = dblock * (pres[name] > 0)
        grads[f"W_{name}"] = inputs[name].T @ dpre
        grads[f"b_{name}"] = dpre.sum(axis=0)
    return loss, grads


def mean_r2(y_true: np.ndarray, y_pred: np.ndarray):
    """Average per-category R^2; zero-variance categories are skipped.

    Returns (mean, per-category array with NaN where skipped, n_skipped).
    """
    sst = ((y_true - y_true.mean(axis=0)) ** 2).sum(axis=0)
    sse = ((y_true - y_pred) ** 2).sum(axis=0)
    per_cat = np.full(y_true.shape[1], np.nan)
    ok = sst > 0
    per_cat[ok] = 1.0 - sse[ok] / sst[ok]
    mean = float(per_cat[ok].mean()) if ok.any() else float("nan")
    return mean, per_cat, int((~ok).sum())


class ExposureAutoencoder(BaseEstimator):
    """Supervised autoencoder over a combination of component embeddings.

    Parameters
    ----------
    combo : tuple of str
        Included components, subset of ("h_h", "h_a", "h_d"), non-empty.
    hidden_dim : int
        Encoder width per component; the latent code is their concatenation.
    lr, max_epochs, patience, tol : training controls (fixed-step gradient
        descent; stops when the train loss stops improving).
    seed : int

    Attributes
    ----------
    params_ : dict of weights (W_<comp>, b_<comp>, W_d, b_d).
    train_loss_ : float, final (best) training MSE.
    n_epochs_ : int
    """

    def __init__(self, combo=COMPONENTS, hidden_dim: int = 32, lr: float = 0.1,
                 max_epochs: int = 2000, patience: int = 60, tol: float = 1e-8, seed: int = 0):
        self.combo = combo
        self.hidden_dim = hidden_dim
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.tol = tol
        self.seed = seed

    def _check_combo(self):
        combo = tuple(self.combo)
        if not combo:
            raise ParameterError("combo must be non-empty")
        unknown = [c for c in combo if c not in COMPONENTS]
        if unknown:
            raise ParameterError(f"unknown components {unknown}; expected subset of {COMPONENTS}")
        return combo

    def _standardize(self, X: dict, fit: bool):
        out = {}
        if fit:
            self.scaler_ = {}
        for name in self.combo_:
            arr = np.asarray(X[name], dtype=float)
            if fit:
                mu = arr.mean(axis=0)
                sd = arr.std(axis=0)
                sd[sd == 0] = 1.0
                self.scaler_[name] = (mu, sd)
            mu, sd = self.scaler_[name]
            out[name] = (arr - mu) / sd
        return out

    def fit(self, X: dict, Y: np.ndarray):
        self.combo_ = self._check_combo()
        missing = [c for c in self.combo_ if c not in X]
        if missing:
            raise ParameterError(f"features missing components {missing}")
        Y = np.asarray(Y, dtype=float)
        inputs = self._standardize(X, fit=True)
        dims = {name: inputs[name].shape[1] for name in self.combo_}
        rng = np.random.default_rng(self.seed)
        params = ae_init_params(rng, dims, self.hidden_dim, Y.shape[1])

        best_loss = np.inf
        best_params = params
        since_best = 0
        for epoch in range(self.max_epochs):
            loss, grads = ae_loss_and_grad(inputs, Y, params, self.combo_)
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at epoch {epoch}")
            if loss < best_loss - self.tol * (1.0 + best_loss):
                best_loss = loss
                best_params = {k: v.copy() for k, v in params.items()}
                since_best = 0
            else:
                since_best += 1
                if since_best >= self.patience:
                    break
            for key in params:
                params[key] = params[key] - self.lr * grads[key]
        self.params_ = best_params
        self.train_loss_ = float(best_loss)
        self.n_epochs_ = epoch + 1
        return self

    def predict(self, X: dict, ablate=()) -> np.ndarray:
        check_is_fitted(self, "params_")
        ablate = (ablate,) if isinstance(ablate, str) else tuple(ablate)
        unknown = [c for c in ablate if c not in self.combo_]
        if unknown:
            raise ParameterError(f"cannot ablate {unknown}: not in combo {self.combo_}")
        inputs = self._standardize(X, fit=False)
        _, yhat = ae_forward(inputs, self.params_, self.combo_, ablate=ablate)
        return yhat

    def score(self, X: dict, Y: np.ndarray) -> float:
        mean, _, _ = mean_r2(np.asarray(Y, dtype=float), self.predict(X))
        return mean


def evaluate(model: ExposureAutoencoder, X: dict, Y: np.ndarray, ablate=()) -> dict:
    """Test-split metrics: mean R^2 over categories, MAE, MSE."""
    Y = np.asarray(Y, dtype=float)
    yhat = model.predict(X, ablate=ablate)
    mean, per_cat, skipped = mean_r2(Y, yhat)
    return {
        "mean_r2": mean,
        "mae": float(np.abs(yhat - Y).mean()),
        "mse": float(((yhat - Y) ** 2).mean()),
        "per_category_r2": per_cat,
        "n_categories_skipped": skipped,
    }


def ablate(model: ExposureAutoencoder, X: dict, Y: np.ndarray, component) -> dict:
    """Change in test loss and mean R^2 when a component's latent block is zeroed."""
    base = evaluate(model, X, Y)
    ablated = evaluate(model, X, Y, ablate=component)
    return {
        "delta_loss": ablated["mse"] - base["mse"],
        "delta_mean_r2": ablated["mean_r2"] - base["mean_r2"],
        "base": base,
        "ablated": ablated,
    }


# --- protocols ----------------------------------------------------------------


def stratified_split(groups: np.ndarray, test_fraction: float = 0.25, seed: int = 0):
    """Per-group random split so train and test carry the same group mix."""
    groups = np.asarray(groups)
    rng = np.random.default_rng(seed)
    test = np.zeros(len(groups), dtype=bool)
    for value in np.unique(groups):
        members = np.nonzero(groups == value)[0]
        n_test = int(round(len(members) * test_fraction))
        picked = rng.permutation(len(members))[:n_test]
        test[members[picked]] = True
    return np.nonzero(~test)[0], np.nonzero(test)[0]


def _transform_targets(Y: np.ndarray, log_targets: bool) -> np.ndarray:
    return np.log1p(Y) if log_targets else np.asarray(Y, dtype=float)


def combo_protocol(
    features: ComponentFeatures,
    Y: np.ndarray,
    groups: np.ndarray,
    combos,
    n_splits: int = 10,
    seed: int = 0,
    log_targets: bool = True,
    **fit_kw,
) -> pd.DataFrame:
    """One model per component combination per reconstructed split.

    Metrics are on the (log1p) transformed scale when `log_targets`; raw-scale
    mean R^2 is emitted alongside.
    """
    Y = np.asarray(Y, dtype=float)
    Yt = _transform_targets(Y, log_targets)
    rows = []
    for split in range(n_splits):
        train_idx, test_idx = stratified_split(groups, seed=seed + split)
        for combo in combos:
            combo = tuple(combo)
            model = ExposureAutoencoder(combo=combo, seed=seed + split, **fit_kw)
            model.fit(features.subset(train_idx), Yt[train_idx])
            metrics = evaluate(model, features.subset(test_idx), Yt[test_idx])
            if log_targets:
                raw_pred = np.expm1(model.predict(features.subset(test_idx)))
                raw_mean, _, _ = mean_r2(Y[test_idx], raw_pred)
            else:
                raw_mean = metrics["mean_r2"]
            rows.append(
                {
                    "combo": "||".join(combo),
                    "split": split,
                    "split_seed": seed + split,
                    "mean_r2": metrics["mean_r2"],
                    "mean_r2_raw": raw_mean,
                    "mae": metrics["mae"],
                    "mse": metrics["mse"],
                    "per_category_r2": [
                        None if not np.isfinite(v) else float(v)
                        for v in metrics["per_category_r2"]
                    ],
                    "log_targets": log_targets,
                }
            )
    return pd.DataFrame(rows)


def ablation_protocol(
    features: ComponentFeatures,
    Y: np.ndarray,
    groups: np.ndarray,
    combo=COMPONENTS,
    n_splits: int = 10,
    seed: int = 0,
    log_targets: bool = True,
    **fit_kw,
) -> pd.DataFrame:
    """Zero-ablation deltas for each component, averaged over reconstructed splits."""
    combo = tuple(combo)
    Yt = _transform_targets(np.asarray(Y, dtype=float), log_targets)
    rows = []
    for split in range(n_splits):
        train_idx, test_idx = stratified_split(groups, seed=seed + split)
        model = ExposureAutoencoder(combo=combo, seed=seed + split, **fit_kw)
        model.fit(features.subset(train_idx), Yt[train_idx])
        for comp in combo:
            deltas = ablate(model, features.subset(test_idx), Yt[test_idx], comp)
            rows.append(
                {
                    "combo": "||".join(combo),
                    "split": split,
                    "component": comp,
                    "delta_loss": deltas["delta_loss"],
                    "delta_mean_r2": deltas["delta_mean_r2"],
                }
            )
    return pd.DataFrame(rows)


def transfer_by_income(
    features: ComponentFeatures,
    Y: np.ndarray,
    groups: np.ndarray,
    combos=(("h_a",),),
    train_groups=None,
    seed: int = 0,
    test_fraction: float = 0.25,
    min_group_size: int = 30,
    log_targets: bool = True,
    **fit_kw,
) -> pd.DataFrame:
    """Train on one income group, evaluate on every group's held-out members.

    The baseline per (combo, test group) is the income-stratified random-split
    model evaluated on the same held-out members; accuracy_loss = baseline -
    transferred.
    """
    groups = np.asarray(groups)
    Y = np.asarray(Y, dtype=float)
    Yt = _transform_targets(Y, log_targets)
    values = np.unique(groups)
    if train_groups is None:
        train_groups = list(values)
    train_idx, test_idx = stratified_split(groups, test_fraction=test_fraction, seed=seed)

    rows = []
    for combo in combos:
        combo = tuple(combo)
        baseline = ExposureAutoencoder(combo=combo, seed=seed, **fit_kw)
        baseline.fit(features.subset(train_idx), Yt[train_idx])
        baseline_by_group = {}
        for g in values:
            idx = test_idx[groups[test_idx] == g]
            pred = baseline.predict(features.subset(idx))
            baseline_by_group[g] = mean_r2(Yt[idx], pred)[0]
        for tg in train_groups:
            members = train_idx[groups[train_idx] == tg]
            if len(members) < min_group_size:
                raise ParameterError(
                    f"income group {tg!r} too small to train on ({len(members)} < {min_group_size})"
                )
            model = ExposureAutoencoder(combo=combo, seed=seed, **fit_kw)
            model.fit(features.subset(members), Yt[members])
            for g in values:
                idx = test_idx[groups[test_idx] == g]
                pred = model.predict(features.subset(idx))
                transferred = mean_r2(Yt[idx], pred)[0]
                rows.append(
                    {
                        "combo": "||".join(combo),
                        "train_group": int(tg),
                        "test_group": int(g),
                        "transfer_mean_r2": transferred,
                        "baseline_mean_r2": baseline_by_group[g],
                        "accuracy_loss": baseline_by_group[g] - transferred,
                    }
                )
    return pd.DataFrame(rows)
