"""sklearn-style estimators around the networks and statistical baselines.

The learned pieces of the pipeline are fit/predict-shaped, so they follow the
scikit-learn estimator protocol (get_params/set_params, fitted attributes with
trailing underscores, NotFittedError) and compose with that ecosystem. Feature
matrices are plain 2D float arrays:

    TrajectoryUpdater   X = [flat initial trajectory | scene descriptor], y = flat target
    TrajectoryRegressor same X/y, no noise input (the z-free ablation)
    DepthCorrector      X = [desc_I | desc_Z0 | flat updater output], y = (z_min, z_max)
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .geometry import DepthMap
from .neural import (
    AdamState,
    Discriminator,
    DepthNet,
    Mlp,
    Standardizer,
    TrajectoryNet,
    TrainingError,
    adam_step,
    anneal_weight,
    depthnet_backward,
    depthnet_forward,
    disc_backward,
    disc_forward,
    load_checkpoint,
    save_checkpoint,
    sigmoid,
    trajnet_backward,
    trajnet_forward,
)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def traj_l2(pred: np.ndarray, gt: np.ndarray, coord_dim: int = 3) -> np.ndarray:
    """Per-row L2 distance averaged over time between flat trajectories."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    n, d = pred.shape
    steps = d // coord_dim
    diff = (pred - gt).reshape(n, steps, coord_dim)
    return np.linalg.norm(diff, axis=2).mean(axis=1)


def _check_xy(X, y, y_cols: int | None = None):
    X = check_array(X, dtype=np.float64)
    y = check_array(y, dtype=np.float64, ensure_2d=True)
    if len(X) != len(y):
        raise ValueError(f"X has {len(X)} rows, y has {len(y)}")
    if y_cols is not None and y.shape[1] != y_cols:
        raise ValueError(f"y must have {y_cols} columns, got {y.shape[1]}")
    return X, y


class TrajectoryUpdater(BaseEstimator):
    """Adversarially trained stochastic trajectory corrector.

    fit() alternates discriminator and generator updates; the generator loss
    is the non-saturating adversarial term plus an L2 helper whose weight
    anneals to zero over `anneal_epochs`. With validation data the weights
    snap back to the epoch with the best validation L2 (select_best).
    """

    def __init__(self, epochs=150, anneal_epochs=30, batch_size=64, lr=1e-3,
                 z_dim=1, embed_dim=64, enc_hidden=(128,), dec_hidden=(256, 128),
                 anneal_mode="linear", coord_dim=3, select_best=True,
                 warm_start=False, seed=0):
        self.epochs = epochs
        self.anneal_epochs = anneal_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.z_dim = z_dim
        self.embed_dim = embed_dim
        self.enc_hidden = enc_hidden
        self.dec_hidden = dec_hidden
        self.anneal_mode = anneal_mode
        self.coord_dim = coord_dim
        self.select_best = select_best
        self.warm_start = warm_start
        self.seed = seed

    def _init_nets(self, traj_dim: int, desc_dim: int, rng: np.random.Generator,
                   traj_norm: Standardizer, desc_norm: Standardizer):
        g_enc = Mlp.init([traj_dim + self.z_dim, *self.enc_hidden, self.embed_dim], rng)
        g_dec = Mlp.init([self.embed_dim + desc_dim, *self.dec_hidden, traj_dim], rng,
                         final_zero=True)
        d_enc = Mlp.init([traj_dim, *self.enc_hidden, self.embed_dim], rng)
        d_dec = Mlp.init([self.embed_dim + desc_dim, *self.dec_hidden, 1], rng)
        self.g_ = TrajectoryNet(g_enc, g_dec, traj_norm, desc_norm, self.z_dim)
        self.d_ = Discriminator(d_enc, d_dec, traj_norm, desc_norm)

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = _check_xy(X, y)
        traj_dim = y.shape[1]
        desc_dim = X.shape[1] - traj_dim
        if desc_dim <= 0:
            raise ValueError(
                f"X must stack a {traj_dim}-wide trajectory with a descriptor; "
                f"got only {X.shape[1]} columns"
            )
        rng = np.random.default_rng(self.seed)
        if self.warm_start and hasattr(self, "g_"):
            traj_norm = self.g_.traj_norm
            desc_norm = self.g_.desc_norm
        else:
            traj_norm = Standardizer.fit(y)
            desc_norm = Standardizer.fit(X[:, traj_dim:])
            self._init_nets(traj_dim, desc_dim, rng, traj_norm, desc_norm)

        x0n = traj_norm.transform(X[:, :traj_dim])
        descn = desc_norm.transform(X[:, traj_dim:])
        yn = traj_norm.transform(y)
        has_val = X_val is not None and y_val is not None
        if has_val:
            X_val, y_val = _check_xy(X_val, y_val, traj_dim)

        adam_g = AdamState(lr=self.lr)
        adam_d = AdamState(lr=self.lr)
        g_params = self.g_.parameters()
        d_params = self.d_.parameters()
        n = len(X)
        history = []
        best = (np.inf, -1, None)

        for epoch in range(self.epochs):
            w = anneal_weight(epoch, self.anneal_epochs, self.anneal_mode)
            perm = rng.permutation(n)
            d_losses, adv_losses, l2_losses = [], [], []
            for start in range(0, n, self.batch_size):
                idx = perm[start:start + self.batch_size]
                xb, db, yb = x0n[idx], descn[idx], yn[idx]
                b = len(idx)
                zb = rng.standard_normal((b, self.z_dim))

                # discriminator: push gt up, updater output down
                fake, _ = trajnet_forward(self.g_, xb, zb, db)
                logit_r, cache_r = disc_forward(self.d_, yb, db)
                logit_f, cache_f = disc_forward(self.d_, fake, db)
                d_loss = float(np.mean(_softplus(-logit_r)) + np.mean(_softplus(logit_f)))
                gr, _ = disc_backward(self.d_, cache_r, (sigmoid(logit_r) - 1.0) / b)
                gf, _ = disc_backward(self.d_, cache_f, sigmoid(logit_f) / b)
                adam_step(adam_d, d_params, {k: gr[k] + gf[k] for k in gr})

                # generator: non-saturating adversarial + annealed L2
                fake, g_cache = trajnet_forward(self.g_, xb, zb, db)
                logit_f, d_cache = disc_forward(self.d_, fake, db)
                adv = float(np.mean(_softplus(-logit_f)))
                l2 = float(np.mean((fake - yb) ** 2))
                if not (np.isfinite(d_loss) and np.isfinite(adv) and np.isfinite(l2)):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {start // self.batch_size}"
                    )
                _, dxn = disc_backward(self.d_, d_cache, (sigmoid(logit_f) - 1.0) / b)
                dout = dxn + w * 2.0 * (fake - yb) / fake.size
                adam_step(adam_g, g_params, trajnet_backward(self.g_, g_cache, dout))

                d_losses.append(d_loss)
                adv_losses.append(adv)
                l2_losses.append(l2)

            row = {
                "epoch": epoch,
                "d_loss": float(np.mean(d_losses)),
                "g_adv": float(np.mean(adv_losses)),
                "g_l2": float(np.mean(l2_losses)),
                "w": w,
                "val_l2": float("nan"),
            }
            if has_val:
                val_pred = self.predict(X_val)
                row["val_l2"] = float(traj_l2(val_pred, y_val, self.coord_dim).mean())
                if self.select_best and row["val_l2"] < best[0]:
                    best = (row["val_l2"], epoch, self.g_.copy())
            history.append(row)

        if has_val and self.select_best and best[2] is not None:
            self.g_ = best[2]
        self.best_epoch_ = best[1] if has_val else self.epochs - 1
        self.history_ = history
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, z: float | np.ndarray = 0.0):
        """Corrected trajectories in meters; z is the noise input (default 0)."""
        check_is_fitted(self, "g_")
        X = check_array(X, dtype=np.float64)
        traj_dim = self.g_.traj_dim
        x0n = self.g_.traj_norm.transform(X[:, :traj_dim])
        descn = self.g_.desc_norm.transform(X[:, traj_dim:])
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 0:
            z = np.full((len(X), self.g_.z_dim), float(z))
        else:
            z = z.reshape(len(X), self.g_.z_dim)
        out, _ = trajnet_forward(self.g_, x0n, z, descn)
        return self.g_.traj_norm.inverse(out)

    def sample(self, X, rng: np.random.Generator):
        """Stochastic prediction with z ~ N(0, 1) per row."""
        check_is_fitted(self, "g_")
        z = rng.standard_normal((len(X), self.g_.z_dim))
        return self.predict(X, z)

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "g_")
        save_checkpoint(path, {
            "g_enc": self.g_.encoder, "g_dec": self.g_.decoder,
            "d_enc": self.d_.encoder, "d_dec": self.d_.decoder,
        }, {
            "kind": "trajectory_updater",
            "params": _jsonable(self.get_params()),
            "traj_norm": self.g_.traj_norm.to_dict(),
            "desc_norm": self.g_.desc_norm.to_dict(),
            "best_epoch": self.best_epoch_,
            "seed": self.seed,
        })

    @classmethod
    def load(cls, path: str | Path) -> "TrajectoryUpdater":
        nets, meta = load_checkpoint(path)
        est = cls(**_tupled(meta["params"]))
        traj_norm = Standardizer.from_dict(meta["traj_norm"])
        desc_norm = Standardizer.from_dict(meta["desc_norm"])
        est.g_ = TrajectoryNet(nets["g_enc"], nets["g_dec"], traj_norm, desc_norm,
                               est.z_dim)
        est.d_ = Discriminator(nets["d_enc"], nets["d_dec"], traj_norm, desc_norm)
        est.best_epoch_ = meta["best_epoch"]
        est.history_ = []
        return est

    def save_history(self, path: str | Path) -> None:
        check_is_fitted(self, "g_")
        _write_history(path, self.history_, ["epoch", "d_loss", "g_adv", "g_l2", "w", "val_l2"])


class TrajectoryRegressor(RegressorMixin, BaseEstimator):
    """The z-free ablation: same architecture, pure L2 regression."""

    def __init__(self, epochs=150, batch_size=64, lr=1e-3, embed_dim=64,
                 enc_hidden=(128,), dec_hidden=(256, 128), coord_dim=3,
                 select_best=True, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.embed_dim = embed_dim
        self.enc_hidden = enc_hidden
        self.dec_hidden = dec_hidden
        self.coord_dim = coord_dim
        self.select_best = select_best
        self.seed = seed

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = _check_xy(X, y)
        traj_dim = y.shape[1]
        desc_dim = X.shape[1] - traj_dim
        if desc_dim <= 0:
            raise ValueError("X must stack a trajectory with a descriptor")
        rng = np.random.default_rng(self.seed)
        traj_norm = Standardizer.fit(y)
        desc_norm = Standardizer.fit(X[:, traj_dim:])
        enc = Mlp.init([traj_dim, *self.enc_hidden, self.embed_dim], rng)
        dec = Mlp.init([self.embed_dim + desc_dim, *self.dec_hidden, traj_dim], rng,
                       final_zero=True)
        self.g_ = TrajectoryNet(enc, dec, traj_norm, desc_norm, z_dim=0)

        x0n = traj_norm.transform(X[:, :traj_dim])
        descn = desc_norm.transform(X[:, traj_dim:])
        yn = traj_norm.transform(y)
        has_val = X_val is not None and y_val is not None
        if has_val:
            X_val, y_val = _check_xy(X_val, y_val, traj_dim)

        adam = AdamState(lr=self.lr)
        params = self.g_.parameters()
        n = len(X)
        history = []
        best = (np.inf, -1, None)
        for epoch in range(self.epochs):
            perm = rng.permutation(n)
            losses = []
            for start in range(0, n, self.batch_size):
                idx = perm[start:start + self.batch_size]
                xb, db, yb = x0n[idx], descn[idx], yn[idx]
                out, cache = trajnet_forward(self.g_, xb, np.zeros((len(idx), 0)), db)
                loss = float(np.mean((out - yb) ** 2))
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                dout = 2.0 * (out - yb) / out.size
                adam_step(adam, params, trajnet_backward(self.g_, cache, dout))
                losses.append(loss)
            row = {"epoch": epoch, "loss": float(np.mean(losses)), "val_l2": float("nan")}
            if has_val:
                row["val_l2"] = float(traj_l2(self.predict(X_val), y_val, self.coord_dim).mean())
                if self.select_best and row["val_l2"] < best[0]:
                    best = (row["val_l2"], epoch, self.g_.copy())
            history.append(row)
        if has_val and self.select_best and best[2] is not None:
            self.g_ = best[2]
        self.best_epoch_ = best[1] if has_val else self.epochs - 1
        self.history_ = history
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "g_")
        X = check_array(X, dtype=np.float64)
        traj_dim = self.g_.traj_dim
        x0n = self.g_.traj_norm.transform(X[:, :traj_dim])
        descn = self.g_.desc_norm.transform(X[:, traj_dim:])
        out, _ = trajnet_forward(self.g_, x0n, np.zeros((len(X), 0)), descn)
        return self.g_.traj_norm.inverse(out)

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "g_")
        save_checkpoint(path, {"enc": self.g_.encoder, "dec": self.g_.decoder}, {
            "kind": "trajectory_regressor",
            "params": _jsonable(self.get_params()),
            "traj_norm": self.g_.traj_norm.to_dict(),
            "desc_norm": self.g_.desc_norm.to_dict(),
            "best_epoch": self.best_epoch_,
        })

    @classmethod
    def load(cls, path: str | Path) -> "TrajectoryRegressor":
        nets, meta = load_checkpoint(path)
        est = cls(**_tupled(meta["params"]))
        est.g_ = TrajectoryNet(nets["enc"], nets["dec"],
                               Standardizer.from_dict(meta["traj_norm"]),
                               Standardizer.from_dict(meta["desc_norm"]), z_dim=0)
        est.best_epoch_ = meta["best_epoch"]
        est.history_ = []
        return est

    def save_history(self, path: str | Path) -> None:
        check_is_fitted(self, "g_")
        _write_history(path, self.history_, ["epoch", "loss", "val_l2"])


class DepthCorrector(RegressorMixin, BaseEstimator):
    """Regresses global depth calibration (z_min, z_max) from descriptors and
    the trajectory updater's output; the softplus head keeps 0 < z_min < z_max."""

    def __init__(self, epochs=150, batch_size=64, lr=1e-3, hidden=(256, 64),
                 select_best=True, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.hidden = hidden
        self.select_best = select_best
        self.seed = seed

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = _check_xy(X, y, y_cols=2)
        rng = np.random.default_rng(self.seed)
        norm = Standardizer.fit(X)
        net = Mlp.init([X.shape[1], *self.hidden, 2], rng, final_zero=True)
        self.h_ = DepthNet(net, norm)
        has_val = X_val is not None and y_val is not None
        if has_val:
            X_val, y_val = _check_xy(X_val, y_val, y_cols=2)

        adam = AdamState(lr=self.lr)
        params = self.h_.parameters()
        n = len(X)
        history = []
        best = (np.inf, -1, None)
        for epoch in range(self.epochs):
            perm = rng.permutation(n)
            losses = []
            for start in range(0, n, self.batch_size):
                idx = perm[start:start + self.batch_size]
                out, cache = depthnet_forward(self.h_, X[idx])
                loss = float(np.mean((out - y[idx]) ** 2))
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                dout = 2.0 * (out - y[idx]) / out.size
                adam_step(adam, params, depthnet_backward(self.h_, cache, dout))
                losses.append(loss)
            row = {"epoch": epoch, "loss": float(np.mean(losses)), "val_loss": float("nan")}
            if has_val:
                val_out, _ = depthnet_forward(self.h_, X_val)
                row["val_loss"] = float(np.mean((val_out - y_val) ** 2))
                if self.select_best and row["val_loss"] < best[0]:
                    best = (row["val_loss"], epoch, self.h_.copy())
            history.append(row)
        if has_val and self.select_best and best[2] is not None:
            self.h_ = best[2]
        self.best_epoch_ = best[1] if has_val else self.epochs - 1
        self.history_ = history
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "h_")
        X = check_array(X, dtype=np.float64)
        out, _ = depthnet_forward(self.h_, X)
        return out

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "h_")
        save_checkpoint(path, {"h": self.h_.net}, {
            "kind": "depth_corrector",
            "params": _jsonable(self.get_params()),
            "input_norm": self.h_.input_norm.to_dict(),
            "best_epoch": self.best_epoch_,
        })

    @classmethod
    def load(cls, path: str | Path) -> "DepthCorrector":
        nets, meta = load_checkpoint(path)
        est = cls(**_tupled(meta["params"]))
        est.h_ = DepthNet(nets["h"], Standardizer.from_dict(meta["input_norm"]))
        est.best_epoch_ = meta["best_epoch"]
        est.history_ = []
        return est

    def save_history(self, path: str | Path) -> None:
        check_is_fitted(self, "h_")
        _write_history(path, self.history_, ["epoch", "loss", "val_loss"])


class MeanTrajectoryBaseline(RegressorMixin, BaseEstimator):
    """Predicts the per-index mean training trajectory for every input."""

    def fit(self, X, y=None):
        if y is None:
            y = X
        y = check_array(y, dtype=np.float64)
        if len(y) == 0:
            raise ValueError("cannot average an empty trajectory set")
        self.mean_ = y.mean(axis=0)
        self.n_features_in_ = np.asarray(X).shape[1] if np.asarray(X).ndim == 2 else len(self.mean_)
        return self

    def predict(self, X):
        check_is_fitted(self, "mean_")
        return np.tile(self.mean_, (len(X), 1))


class DepthHistogramEqualizer(TransformerMixin, BaseEstimator):
    """Histogram equalization from predicted depth onto the gt distribution.

    fit(X, y) histograms predicted (X) and ground-truth (y) depth values over
    [0, max_depth]; transform maps v -> gt_cdf^-1(pred_cdf(v)) with linear
    interpolation between bin edges.
    """

    def __init__(self, bins=256, max_depth=10.0):
        self.bins = bins
        self.max_depth = max_depth

    def fit(self, X, y):
        pred = np.asarray(X, dtype=np.float64).ravel()
        gt = np.asarray(y, dtype=np.float64).ravel()
        edges = np.linspace(0.0, self.max_depth, self.bins + 1)
        self.edges_ = edges
        self.pred_cdf_ = self._cdf(pred, edges)
        self.gt_cdf_ = self._cdf(gt, edges)
        return self

    @staticmethod
    def _cdf(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
        hist, _ = np.histogram(np.clip(values, edges[0], edges[-1]), bins=edges)
        cdf = np.zeros(len(edges))
        np.cumsum(hist, out=cdf[1:])
        return cdf / max(cdf[-1], 1.0)

    def transform(self, X):
        check_is_fitted(self, "edges_")
        v = np.asarray(X, dtype=np.float64)
        q = np.interp(v, self.edges_, self.pred_cdf_)
        return np.interp(q, self.gt_cdf_, self.edges_)

    def transform_depth(self, depth: DepthMap) -> DepthMap:
        out = np.maximum(self.transform(depth.values), 0.01)
        return DepthMap(out, depth.intrinsics)


def _write_history(path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in fields])


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}


_TUPLE_PARAMS = {"enc_hidden", "dec_hidden", "hidden"}


def _tupled(params: dict) -> dict:
    return {k: tuple(v) if k in _TUPLE_PARAMS and isinstance(v, list) else v
            for k, v in params.items()}
