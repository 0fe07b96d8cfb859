"""scikit-learn style wrapper around the trainable network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import checkpoint as ckpt
from .imaging import multi_view_restore, psnr
from .model import NlrnConfig, restore
from .training import TrainConfig, train
from .validation import check_image_stack


class NLRNRestorer(BaseEstimator):
    """Non-local recurrent restorer.

    ``fit`` takes clean training images and synthesizes degraded inputs on
    the fly. ``predict`` takes degraded images on the output grid (for
    super-resolution, bicubic-upscaled inputs) and returns restorations
    clamped to [0, 1].
    """

    def __init__(
        self,
        channels=16,
        embed=8,
        neighborhood=9,
        unroll=3,
        metric="embedded_gaussian",
        propagate=True,
        task="denoise",
        sigma=25.0,
        factors=(2, 3, 4),
        patch_size=24,
        batch_size=16,
        steps=1000,
        lr=1e-3,
        clip_norm=0.5,
        seed=0,
        multi_view=False,
    ):
        self.channels = channels
        self.embed = embed
        self.neighborhood = neighborhood
        self.unroll = unroll
        self.metric = metric
        self.propagate = propagate
        self.task = task
        self.sigma = sigma
        self.factors = factors
        self.patch_size = patch_size
        self.batch_size = batch_size
        self.steps = steps
        self.lr = lr
        self.clip_norm = clip_norm
        self.seed = seed
        self.multi_view = multi_view

    def _configs(self):
        model_cfg = NlrnConfig(
            channels=self.channels,
            embed=self.embed,
            neighborhood=self.neighborhood,
            unroll=self.unroll,
            metric=self.metric,
            propagate=self.propagate,
        )
        train_cfg = TrainConfig(
            task=self.task,
            sigma=self.sigma,
            factors=tuple(self.factors),
            patch_size=self.patch_size,
            batch_size=self.batch_size,
            steps=self.steps,
            lr=self.lr,
            clip_norm=self.clip_norm,
            seed=self.seed,
        )
        return train_cfg, model_cfg

    def fit(self, X, y=None):
        images, _ = check_image_stack(X)
        train_cfg, model_cfg = self._configs()
        result = train(images, train_cfg, model_cfg)
        self.params_ = result.params
        self.log_ = result.log
        return self

    def _restore_one(self, img):
        if self.multi_view:
            return multi_view_restore(img, lambda v: restore(v, self.params_))
        return restore(img, self.params_)

    def predict(self, X):
        check_is_fitted(self, "params_")
        images, single = check_image_stack(X)
        out = [self._restore_one(img) for img in images]
        if single:
            return out[0]
        # mixed sizes cannot be stacked
        return np.stack(out) if len({o.shape for o in out}) == 1 else out

    def transform(self, X):
        return self.predict(X)

    def score(self, X, y, border_crop: int = 0) -> float:
        """Mean PSNR (dB) of the restorations of ``X`` against ``y``."""
        pred, single = check_image_stack(self.predict(X))
        ref, _ = check_image_stack(y)
        if len(pred) != len(ref):
            raise ValueError("X and y hold different numbers of images")
        return float(np.mean([psnr(p, r, border_crop) for p, r in zip(pred, ref)]))

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        ckpt.save_params(path, self.params_)

    @classmethod
    def load(cls, path, **kwargs) -> "NLRNRestorer":
        params = ckpt.load_params(path)
        cfg = params.config
        est = cls(
            channels=cfg.channels,
            embed=cfg.embed,
            neighborhood=cfg.neighborhood,
            unroll=cfg.unroll,
            metric=cfg.metric,
            propagate=cfg.propagate,
            **kwargs,
        )
        est.params_ = params
        return est
