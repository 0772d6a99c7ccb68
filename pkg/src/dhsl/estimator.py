"""scikit-learn estimator wrapper around the pair-similarity model.

``HybridSimilarity`` follows the metric-learner idiom: fit on identity-labeled
images, transform images to embedding vectors, and score image pairs (higher
score = more similar). It composes with sklearn tooling via get_params /
set_params / clone, and ``get_metric`` yields a standalone callable usable as
a custom metric.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import IMAGE_H, IMAGE_W, DatasetManifest, ManifestEntry
from .model import build_model
from .training import TrainConfig, run_training
from .validation import check_identity_labels, check_image_batch, check_pair_batch


class HybridSimilarity(BaseEstimator):
    """Learned image-pair similarity: shared CNN branches feeding a hybrid
    difference/product projection head, trained as a pair classifier.

    Parameters mirror the training configuration; see TrainConfig for
    semantics. ``head`` may be "hybrid", "diff-only", or "mult-only".
    """

    def __init__(self, alpha=5e-2, batch_size=128, pos_per_batch=64,
                 momentum=0.9, base_lr=1e-3, lr_decay_factor=0.1, min_lr=1e-4,
                 plateau_patience=3, max_epochs=20, steps_per_epoch=100,
                 hard_negative_mining=False, head="hybrid",
                 channel_multiplier=1.0, augmentation="none", seed=0):
        self.alpha = alpha
        self.batch_size = batch_size
        self.pos_per_batch = pos_per_batch
        self.momentum = momentum
        self.base_lr = base_lr
        self.lr_decay_factor = lr_decay_factor
        self.min_lr = min_lr
        self.plateau_patience = plateau_patience
        self.max_epochs = max_epochs
        self.steps_per_epoch = steps_per_epoch
        self.hard_negative_mining = hard_negative_mining
        self.head = head
        self.channel_multiplier = channel_multiplier
        self.augmentation = augmentation
        self.seed = seed

    def _config(self):
        return TrainConfig(
            alpha=self.alpha, batch_size=self.batch_size,
            pos_per_batch=self.pos_per_batch, momentum=self.momentum,
            base_lr=self.base_lr, lr_decay_factor=self.lr_decay_factor,
            min_lr=self.min_lr, plateau_patience=self.plateau_patience,
            max_epochs=self.max_epochs, steps_per_epoch=self.steps_per_epoch,
            hard_negative_mining=self.hard_negative_mining, head=self.head,
            channel_multiplier=self.channel_multiplier,
            augmentation=self.augmentation, seed=self.seed,
        )

    def fit(self, X, y, cameras=None):
        """Train on identity-labeled images.

        X: (n, 128, 48, 3) images in [0, 1]; y: integer identity per image;
        cameras: optional integer camera id per image. Without cameras, each
        identity's images are assigned alternating views so cross-view
        positive pairs exist.
        """
        X = check_image_batch(X)
        y = check_identity_labels(y, len(X))
        if cameras is None:
            seen = {}
            cameras = np.empty(len(X), dtype=np.int64)
            for i, ident in enumerate(y):
                k = seen.get(int(ident), 0)
                cameras[i] = 1 + (k % 2)
                seen[int(ident)] = k + 1
        else:
            cameras = check_identity_labels(cameras, len(X), name="cameras")

        entries = [
            ManifestEntry(f"<memory:{i}>", int(y[i]), int(cameras[i]))
            for i in range(len(X))
        ]
        manifest = DatasetManifest(entries, name="in-memory", images=X)
        config = self._config()
        model = build_model(channel_multiplier=self.channel_multiplier,
                            head=self.head, seed=self.seed)
        result = run_training(model, manifest, X, config)
        self.model_ = model
        self.feature_dim_ = model.feature_dim
        self.n_iter_ = result.steps
        self.loss_history_ = result.epoch_losses
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "This HybridSimilarity instance is not fitted yet."
            )

    def transform(self, X):
        """Embed images into the learned feature space: (n, feature_dim_)."""
        self._require_fitted()
        return self.model_.features(check_image_batch(X), mode="infer")

    def score_pairs(self, pairs):
        """Hybrid similarity of (n, 2, 128, 48, 3) image pairs; higher = more
        similar."""
        self._require_fitted()
        x1, x2 = check_pair_batch(pairs)
        return self.model_.score_pairs(x1, x2, mode="infer")

    def decision_function(self, pairs):
        return self.score_pairs(pairs)

    def predict(self, pairs):
        """Same-identity decision per pair: +1 if the score is >= 0, else -1."""
        return np.where(self.score_pairs(pairs) >= 0, 1, -1)

    def get_metric(self):
        """A standalone callable scoring two flattened images.

        The returned function keeps its own copies of the learned weights, so
        later refits do not change it. It accepts 1-D arrays of size
        128*48*3 (sklearn metric convention) and returns the similarity.
        """
        self._require_fitted()
        frozen = build_model(channel_multiplier=self.channel_multiplier,
                             head=self.head, seed=0)
        frozen.set_parameter_vector(self.model_.parameter_vector())
        for (_, src), (_, dst) in zip(self.model_.named_state(),
                                      frozen.named_state()):
            dst[...] = src
        img_shape = (IMAGE_H, IMAGE_W, 3)

        def metric_fun(a, b):
            imgs = np.stack([
                np.asarray(a, dtype=np.float32).reshape(img_shape),
                np.asarray(b, dtype=np.float32).reshape(img_shape),
            ])
            f = frozen.features(imgs, mode="infer")
            return float(frozen.score_features(f[0:1], f[1:2])[0])

        return metric_fun
