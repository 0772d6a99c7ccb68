"""Two-branch feature extraction over a single shared layer stack.

Both images of a pair run through the same FeatureStack instance (shared by
reference, never copied), so the branches are identical by construction. In
train mode the batch-norm statistics are computed over the concatenation of
both branches' activations, which keeps the two branches exactly symmetric;
this is implemented by stacking the two image batches into one forward pass.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, StateError
from .layers import FeatureStack


class SiameseExtractor:
    """Parameter-shared pair extractor emitting flattened feature vectors."""

    def __init__(self, stack: FeatureStack):
        self.stack = stack
        self._pair_n = None

    @property
    def feature_dim(self):
        return self.stack.feature_dim

    def extract_pair(self, imgs1, imgs2, mode="train"):
        """Run both members of a pair batch; returns (x1, x2), each (n, d).

        The two batches are concatenated into one stack forward so batch-norm
        sees identical statistics for both branches.
        """
        imgs1 = np.asarray(imgs1)
        imgs2 = np.asarray(imgs2)
        if imgs1.shape != imgs2.shape:
            raise ShapeError(
                f"pair batches differ in shape: {imgs1.shape} vs {imgs2.shape}"
            )
        n = imgs1.shape[0]
        feats = self.stack.forward(np.concatenate([imgs1, imgs2], axis=0), mode)
        flat = feats.reshape(2 * n, -1)
        self._pair_n = n
        return flat[:n], flat[n:]

    def extract_single(self, imgs, mode="infer"):
        """Single-branch forward, used to compute gallery features once.

        Infer mode takes the cache-free path, so concurrent calls are safe.
        """
        imgs = np.asarray(imgs)
        if mode == "infer":
            feats = self.stack.infer(imgs)
        else:
            feats = self.stack.forward(imgs, mode)
        return feats.reshape(imgs.shape[0], -1)

    def backward_pair(self, grad_x1, grad_x2):
        """Backpropagate both branches; parameter gradients sum both halves."""
        if self._pair_n is None:
            raise StateError("backward_pair before extract_pair")
        n = self._pair_n
        if grad_x1.shape != grad_x2.shape or grad_x1.shape[0] != n:
            raise ShapeError(
                f"gradient shapes {grad_x1.shape}/{grad_x2.shape} do not match "
                f"the cached pair batch of {n}"
            )
        grad = np.concatenate([grad_x1, grad_x2], axis=0)
        shapes = self.stack.layer_output_shapes()[-1][1]
        self._pair_n = None
        return self.stack.backward(grad.reshape(2 * n, *shapes))
