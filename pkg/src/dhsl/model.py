"""The complete trainable model: shared feature stack plus hybrid weights.

Learnable parameters are the conv filters/biases, the batch-norm affine
terms, and the two projection vectors w_d / w_m. The batch-norm running
statistics are persistent state but are not part of the gradient vector.

``head`` selects the trained configuration: "hybrid" learns both projections;
"diff-only" pins w_m to zero; "mult-only" pins w_d to zero.
"""

from __future__ import annotations

import numpy as np

from . import similarity
from .errors import ShapeError
from .layers import FeatureStack, StackConfig
from .siamese import SiameseExtractor

HEADS = ("hybrid", "diff-only", "mult-only")


class PairModel:
    """Feature stack + hybrid similarity weights, with hand-written gradients."""

    def __init__(self, stack: FeatureStack, head="hybrid"):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}, expected one of {HEADS}")
        self.stack = stack
        self.extractor = SiameseExtractor(stack)
        self.head = head
        d = stack.feature_dim
        self.w_d = np.zeros(d, dtype=stack.dtype)
        self.w_m = np.zeros(d, dtype=stack.dtype)
        self.grad_w_d = np.zeros_like(self.w_d)
        self.grad_w_m = np.zeros_like(self.w_m)
        self._pair_cache = None

    @property
    def feature_dim(self):
        return self.stack.feature_dim

    # ---- forward / scoring -------------------------------------------------

    def features(self, imgs, mode="infer"):
        return self.extractor.extract_single(imgs, mode)

    def score_pairs(self, imgs1, imgs2, mode="infer"):
        x1, x2 = self.extractor.extract_pair(imgs1, imgs2, mode)
        return similarity.hybrid_score(self.w_d, self.w_m, x1, x2)

    def score_features(self, x1, x2):
        return similarity.hybrid_score(self.w_d, self.w_m, x1, x2)

    # ---- training step pieces ----------------------------------------------

    def loss_and_gradients(self, imgs1, imgs2, labels, alpha, mode="train"):
        """One full forward/backward over a pair batch.

        Accumulates gradients into the stack layers and grad_w_d/grad_w_m
        (call zero_grad first for a fresh step). Returns (loss, scores).
        """
        labels = np.asarray(labels)
        x1, x2 = self.extractor.extract_pair(imgs1, imgs2, mode)
        diff = similarity.diff_forward(x1, x2)
        mult = similarity.mult_forward(x1, x2)
        z = np.concatenate([diff, mult], axis=1)
        w = np.concatenate([self.w_d, self.w_m])
        loss, grad_w, grad_z = similarity.logistic_loss(w, z, labels, alpha)
        scores = z @ w

        d = self.feature_dim
        grad_w_d, grad_w_m = grad_w[:d], grad_w[d:]
        grad_diff, grad_mult = grad_z[:, :d], grad_z[:, d:]
        if self.head == "diff-only":
            grad_w_m = np.zeros_like(grad_w_m)
        elif self.head == "mult-only":
            grad_w_d = np.zeros_like(grad_w_d)
        self.grad_w_d += grad_w_d.astype(self.w_d.dtype)
        self.grad_w_m += grad_w_m.astype(self.w_m.dtype)

        g1d, g2d = similarity.diff_backward(x1, x2, grad_diff)
        g1m, g2m = similarity.mult_backward(x1, x2, grad_mult)
        self.extractor.backward_pair(
            (g1d + g1m).astype(x1.dtype), (g2d + g2m).astype(x1.dtype)
        )
        return loss, scores

    # ---- parameter plumbing --------------------------------------------------

    def named_parameters(self):
        return self.stack.parameters() + [("w_d", self.w_d), ("w_m", self.w_m)]

    def named_gradients(self):
        return self.stack.gradients() + [("w_d", self.grad_w_d),
                                         ("w_m", self.grad_w_m)]

    def named_state(self):
        return self.stack.state()

    def zero_grad(self):
        self.stack.zero_grad()
        self.grad_w_d[...] = 0
        self.grad_w_m[...] = 0

    def parameter_vector(self):
        """All learnable parameters flattened, in named_parameters order."""
        return np.concatenate([p.ravel() for _, p in self.named_parameters()])

    def gradient_vector(self):
        return np.concatenate([g.ravel() for _, g in self.named_gradients()])

    def set_parameter_vector(self, vec):
        vec = np.asarray(vec)
        expected = sum(p.size for _, p in self.named_parameters())
        if vec.shape != (expected,):
            raise ShapeError(f"parameter vector {vec.shape} != ({expected},)")
        off = 0
        for _, p in self.named_parameters():
            p[...] = vec[off : off + p.size].reshape(p.shape)
            off += p.size


def build_model(channel_multiplier=1.0, head="hybrid", seed=0, dtype=np.float32,
                stack_config: StackConfig = None, init_std=0.01):
    """Construct and initialize a model.

    Weights (conv filters, hybrid projections) are drawn from a normal
    distribution with standard deviation ``init_std``; biases and batch-norm
    shifts start at 0, batch-norm scales at 1, running statistics at (0, 1).
    Deterministic for a given seed.
    """
    cfg = stack_config or StackConfig.default(channel_multiplier)
    stack = FeatureStack(cfg, dtype=dtype)
    model = PairModel(stack, head=head)
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if name.endswith((".bias", ".beta")):
            continue  # stay 0
        if name.endswith(".gamma"):
            continue  # stay 1
        p[...] = rng.normal(0.0, init_std, size=p.shape)
    if head == "diff-only":
        model.w_m[...] = 0
    elif head == "mult-only":
        model.w_d[...] = 0
    return model
