"""Wasserstein critics: the plain clipped score net and the fast-learning
variant that conditions on an embedding of extra generator samples.

All trunk weights live in the clip set and are projected onto the clip box
after every training step, which bounds the critic's Lipschitz constant.
The embedding path of the fast critic is deliberately outside the clip set.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, Tensor

LEAKY_SLOPE = 0.2
EMBED_DIM = 32
GATED_BLOCKS = 2
INIT_STD = 0.02


def _init(params, name, shape, rng, dtype, clip_c=None):
    w = rng.normal(0.0, INIT_STD, size=shape)
    if clip_c is not None:
        w = np.clip(w, -clip_c, clip_c)
    return params.add(name, w, dtype=dtype)


class Critic:
    """Clipped dense score function; one small 3x3 conv in front on the image track."""

    def __init__(self, in_dim, hidden=64, clip_c=0.01, seed=0, dtype="f64",
                 image_hw=None, conv_channels=4):
        if clip_c <= 0:
            raise ValueError("need clip_c > 0")
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        self.hidden = hidden
        self.clip_c = clip_c
        self.image_hw = image_hw
        self.params = Parameters()
        p = self.params
        if image_hw is not None:
            h, w = image_hw
            if h * w != in_dim:
                raise ValueError("image_hw inconsistent with in_dim")
            self.conv_k = _init(p, "convK", (conv_channels, 3, 3), rng, dtype, clip_c)
            self.conv_b = p.add("convb", np.zeros(conv_channels), dtype=dtype)
            trunk_in = conv_channels * (h - 2) * (w - 2)
        else:
            trunk_in = in_dim
        self.W1 = _init(p, "W1", (trunk_in, hidden), rng, dtype, clip_c)
        self.b1 = p.add("b1", np.zeros(hidden), dtype=dtype)
        self.W2 = _init(p, "W2", (hidden, hidden), rng, dtype, clip_c)
        self.b2 = p.add("b2", np.zeros(hidden), dtype=dtype)
        # zero output head: an untrained critic scores everything 0
        self.w3 = p.add("w3", np.zeros((hidden, 1)), dtype=dtype)
        self.b3 = p.add("b3", np.zeros(1), dtype=dtype)
        self.clip_set = frozenset(p.names())

    def _front(self, x):
        if self.image_hw is None:
            return x
        h, w = self.image_hw
        imgs = ad.reshape(x, (x.shape[0], h, w))
        feats = ad.leaky_relu(ad.conv3x3(imgs, self.conv_k, self.conv_b), LEAKY_SLOPE)
        n, c, oh, ow = feats.shape
        return ad.reshape(feats, (n, c * oh * ow))

    def value(self, x, hidden_bias=None):
        """One finite score per row; ``hidden_bias`` is the fast-critic hook."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        ad.assert_finite(x, "critic input")
        h1 = ad.affine(self._front(x), self.W1, self.b1)
        if hidden_bias is not None:
            h1 = h1 + hidden_bias
        h1 = ad.leaky_relu(h1, LEAKY_SLOPE)
        h2 = ad.leaky_relu(ad.affine(h1, self.W2, self.b2), LEAKY_SLOPE)
        return ad.reshape(ad.affine(h2, self.w3, self.b3), (x.shape[0],))

    def lipschitz_bound(self):
        """K with |f(x)-f(x')| <= K * ||x-x'||_1 whenever all weights sit in the box.

        Dense trunk only; each layer multiplies the bound by clip_c times its
        output width (leaky-rectifier slope <= 1).
        """
        if self.image_hw is not None:
            raise NotImplementedError("bound derived for the dense trunk only")
        return self.clip_c ** 3 * self.hidden * self.hidden


class GatedBlock:
    """x + tanh(a) * sigmoid(b) where [a | b] is a learned linear map of x."""

    def __init__(self, params, prefix, width, rng, dtype):
        self.W = params.add(f"{prefix}.W",
                            rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, 2 * width)),
                            dtype=dtype)
        self.b = params.add(f"{prefix}.b", np.zeros(2 * width), dtype=dtype)
        self.width = width

    def apply(self, x):
        z = ad.affine(x, self.W, self.b)
        a = ad.gather_cols(z, np.arange(self.width))
        g = ad.gather_cols(z, np.arange(self.width, 2 * self.width))
        return x + ad.tanh(a) * ad.sigmoid(g)


class FastCritic(Critic):
    """Critic whose first hidden layer is biased by a pooled embedding of
    extra generator samples, so it can track a moving generator without
    extra gradient updates.  Embedding-path weights are never clipped; with
    a zero embedding the score equals the plain trunk's exactly.
    """

    def __init__(self, in_dim, hidden=64, clip_c=0.01, seed=0, dtype="f64",
                 embed_dim=EMBED_DIM, image_hw=None, conv_channels=4):
        super().__init__(in_dim, hidden, clip_c, seed, dtype, image_hw, conv_channels)
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        p = self.params
        self.embed_dim = embed_dim
        self.E_W = p.add("embed.W", rng.normal(0.0, 1.0 / np.sqrt(in_dim),
                                               size=(in_dim, embed_dim)), dtype=dtype)
        self.E_b = p.add("embed.b", np.zeros(embed_dim), dtype=dtype)
        self.blocks = [GatedBlock(p, f"embed.g{i}", embed_dim, rng, dtype)
                       for i in range(GATED_BLOCKS)]
        self.proj = p.add("embed.proj", rng.normal(0.0, 1.0 / np.sqrt(embed_dim),
                                                   size=(embed_dim, hidden)), dtype=dtype)
        # trunk names only; the embedding path must stay unclipped
        self.clip_set = frozenset(n for n in p.names() if not n.startswith("embed."))

    def embed(self, x_e):
        """Mean-pooled gated-residual features of the extra batch: [1, embed_dim]."""
        x_e = x_e if isinstance(x_e, Tensor) else Tensor(x_e)
        if x_e.shape[0] == 0:
            raise ValueError("extra batch must be nonempty")
        feats = ad.affine(x_e, self.E_W, self.E_b)
        for block in self.blocks:
            feats = block.apply(feats)
        return ad.reshape(ad.exact_mean_axis0(feats), (1, self.embed_dim))

    def value(self, x, x_e=None, embedding=None):
        """Score of x conditioned on x_e (or a precomputed embedding)."""
        if embedding is None:
            if x_e is None:
                raise ValueError("fast critic needs x_e or a precomputed embedding")
            embedding = self.embed(x_e)
        bias = ad.matmul(embedding, self.proj)
        return super().value(x, hidden_bias=bias)


def wgan_objective(critic, x_r, x_g, x_e=None):
    """mean f(x_r) - mean f(x_g); critic steps ascend it, generator descends
    the generated-side term.  With a fast critic the same x_e embedding is
    used on both sides, per the conditional-critic update.
    """
    x_r = x_r if isinstance(x_r, Tensor) else Tensor(x_r)
    x_g = x_g if isinstance(x_g, Tensor) else Tensor(x_g)
    if x_r.shape[0] == 0 or x_g.shape[0] == 0:
        raise ValueError("empty batch")
    if x_r.shape[1] != x_g.shape[1]:
        raise ad.ShapeError(f"batch widths differ: {x_r.shape} vs {x_g.shape}")
    if isinstance(critic, FastCritic):
        emb = critic.embed(x_e)
        return critic.value(x_r, embedding=emb).mean() - critic.value(x_g, embedding=emb).mean()
    return critic.value(x_r).mean() - critic.value(x_g).mean()
