"""Backbone: partially masked token grid -> per-position MoG parameters.

A small pre-norm transformer. Each position embeds the sum of its revealed
codeword embeddings (a learned null vector when everything is hidden)
concatenated with the masked-count fraction, projected to the model width.
Class label and mask-ratio conditioning enter as a bias added to every
normalized activation (bias-modulated normalization); the mask ratio is a
scalar scaling a learned direction. Output heads are zero-initialized so an
untrained model predicts the uniform mixture with zero means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .masking import check_depth_suffix_mask
from .mog import LowRankBasis, MoGParams
from .rvq import Codebook


@dataclass
class BackboneConfig:
    seq_len: int          # grid positions
    depth: int            # quantization stages per position
    vocab: int            # codewords per stage
    latent_dim: int       # vector dimension the codebook lives in
    width: int = 128
    layers: int = 4
    heads: int = 4
    mixtures: int = 64    # MoG components
    mean_rank: int = 8    # low-rank mean dimension
    num_classes: int = 0  # 0 = unconditional; label 0 is the null label
    positional_encoding: bool = True

    def __post_init__(self):
        counts = (self.seq_len, self.depth, self.vocab, self.latent_dim,
                  self.width, self.layers, self.heads, self.mixtures,
                  self.mean_rank)
        if any(c < 1 for c in counts):
            raise ValueError("all size fields must be >= 1")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def sinusoidal_encoding(L, width):
    pos = np.arange(L)[:, None]
    half = np.arange(width // 2 + width % 2)
    freq = 1.0 / (10000.0 ** (2 * half / width))
    pe = np.zeros((L, width))
    ang = pos * freq[None, :]
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)[:, : width // 2]
    return pe


class Backbone:
    """Owns the parameter store; forward passes build fresh graphs."""

    def __init__(self, config: BackboneConfig, seed=0):
        self.config = config
        self.params: dict[str, nm.Tensor] = {}
        self.forward_calls = 0
        self._pe = sinusoidal_encoding(config.seq_len, config.width)
        self._init_params(np.random.default_rng(seed))

    # -- parameters -------------------------------------------------------

    def _add(self, name, value):
        self.params[name] = nm.parameter(value, name=name)

    def _init_params(self, rng):
        c = self.config
        W = c.width

        def lin(fan_in, *shape):
            return rng.normal(size=shape) / np.sqrt(fan_in)

        self._add("embed.w", lin(c.latent_dim + 1, c.latent_dim + 1, W))
        self._add("embed.b", np.zeros(W))
        self._add("embed.null", 0.02 * rng.normal(size=c.latent_dim))
        self._add("cond.classes", 0.02 * rng.normal(size=(c.num_classes + 1, W)))
        self._add("cond.ratio", 0.02 * rng.normal(size=W))
        for i in range(c.layers):
            p = f"block{i}."
            self._add(p + "ln1.g", np.ones(W))
            self._add(p + "ln1.b", np.zeros(W))
            for proj in ("q", "k", "v"):
                self._add(p + f"attn.{proj}w", lin(W, W, W))
                if proj != "k":
                    # a key bias shifts every attention row uniformly and
                    # cancels in the softmax; it would be a dead direction
                    self._add(p + f"attn.{proj}b", np.zeros(W))
            self._add(p + "attn.ow", lin(W, W, W))
            self._add(p + "attn.ob", np.zeros(W))
            self._add(p + "ln2.g", np.ones(W))
            self._add(p + "ln2.b", np.zeros(W))
            self._add(p + "mlp.w1", lin(W, W, 4 * W))
            self._add(p + "mlp.b1", np.zeros(4 * W))
            self._add(p + "mlp.w2", lin(4 * W, 4 * W, W))
            self._add(p + "mlp.b2", np.zeros(W))
        self._add("final.g", np.ones(W))
        self._add("final.b", np.zeros(W))
        # zero-init heads: untrained model emits uniform pi, zero means
        self._add("head.logits.w", np.zeros((W, c.mixtures)))
        self._add("head.logits.b", np.zeros(c.mixtures))
        self._add("head.means.w", np.zeros((W, c.mixtures * c.mean_rank)))
        self._add("head.means.b", np.zeros(c.mixtures * c.mean_rank))
        self._add("head.scale.w", np.zeros((W, 1)))
        self._add("head.scale.b", np.zeros(1))
        self._add("head.shift.w", np.zeros((W, c.latent_dim)))
        self._add("head.shift.b", np.zeros(c.latent_dim))
        self._add("basis.M", 0.1 * rng.normal(size=(c.mixtures, c.latent_dim, c.mean_rank)))
        self._add("basis.s", np.zeros((c.mixtures, c.latent_dim)))

    def parameter_arrays(self):
        return {k: v.data.copy() for k, v in sorted(self.params.items())}

    def load_arrays(self, arrays):
        for k, p in self.params.items():
            p.data = np.array(arrays[k], dtype=np.float64)

    @property
    def basis(self):
        return LowRankBasis(self.params["basis.M"], self.params["basis.s"])

    # -- forward ----------------------------------------------------------

    def embed_input(self, tokens, mask, book: Codebook):
        """(B, L, D) tokens + visibility mask -> (B, L, width) Tensor.

        Position features: sum of revealed codeword embeddings (learned
        null vector when fully hidden) concatenated with q_i / D.
        """
        c = self.config
        tokens = np.asarray(tokens)
        mask = np.asarray(mask)
        if tokens.ndim == 2:
            tokens, mask = tokens[None], mask[None]
        B = tokens.shape[0]
        if tokens.shape[1:] != (c.seq_len, c.depth):
            raise ValueError(f"token grid must be (B, {c.seq_len}, {c.depth}), got {tokens.shape}")
        for b in range(B):
            check_depth_suffix_mask(mask[b])

        e_sum = np.zeros((B, c.seq_len, c.latent_dim))
        for j in range(c.depth):
            vis = mask[:, :, j] == 1
            if vis.any():
                e_sum[vis] += book.table(j + 1)[tokens[:, :, j][vis] - 1]
        q = c.depth - mask.sum(axis=2)
        hidden = (q == c.depth)[:, :, None].astype(np.float64)   # fully masked flag

        feat = nm.add(nm.constant(e_sum),
                      nm.mul(nm.constant(hidden), self.params["embed.null"]))
        count = nm.constant((q / c.depth)[:, :, None])
        x = nm.concat([feat, count], axis=-1)
        return nm.add(nm.matmul(x, self.params["embed.w"]), self.params["embed.b"])

    def _attention(self, x, prefix, B):
        c = self.config
        W, nh = c.width, c.heads
        hd = W // nh

        def split_heads(t):
            t = nm.reshape(t, (B, c.seq_len, nh, hd))
            t = nm.transpose(t, (0, 2, 1, 3))
            return nm.reshape(t, (B * nh, c.seq_len, hd))

        def proj(name):
            out = nm.matmul(x, self.params[prefix + f"attn.{name}w"])
            bias = self.params.get(prefix + f"attn.{name}b")
            return out if bias is None else nm.add(out, bias)

        q, k, v = (split_heads(proj(n)) for n in ("q", "k", "v"))
        scores = nm.mul(nm.matmul(q, nm.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(hd))
        out = nm.matmul(nm.softmax(scores), v)
        out = nm.reshape(out, (B, nh, c.seq_len, hd))
        out = nm.reshape(nm.transpose(out, (0, 2, 1, 3)), (B, c.seq_len, W))
        return nm.add(nm.matmul(out, self.params[prefix + "attn.ow"]),
                      self.params[prefix + "attn.ob"])

    def predict(self, embedded, labels, r):
        """Embedded inputs + labels (B,) + mask ratio r (B,) -> MoGParams."""
        c = self.config
        B = embedded.shape[0]
        labels = np.asarray(labels, dtype=np.int64).reshape(B)
        if np.any((labels < 0) | (labels > c.num_classes)):
            raise ValueError(f"labels must lie in [0, {c.num_classes}]")
        r = np.broadcast_to(np.asarray(r, dtype=np.float64), (B,))

        cond = nm.add(nm.gather(self.params["cond.classes"], labels),
                      nm.mul(nm.constant(r[:, None]), self.params["cond.ratio"]))
        cond = nm.reshape(cond, (B, 1, c.width))

        x = embedded
        if c.positional_encoding:
            x = nm.add(x, nm.constant(self._pe[None]))
        for i in range(c.layers):
            p = f"block{i}."
            h1 = nm.add(nm.layer_norm(x, self.params[p + "ln1.g"],
                                      self.params[p + "ln1.b"]), cond)
            x = nm.add(x, self._attention(h1, p, B))
            h2 = nm.add(nm.layer_norm(x, self.params[p + "ln2.g"],
                                      self.params[p + "ln2.b"]), cond)
            mlp = nm.matmul(nm.gelu(nm.add(nm.matmul(h2, self.params[p + "mlp.w1"]),
                                           self.params[p + "mlp.b1"])),
                            self.params[p + "mlp.w2"])
            x = nm.add(x, nm.add(mlp, self.params[p + "mlp.b2"]))
        y = nm.add(nm.layer_norm(x, self.params["final.g"], self.params["final.b"]),
                   cond)

        def head(name):
            return nm.add(nm.matmul(y, self.params[f"head.{name}.w"]),
                          self.params[f"head.{name}.b"])

        logits = head("logits")
        means = nm.reshape(head("means"), (B, c.seq_len, c.mixtures, c.mean_rank))
        log_scale = nm.reshape(head("scale"), (B, c.seq_len))
        shift = head("shift")
        self.forward_calls += 1
        return MoGParams(logits, means, log_scale, shift)

    def forward(self, tokens, mask, book, labels, r):
        return self.predict(self.embed_input(tokens, mask, book), labels, r)
