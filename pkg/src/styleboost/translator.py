"""Unpaired image-to-image translation network and its training loop.

Residual encoder-decoder generator with a patch discriminator, trained with
a least-squares adversarial loss plus a patchwise contrastive loss between
encoder features of the input and the output at matched locations (and the
same term on target-domain identity mappings). Source and target batches
are drawn independently; nothing ever pairs them by index.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import load_manifest_images
from .errors import ContractError
from .imaging import to_nchw
from .nn import (Adam, Conv2d, GroupNorm, LeakyReLU, Linear, Module, ReLU,
                 Sequential, Tanh, Upsample2x)


class ResBlock(Module):
    def __init__(self, channels, rng, dtype=np.float32):
        self.body = Sequential(
            Conv2d(channels, channels, rng=rng, dtype=dtype),
            GroupNorm(4, channels, dtype=dtype),
            ReLU(),
            Conv2d(channels, channels, rng=rng, dtype=dtype),
            GroupNorm(4, channels, dtype=dtype),
        )

    def forward(self, x):
        h, cache = self.body.forward(x)
        return x + h, cache

    def backward(self, gy, cache):
        return gy + self.body.backward(gy, cache)


class GeneratorModel(Module):
    """Encoder (3 scales, feature taps) -> residual blocks -> decoder."""

    def __init__(self, base=16, n_res_blocks=3, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        b = base
        self.base = base
        self.n_res_blocks = n_res_blocks
        self.enc_stages = [
            Sequential(Conv2d(3, b, rng=rng, dtype=dtype),
                       GroupNorm(4, b, dtype=dtype), ReLU()),
            Sequential(Conv2d(b, 2 * b, stride=2, rng=rng, dtype=dtype),
                       GroupNorm(4, 2 * b, dtype=dtype), ReLU()),
            Sequential(Conv2d(2 * b, 4 * b, stride=2, rng=rng, dtype=dtype),
                       GroupNorm(4, 4 * b, dtype=dtype), ReLU()),
        ]
        self.res = Sequential(*[ResBlock(4 * b, rng, dtype)
                                for _ in range(n_res_blocks)])
        self.dec = Sequential(
            Upsample2x(), Conv2d(4 * b, 2 * b, rng=rng, dtype=dtype),
            GroupNorm(4, 2 * b, dtype=dtype), ReLU(),
            Upsample2x(), Conv2d(2 * b, b, rng=rng, dtype=dtype),
            GroupNorm(4, b, dtype=dtype), ReLU(),
            Conv2d(b, 3, rng=rng, dtype=dtype), Tanh(),
        )

    @property
    def tap_channels(self):
        return [self.base, 2 * self.base, 4 * self.base]

    def encode(self, x):
        feats, caches = [], []
        h = x
        for stage in self.enc_stages:
            h, c = stage.forward(h)
            feats.append(h)
            caches.append(c)
        return feats, caches

    def encode_backward(self, gfeats, caches):
        g = None
        for stage, cache, gf in zip(reversed(self.enc_stages),
                                    reversed(caches), reversed(gfeats)):
            if gf is not None:
                g = gf if g is None else g + gf
            g = stage.backward(g, cache)
        return g

    def forward(self, x):
        feats, enc_caches = self.encode(x)
        h, res_cache = self.res.forward(feats[-1])
        y, dec_cache = self.dec.forward(h)
        return y, (enc_caches, res_cache, dec_cache)

    def backward(self, gy, cache):
        enc_caches, res_cache, dec_cache = cache
        g = self.dec.backward(gy, dec_cache)
        g = self.res.backward(g, res_cache)
        zeros = [None, None]
        return self.encode_backward(zeros + [g], enc_caches)


class DiscriminatorModel(Module):
    """Patch-level real/fake classifier producing a score map."""

    def __init__(self, base=16, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        b = base
        self.body = Sequential(
            Conv2d(3, b, k=4, stride=2, pad=1, rng=rng, dtype=dtype),
            LeakyReLU(0.2),
            Conv2d(b, 2 * b, k=4, stride=2, pad=1, rng=rng, dtype=dtype),
            GroupNorm(4, 2 * b, dtype=dtype), LeakyReLU(0.2),
            Conv2d(2 * b, 4 * b, k=4, stride=1, pad=1, rng=rng, dtype=dtype),
            GroupNorm(4, 4 * b, dtype=dtype), LeakyReLU(0.2),
            Conv2d(4 * b, 1, k=4, stride=1, pad=1, rng=rng, dtype=dtype),
        )

    def forward(self, x):
        return self.body.forward(x)

    def backward(self, gy, cache):
        return self.body.backward(gy, cache)


class FeatureHeads(Module):
    """Per-tap two-layer MLP projecting patch vectors onto the unit sphere."""

    def __init__(self, tap_channels, dim=64, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.mlps = [Sequential(Linear(c, dim, rng=rng, dtype=dtype), ReLU(),
                                Linear(dim, dim, rng=rng, dtype=dtype))
                     for c in tap_channels]

    def project(self, feats, location_ids):
        """Gather tap vectors at sampled locations and project them.

        Returns per-layer unit vectors shaped (N, P, dim) plus caches for
        the backward pass.
        """
        out, caches = [], []
        for feat, ids, mlp in zip(feats, location_ids, self.mlps):
            n, c, h, w = feat.shape
            flat = feat.reshape(n, c, h * w)[:, :, ids]
            vecs = np.ascontiguousarray(
                flat.transpose(0, 2, 1)).reshape(n * len(ids), c)
            proj, mlp_cache = mlp.forward(vecs)
            norm = np.sqrt((proj * proj).sum(axis=1, keepdims=True)) + 1e-10
            unit = proj / norm
            out.append(unit.reshape(n, len(ids), self.dim))
            caches.append((mlp_cache, unit, norm, feat.shape, ids))
        return out, caches

    def project_backward(self, grads, caches):
        """Route unit-vector grads back to per-tap feature-map grads."""
        gfeats = []
        for g, (mlp_cache, unit, norm, shape, ids) in zip(grads, caches):
            n, c, h, w = shape
            gu = g.reshape(-1, self.dim)
            gproj = (gu - unit * (gu * unit).sum(axis=1, keepdims=True)) / norm
            i = len(gfeats)
            gvec = self.mlps[i].backward(gproj, mlp_cache)
            gflat = np.zeros((n, c, h * w), dtype=gvec.dtype)
            gflat[:, :, ids] = gvec.reshape(n, len(ids), c).transpose(0, 2, 1)
            gfeats.append(gflat.reshape(n, c, h, w))
        return gfeats


@dataclass
class PatchFeatureStack:
    """Per-layer unit feature vectors at matched locations, one (P, d) block
    per tapped layer."""
    layers: list[np.ndarray] = field(default_factory=list)

    def validate_unit(self, tol=1e-5):
        for block in self.layers:
            norms = np.sqrt((block * block).sum(axis=1))
            if np.abs(norms - 1.0).max() > tol:
                raise ContractError("feature vectors are not unit-normalized")


def adv_losses(d_real, d_fake):
    """Least-squares adversarial losses: (discriminator, generator)."""
    if not (np.isfinite(d_real).all() and np.isfinite(d_fake).all()):
        raise FloatingPointError("non-finite discriminator scores")
    loss_d = 0.5 * float(np.mean((d_real - 1.0) ** 2)) \
        + 0.5 * float(np.mean(d_fake ** 2))
    loss_g = float(np.mean((d_fake - 1.0) ** 2))
    return loss_d, loss_g


def _nce_loss_grad(q, k, tau):
    """InfoNCE over one (P, d) block; positive for row j is k[j].

    Returns (loss, dloss/dq); k is treated as constant.
    """
    p = q.shape[0]
    logits = (q @ k.T) / tau
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    z = ex.sum(axis=1, keepdims=True)
    log_softmax_diag = (logits - m - np.log(z)).diagonal()
    loss = float(-log_softmax_diag.mean())
    soft = ex / z
    dlogits = (soft - np.eye(p, dtype=q.dtype)) / p
    return loss, (dlogits @ k) / tau


def patch_nce_loss(query, keys, tau):
    """Contrastive patch loss averaged over locations and layers."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if len(query.layers) != len(keys.layers):
        raise ContractError("query/key stacks have different layer counts")
    total = 0.0
    for q, k in zip(query.layers, keys.layers):
        if q.shape != k.shape:
            raise ContractError(
                f"misaligned stacks: {q.shape} vs {k.shape}")
        total += _nce_loss_grad(q, k, tau)[0]
    return total / len(query.layers)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    lambda_nce: float = 1.0
    tau: float = 0.07
    n_locations: int = 64
    checkpoint_every: int = 0    # 0 -> iters // 4


def _nce_term(gen, heads, out_img, in_img, location_ids, tau, lambda_nce):
    """NCE between encoder features of out_img (query) and in_img (keys).

    Returns (loss, grad wrt out_img); accumulates head/encoder grads.
    """
    q_feats, q_cache = gen.encode(out_img)
    k_feats, _ = gen.encode(in_img)
    q_proj, q_pcache = heads.project(q_feats, location_ids)
    k_proj, _ = heads.project(k_feats, location_ids)

    n_layers = len(q_proj)
    n = out_img.shape[0]
    loss = 0.0
    grads = []
    for ql, kl in zip(q_proj, k_proj):
        gq = np.empty_like(ql)
        for i in range(n):
            li, gqi = _nce_loss_grad(ql[i], kl[i], tau)
            loss += li / (n * n_layers)
            gq[i] = gqi / (n * n_layers)
        grads.append(gq * lambda_nce)
    gfeats = heads.project_backward(grads, q_pcache)
    g_img = gen.encode_backward(gfeats, q_cache)
    return loss, g_img


def train_translator(gen, disc, source, target, iters, batch, seed,
                     heads=None, cfg=None, out_path=None, log_fn=None,
                     index_log=None):
    """Alternating LSGAN + patch-NCE training; deterministic given seed.

    Returns a checkpoint dict {gen, disc, heads, meta}. Loss history rides
    in meta. index_log, when given, collects every (source_idx, target_idx)
    draw for pairing-independence audits.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("source and target manifests must be nonempty")
    cfg = cfg or TrainConfig()
    if heads is None:
        heads = FeatureHeads(gen.tap_channels, seed=seed + 1)
    src = to_nchw(load_manifest_images(source))
    tgt = to_nchw(load_manifest_images(target))
    size = src.shape[2]
    tap_hw = [size * size, (size // 2) ** 2, (size // 4) ** 2]

    rng = np.random.default_rng(seed)
    opt_g = Adam(gen.parameters() + heads.parameters(), cfg.lr, cfg.betas)
    opt_d = Adam(disc.parameters(), cfg.lr, cfg.betas)
    history = {"loss_d": [], "loss_g_adv": [], "loss_nce": []}
    every = cfg.checkpoint_every or max(1, iters // 4)

    for it in range(iters):
        # linear decay to zero over the second half of training
        frac = (it / iters) if iters else 0.0
        lr = cfg.lr * min(1.0, 2.0 * (1.0 - frac))
        opt_g.lr = lr
        opt_d.lr = lr

        si = rng.integers(0, src.shape[0], size=batch)
        ti = rng.integers(0, tgt.shape[0], size=batch)
        if index_log is not None:
            index_log.extend(zip(si.tolist(), ti.tolist()))
        location_ids = [rng.permutation(hw)[:min(cfg.n_locations, hw)]
                        for hw in tap_hw]
        x = src[si]
        y = tgt[ti]

        fake, g_cache = gen.forward(x)

        # discriminator step
        d_real, dr_cache = disc.forward(y)
        d_fake, df_cache = disc.forward(fake)
        loss_d, _ = adv_losses(d_real, d_fake)
        disc.zero_grad()
        disc.backward((d_real - 1.0) / d_real.size, dr_cache)
        disc.backward(d_fake / d_fake.size, df_cache)
        opt_d.step()

        # generator step: adversarial term (recomputed scores) + NCE terms
        gen.zero_grad()
        heads.zero_grad()
        d_fake2, df2_cache = disc.forward(fake)
        _, loss_g_adv = adv_losses(d_real, d_fake2)
        disc.zero_grad()  # discriminator is fixed during the generator step
        g_fake = disc.backward(2.0 * (d_fake2 - 1.0) / d_fake2.size, df2_cache)
        disc.zero_grad()

        nce_x, g_fake_nce = _nce_term(gen, heads, fake, x, location_ids,
                                      cfg.tau, cfg.lambda_nce)
        idt, idt_cache = gen.forward(y)
        nce_y, g_idt = _nce_term(gen, heads, idt, y, location_ids,
                                 cfg.tau, cfg.lambda_nce)
        gen.backward(g_fake + g_fake_nce, g_cache)
        gen.backward(g_idt, idt_cache)
        opt_g.step()

        history["loss_d"].append(loss_d)
        history["loss_g_adv"].append(loss_g_adv)
        history["loss_nce"].append(nce_x + nce_y)
        if log_fn is not None:
            log_fn(it, loss_d, loss_g_adv, nce_x + nce_y)
        if out_path is not None and (it + 1) % every == 0:
            save_translator(out_path, gen, disc, heads, history)

    ckpt = {"gen": gen.state_dict(), "disc": disc.state_dict(),
            "heads": heads.state_dict(),
            "meta": _translator_meta(gen, disc, heads, history)}
    if out_path is not None:
        save_translator(out_path, gen, disc, heads, history)
    return ckpt


def _translator_meta(gen, disc, heads, history):
    return {
        "kind": "translator",
        "gen_base": gen.base,
        "n_res_blocks": gen.n_res_blocks,
        "head_dim": heads.dim,
        "history": {k: [float(v) for v in vs] for k, vs in history.items()},
    }


def save_translator(path, gen, disc, heads, history=None):
    meta = _translator_meta(gen, disc, heads, history or {})
    save_checkpoint(path, {"gen": gen.state_dict(),
                           "disc": disc.state_dict(),
                           "heads": heads.state_dict()}, meta)


def load_translator(path):
    states, meta = load_checkpoint(path)
    gen = GeneratorModel(base=meta["gen_base"],
                         n_res_blocks=meta["n_res_blocks"])
    disc = DiscriminatorModel(base=meta["gen_base"])
    heads = FeatureHeads(gen.tap_channels, dim=meta["head_dim"])
    gen.load_state_dict(states["gen"])
    disc.load_state_dict(states["disc"])
    heads.load_state_dict(states["heads"])
    return gen, disc, heads, meta


def stylize(gen, img):
    """One forward pass on a single (H, W, 3) image in [-1, 1]."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    y, _ = gen.forward(to_nchw(arr))
    return y[0].transpose(1, 2, 0)


def stylize_batch(gen, imgs):
    y, _ = gen.forward(to_nchw(imgs))
    return np.ascontiguousarray(y.transpose(0, 2, 3, 1))
