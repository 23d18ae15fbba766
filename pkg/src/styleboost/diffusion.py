"""Small conditional denoising diffusion model in pixel space.

Discrete ancestral sampler over a linear variance schedule; the denoiser is
a two-scale UNet conditioned on a pooled prompt embedding through per-block
feature-wise affine modulation.

Noise-draw order for a generation seeded with s: draw #1 is always one
full-image standard normal - used directly as x_T when sampling starts from
pure noise, or reserved for the guide-noising epsilon when a caller supplies
x_start (the draw is burned so both modes share one stream layout). Then one
draw per reverse step, highest t first; the final t=1 step draws nothing.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError
from .imaging import load_image, to_nchw
from .nn import Conv2d, GroupNorm, Linear, Module, SiLU, Adam


@dataclass
class NoiseSchedule:
    n_steps: int
    betas: np.ndarray        # length n_steps, betas[i] for step t = i + 1
    alpha_bars: np.ndarray   # length n_steps + 1, alpha_bars[0] == 1

    def beta(self, t):
        return self.betas[t - 1]


def make_schedule(n_steps, beta_min, beta_max):
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(
            f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, n_steps, dtype=np.float64)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(n_steps, betas, alpha_bars)


def add_noise(x0, t, eps, sched):
    if not 0 <= t <= sched.n_steps:
        raise ValueError(f"t={t} outside [0, {sched.n_steps}]")
    if np.shape(eps) != np.shape(x0):
        raise ValueError("eps shape must match x0")
    ab = sched.alpha_bars[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t, t, eps_hat, sched):
    if t < 1:
        raise ValueError("predict_x0 needs t >= 1")
    ab = sched.alpha_bars[t]
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def sinusoidal_table(n_positions, dim, dtype=np.float32):
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = np.arange(n_positions)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(dtype)


class FiLMBlock(Module):
    """Residual conv block modulated by an embedding: x + silu(film(gn(conv(x))))."""

    def __init__(self, channels, emb_dim, groups=4, rng=None, dtype=np.float32):
        self.conv = Conv2d(channels, channels, rng=rng, dtype=dtype)
        self.gn = GroupNorm(groups, channels, dtype=dtype)
        self.film = Linear(emb_dim, 2 * channels, rng=rng, dtype=dtype)
        self.act = SiLU()

    def forward(self, x, e):
        h, c_conv = self.conv.forward(x)
        hn, c_gn = self.gn.forward(h)
        sb, c_film = self.film.forward(e)
        c = hn.shape[1]
        s = sb[:, :c, None, None]
        b = sb[:, c:, None, None]
        f = hn * (1.0 + s) + b
        ha, c_act = self.act.forward(f)
        return x + ha, (c_conv, c_gn, c_film, hn, s, c_act)

    def backward(self, gy, cache):
        c_conv, c_gn, c_film, hn, s, c_act = cache
        gf = self.act.backward(gy, c_act)
        gs = (gf * hn).sum(axis=(2, 3))
        gb = gf.sum(axis=(2, 3))
        ge = self.film.backward(np.concatenate([gs, gb], axis=1), c_film)
        ghn = gf * (1.0 + s)
        gh = self.gn.backward(ghn, c_gn)
        gx = gy + self.conv.backward(gh, c_conv)
        return gx, ge


class DenoiserModel(Module):
    """Two-scale conditional UNet predicting the noise residual."""

    def __init__(self, image_size=32, base=16, cond_dim=16, emb_dim=32,
                 n_steps=100, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.image_size = image_size
        self.base = base
        self.cond_dim = cond_dim
        self.emb_dim = emb_dim
        self.n_steps = n_steps
        self.frozen = False
        self.t_table = sinusoidal_table(n_steps + 1, emb_dim, dtype)
        self.t_lin = Linear(emb_dim, emb_dim, rng=rng, dtype=dtype)
        self.c_lin = Linear(cond_dim, emb_dim, rng=rng, dtype=dtype)
        self.emb_act = SiLU()
        b = base
        self.c_in = Conv2d(3, b, rng=rng, dtype=dtype)
        self.blk1 = FiLMBlock(b, emb_dim, 4, rng, dtype)
        self.down = Conv2d(b, 2 * b, stride=2, rng=rng, dtype=dtype)
        self.blk2 = FiLMBlock(2 * b, emb_dim, 4, rng, dtype)
        self.blk3 = FiLMBlock(2 * b, emb_dim, 4, rng, dtype)
        self.up_conv = Conv2d(2 * b, b, rng=rng, dtype=dtype)
        self.merge = Conv2d(2 * b, b, rng=rng, dtype=dtype)
        self.blk4 = FiLMBlock(b, emb_dim, 4, rng, dtype)
        self.c_out = Conv2d(b, 3, rng=rng, dtype=dtype)

    def freeze(self):
        self.frozen = True
        return self

    def forward(self, x, t_idx, cond):
        """x: (N,3,H,W); t_idx: (N,) ints in [0, n_steps]; cond: (N, cond_dim)."""
        te, c_t = self.t_lin.forward(self.t_table[np.asarray(t_idx)])
        ce, c_c = self.c_lin.forward(cond.astype(te.dtype, copy=False))
        e, c_e = self.emb_act.forward(te + ce)

        h0, c_in = self.c_in.forward(x)
        h1, cb1 = self.blk1.forward(h0, e)
        hd, c_down = self.down.forward(h1)
        h2, cb2 = self.blk2.forward(hd, e)
        h3, cb3 = self.blk3.forward(h2, e)
        hu = h3.repeat(2, axis=2).repeat(2, axis=3)
        hup, c_up = self.up_conv.forward(hu)
        hcat = np.concatenate([hup, h1], axis=1)
        hm, c_merge = self.merge.forward(hcat)
        h4, cb4 = self.blk4.forward(hm, e)
        out, c_out = self.c_out.forward(h4)
        cache = (c_t, c_c, c_e, c_in, cb1, c_down, cb2, cb3, c_up, c_merge,
                 cb4, c_out, h3.shape)
        return out, cache

    def backward(self, gy, cache):
        """Returns (gx, gcond); parameter grads accumulate in place."""
        (c_t, c_c, c_e, c_in, cb1, c_down, cb2, cb3, c_up, c_merge,
         cb4, c_out, h3_shape) = cache
        b = self.base
        g4 = self.c_out.backward(gy, c_out)
        gm, ge = self.blk4.backward(g4, cb4)
        gcat = self.merge.backward(gm, c_merge)
        gup, gskip = gcat[:, :b], gcat[:, b:]
        ghu = self.up_conv.backward(gup, c_up)
        n, c2 = h3_shape[0], h3_shape[1]
        g3 = ghu.reshape(n, c2, h3_shape[2], 2, h3_shape[3], 2).sum(axis=(3, 5))
        g3, ge3 = self.blk3.backward(g3, cb3)
        ge += ge3
        g2, ge2 = self.blk2.backward(g3, cb2)
        ge += ge2
        g1 = self.down.backward(g2, c_down) + gskip
        g1, ge1 = self.blk1.backward(g1, cb1)
        ge += ge1
        gx = self.c_in.backward(g1, c_in)

        gte_ce = self.emb_act.backward(ge, c_e)
        self.t_lin.backward(gte_ce, c_t)
        gcond = self.c_lin.backward(gte_ce, c_c)
        return gx, gcond


def load_manifest_images(manifest):
    """Stack a manifest's images into an (N,H,W,3) float32 array."""
    root = Path(manifest.root)
    return np.stack([load_image(root / e.image_path) for e in manifest.entries])


def train_denoiser(model, data, embed_fn, sched, steps, seed, caption_fn,
                   batch=16, lr=2e-3, log_fn=None):
    """Epsilon-MSE training with uniform t; deterministic given seed.

    caption_fn(entry, rng) supplies the training prompt for a manifest entry;
    embed_fn turns the prompt into a token-embedding sequence, mean-pooled
    here into the conditioning vector.
    """
    if model.frozen:
        raise ContractError("denoiser is frozen; training is not allowed")
    if len(data) == 0:
        raise ValueError("training manifest is empty")
    images = to_nchw(load_manifest_images(data))
    n = images.shape[0]
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr)
    sqrt_ab = np.sqrt(sched.alpha_bars).astype(np.float32)
    sqrt_1ab = np.sqrt(1.0 - sched.alpha_bars).astype(np.float32)

    for step in range(steps):
        idx = rng.integers(0, n, size=batch)
        t = rng.integers(1, sched.n_steps + 1, size=batch)
        eps = rng.standard_normal(
            (batch,) + images.shape[1:], dtype=np.float32)
        cond = np.stack([
            embed_fn(caption_fn(data.entries[i], rng)).mean(axis=0)
            for i in idx]).astype(np.float32)
        x0 = images[idx]
        x_t = (sqrt_ab[t][:, None, None, None] * x0
               + sqrt_1ab[t][:, None, None, None] * eps)

        eps_hat, cache = model.forward(x_t, t, cond)
        diff = eps_hat - eps
        loss = float(np.mean(diff * diff))
        model.zero_grad()
        model.backward((2.0 / diff.size) * diff, cache)
        opt.step()
        if log_fn is not None:
            log_fn(step, loss)
    return model


def _reverse_loop(model, cond_vec, sched, start_t, x, rng):
    """Ancestral updates from start_t down to 1 on one NCHW image."""
    ab = sched.alpha_bars
    for t in range(start_t, 0, -1):
        eps_hat, _ = model.forward(x, np.array([t]), cond_vec[None])
        beta = float(sched.beta(t))
        coef = beta / float(np.sqrt(1.0 - ab[t]))
        mean = (x - coef * eps_hat) / float(np.sqrt(1.0 - beta))
        if t > 1:
            var = (1.0 - float(ab[t - 1])) / (1.0 - float(ab[t])) * beta
            z = rng.standard_normal(x.shape[1:], dtype=np.float32)
            x = (mean + float(np.sqrt(var)) * z[None]).astype(np.float32)
        else:
            x = mean.astype(np.float32)
    return x


def pool_embedding(embedding):
    return np.asarray(embedding, dtype=np.float32).mean(axis=0)


def sample(model, cond, sched, seed, start_t, x_start=None):
    """Reverse ancestral sampling; pure function of its arguments.

    cond is a token-embedding sequence (L, D), pooled internally. With
    x_start absent, start_t must equal n_steps and the image starts from the
    seed's draw #1; with x_start given, draw #1 is burned (see module
    docstring) and the loop starts from x_start.
    """
    if not 1 <= start_t <= sched.n_steps:
        raise ValueError(f"start_t={start_t} outside [1, {sched.n_steps}]")
    size = model.image_size
    rng = np.random.default_rng(seed)
    first = rng.standard_normal((3, size, size), dtype=np.float32)
    if x_start is None:
        if start_t != sched.n_steps:
            raise ValueError("x_start is required when start_t < n_steps")
        x = first[None]
    else:
        x = to_nchw(x_start)
    cond_vec = pool_embedding(cond)
    x = _reverse_loop(model, cond_vec, sched, start_t, x, rng)
    return np.clip(x[0].transpose(1, 2, 0), -1.0, 1.0)


def save_denoiser(path, model, sched):
    meta = {
        "kind": "denoiser",
        "image_size": model.image_size,
        "base": model.base,
        "cond_dim": model.cond_dim,
        "emb_dim": model.emb_dim,
        "n_steps": model.n_steps,
        "betas": sched.betas.tolist(),
    }
    save_checkpoint(path, {"denoiser": model.state_dict()}, meta)


def load_denoiser(path):
    states, meta = load_checkpoint(path)
    model = DenoiserModel(image_size=meta["image_size"], base=meta["base"],
                          cond_dim=meta["cond_dim"], emb_dim=meta["emb_dim"],
                          n_steps=meta["n_steps"])
    model.load_state_dict(states["denoiser"])
    betas = np.asarray(meta["betas"], dtype=np.float64)
    sched = NoiseSchedule(meta["n_steps"], betas,
                          np.concatenate([[1.0], np.cumprod(1.0 - betas)]))
    return model, sched
