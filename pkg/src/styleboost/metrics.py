"""Evaluation: Fréchet distance between feature Gaussians and a layerwise
perceptual distance, on top of a small frozen feature extractor.

The extractor is pretrained once per run on a 10-way head-hue binning task
over freshly generated faces, then frozen; its content hash is recorded in
every report so numbers are only compared within one extractor.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import FaceParams, gen_source_image
from .diffusion import load_manifest_images
from .errors import IntegrityError
from .guidance import FIXED_PROMPT, gis
from .imaging import to_nchw
from .nn import Adam, Conv2d, GroupNorm, Linear, Module, ReLU
from .translator import stylize_batch

EXTRACTOR_SEED_OFFSET = 3_000_000
N_HUE_BINS = 10


class FeatureExtractor(Module):
    """Three conv blocks; pooled final activation is the feature vector."""

    def __init__(self, base=16, feature_dim=32, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.base = base
        self.feature_dim = feature_dim
        self.conv1 = Conv2d(3, base, rng=rng, dtype=dtype)
        self.gn1 = GroupNorm(4, base, dtype=dtype)
        self.conv2 = Conv2d(base, 2 * base, stride=2, rng=rng, dtype=dtype)
        self.gn2 = GroupNorm(4, 2 * base, dtype=dtype)
        self.conv3 = Conv2d(2 * base, feature_dim, stride=2, rng=rng,
                            dtype=dtype)
        self.gn3 = GroupNorm(4, feature_dim, dtype=dtype)
        self.act = ReLU()
        self.head = Linear(feature_dim, N_HUE_BINS, rng=rng, dtype=dtype)

    def taps(self, x):
        """Per-block activation maps (used by the perceptual distance)."""
        h = x
        out = []
        for conv, gn in ((self.conv1, self.gn1), (self.conv2, self.gn2),
                         (self.conv3, self.gn3)):
            h, _ = conv.forward(h)
            h, _ = gn.forward(h)
            h, _ = self.act.forward(h)
            out.append(h)
        return out

    def features(self, x):
        """Pooled feature vectors, (N, feature_dim)."""
        return self.taps(x)[-1].mean(axis=(2, 3))

    def forward_logits(self, x):
        caches = []
        h = x
        for conv, gn in ((self.conv1, self.gn1), (self.conv2, self.gn2),
                         (self.conv3, self.gn3)):
            h, c1 = conv.forward(h)
            h, c2 = gn.forward(h)
            h, c3 = self.act.forward(h)
            caches.append((c1, c2, c3))
        pooled_shape = h.shape
        logits, c_head = self.head.forward(h.mean(axis=(2, 3)))
        return logits, (caches, pooled_shape, c_head)

    def backward_logits(self, glogits, cache):
        caches, pooled_shape, c_head = cache
        g = self.head.backward(glogits, c_head)
        n, c, h, w = pooled_shape
        g = np.broadcast_to(g[:, :, None, None] / (h * w),
                            pooled_shape).astype(glogits.dtype)
        for (c1, c2, c3), conv, gn in zip(
                reversed(caches),
                (self.conv3, self.conv2, self.conv1),
                (self.gn3, self.gn2, self.gn1)):
            g = self.act.backward(g, c3)
            g = gn.backward(g, c2)
            g = conv.backward(g, c1)
        return g


def hue_bin(seed, size):
    params = FaceParams.from_seed(seed, size)
    return int(params.head_hue / (2.0 * np.pi) * N_HUE_BINS) % N_HUE_BINS


def train_extractor(size, root_seed, steps=400, n_train=512, batch=32,
                    lr=2e-3, seed=0, base=16, feature_dim=32, log_fn=None):
    """One-time pretraining on the synthetic attribute task, then freeze."""
    seeds = root_seed + EXTRACTOR_SEED_OFFSET + np.arange(n_train)
    images = to_nchw(np.stack([gen_source_image(int(s), size) for s in seeds]))
    labels = np.array([hue_bin(int(s), size) for s in seeds])
    model = FeatureExtractor(base=base, feature_dim=feature_dim, seed=seed)
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr)
    for step in range(steps):
        idx = rng.integers(0, n_train, size=batch)
        logits, cache = model.forward_logits(images[idx])
        m = logits.max(axis=1, keepdims=True)
        ex = np.exp(logits - m)
        p = ex / ex.sum(axis=1, keepdims=True)
        y = labels[idx]
        loss = float(-np.log(p[np.arange(batch), y] + 1e-12).mean())
        gl = p.copy()
        gl[np.arange(batch), y] -= 1.0
        model.zero_grad()
        model.backward_logits(gl / batch, cache)
        opt.step()
        if log_fn is not None:
            log_fn(step, loss)
    return model


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray


def fit_stats(features):
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError("need at least 2 feature vectors")
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (feats.shape[0] - 1)
    return GaussianStats(mu, 0.5 * (sigma + sigma.T))


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a, b):
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross term uses the eigendecomposition of the symmetrized product
    S_a^(1/2) S_b S_a^(1/2) with negative eigenvalues clipped at zero.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError("dimension mismatch between Gaussian stats")
    half = _psd_sqrt(a.sigma)
    inner = half @ b.sigma @ half
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    d = float(((a.mu - b.mu) ** 2).sum()
              + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_sqrt)
    return max(d, 0.0)


def perceptual_distance(x, y, extractor):
    """Mean squared difference of channel-unit-normalized activations,
    averaged over the extractor's blocks. Symmetric, zero iff equal."""
    if np.shape(x) != np.shape(y):
        raise ValueError("shape mismatch between images")
    tx = extractor.taps(to_nchw(x))
    ty = extractor.taps(to_nchw(y))
    total = 0.0
    for fx, fy in zip(tx, ty):
        nx = fx / (np.sqrt((fx * fx).sum(axis=1, keepdims=True)) + 1e-10)
        ny = fy / (np.sqrt((fy * fy).sum(axis=1, keepdims=True)) + 1e-10)
        total += float(((nx - ny) ** 2).mean())
    return total / len(tx)


def perceptual_distances(xs, ys, extractor, batch=64):
    out = []
    for i in range(0, len(xs), batch):
        for x, y in zip(xs[i:i + batch], ys[i:i + batch]):
            out.append(perceptual_distance(x, y, extractor))
    return np.array(out)


def features_for_images(extractor, images, batch=64):
    arr = to_nchw(images)
    feats = [extractor.features(arr[i:i + batch])
             for i in range(0, arr.shape[0], batch)]
    return np.concatenate(feats, axis=0)


@dataclass
class MetricReport:
    fid_by_reference: dict
    mean_lpips: float
    n_eval: int
    extractor_hash: str

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


def _reference_cache_key(mode, t0, n, seed_base, model_hash, extractor_hash):
    payload = f"{mode}|{t0}|{n}|{seed_base}|{model_hash}|{extractor_hash}"
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def build_fid_reference(model, vocab, guide_manifest, t0, n, seed_base, sched,
                        extractor, mode=None, cache_dir=None,
                        forbidden_seeds=None, log_fn=None):
    """Gaussian stats of n guided generations at factor t0.

    Guides cycle k = i mod |manifest|; generation seeds are seed_base + i.
    Stats are cached by (mode, t0, n, seed_base, model hash, extractor hash).
    """
    if mode is None:
        mode = "self" if guide_manifest.entries[0].provenance == "style" else "cross"
    seeds = seed_base + np.arange(1, n + 1)
    if forbidden_seeds is not None:
        overlap = set(seeds.tolist()) & set(forbidden_seeds)
        if overlap:
            raise IntegrityError(
                f"reference seeds overlap training seeds: {sorted(overlap)[:5]}")
    cache_path = None
    if cache_dir is not None:
        key = _reference_cache_key(mode, t0, n, seed_base, model.param_hash(),
                                   extractor.param_hash())
        cache_path = Path(cache_dir) / f"ref_{mode}_{t0}_{key}.npz"
        if cache_path.exists():
            with np.load(cache_path) as data:
                return GaussianStats(data["mu"], data["sigma"])

    guides = load_manifest_images(guide_manifest)
    n_guides = guides.shape[0]
    images = []
    for i in range(1, n + 1):
        img = gis(model, vocab, guides[i % n_guides], t0, FIXED_PROMPT,
                  seed=int(seeds[i - 1]), sched=sched)
        images.append(img)
        if log_fn is not None:
            log_fn(i, n)
    stats = fit_stats(features_for_images(extractor, np.stack(images)))
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cache_path, mu=stats.mu, sigma=stats.sigma)
    return stats


def evaluate(gen, test_set, references, extractor, batch=64):
    """Stylize every test image; FID against each named reference plus the
    mean input-output perceptual distance."""
    inputs = load_manifest_images(test_set)
    outputs = np.concatenate([
        stylize_batch(gen, inputs[i:i + batch])
        for i in range(0, len(inputs), batch)])
    feats = features_for_images(extractor, outputs)
    out_stats = fit_stats(feats)
    fids = {name: frechet_distance(out_stats, ref)
            for name, ref in references.items()}
    lpips = float(np.mean(perceptual_distances(inputs, outputs, extractor)))
    return MetricReport(fid_by_reference=fids, mean_lpips=lpips,
                        n_eval=len(inputs),
                        extractor_hash=extractor.param_hash())


def save_extractor(path, model):
    meta = {"kind": "extractor", "base": model.base,
            "feature_dim": model.feature_dim}
    save_checkpoint(path, {"extractor": model.state_dict()}, meta)


def load_extractor(path):
    states, meta = load_checkpoint(path)
    model = FeatureExtractor(base=meta["base"],
                             feature_dim=meta["feature_dim"])
    model.load_state_dict(states["extractor"])
    return model
