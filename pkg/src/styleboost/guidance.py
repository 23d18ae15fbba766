"""Guided image synthesis and style-set augmentation.

A guided generation starts the reverse process from a noised copy of a
guide image; the guidance factor t0 in (0, 1] sets how much noise is applied
(t0 = 1 degenerates to unconditional sampling, t0 = 0 returns the guide).
Augmentation sets draw guide k = i mod |guides| and seed r = i for sample
i = 1..N, so every record is reproducible from its row alone.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .diffusion import add_noise, sample
from .errors import ConfigError, IntegrityError
from .imaging import load_image, save_image
from .inversion import encode_prompt
from .manifest import DatasetManifest, ManifestEntry, merge_manifests

FIXED_PROMPT = "a portrait in the style of T_*"


@dataclass
class GuidanceSpec:
    t0: float
    mode: str                      # self | cross
    n_samples: int
    guide_manifest: DatasetManifest
    prompt: str = FIXED_PROMPT

    def __post_init__(self):
        if not 0.0 < self.t0 <= 1.0:
            raise ConfigError(f"t0 must be in (0, 1], got {self.t0}")
        if self.mode not in ("self", "cross"):
            raise ConfigError(f"mode must be self|cross, got {self.mode!r}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if len(self.guide_manifest) == 0:
            raise ConfigError("guide manifest is empty")


@dataclass
class AugmentationRecord:
    index: int
    guide_index: int
    t0: float
    seed: int
    prompt: str
    image_path: str


def start_step(t0, n_steps):
    """Map a continuous guidance factor onto a discrete start step
    (round half up, at least 1 for any positive t0)."""
    if t0 == 0.0:
        return 0
    return max(1, int(np.floor(t0 * n_steps + 0.5)))


def gis(model, vocab, guide, t0, prompt, seed, sched):
    """Guided image synthesis; pure function of its arguments."""
    if not 0.0 <= t0 <= 1.0:
        raise ValueError(f"t0 must be in [0, 1], got {t0}")
    if t0 == 0.0:
        return np.array(guide, copy=True)
    cond = encode_prompt(vocab, prompt)
    start_t = start_step(t0, sched.n_steps)
    if t0 == 1.0:
        return sample(model, cond, sched, seed, start_t)
    size = model.image_size
    rng = np.random.default_rng(seed)
    # draw #1 of the seed's stream, laid out channel-first like the sampler's
    eps = rng.standard_normal((3, size, size),
                              dtype=np.float32).transpose(1, 2, 0)
    x_start = add_noise(guide, start_t, eps, sched).astype(np.float32)
    return sample(model, cond, sched, seed, start_t, x_start)


def _load_existing_records(path):
    if not path.exists():
        return {}
    records = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = AugmentationRecord(**json.loads(line))
                records[rec.index] = rec
    return records


def build_aug_set(model, vocab, spec, sched, out_dir, log_fn=None):
    """Generate spec.n_samples guided images into out_dir; resumable."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    existing = _load_existing_records(manifest_path)

    guide_paths = spec.guide_manifest.paths()
    guides = {}
    records = []
    n_guides = len(guide_paths)
    for i in range(1, spec.n_samples + 1):
        k = i % n_guides
        expected = AugmentationRecord(
            index=i, guide_index=k, t0=spec.t0, seed=i, prompt=spec.prompt,
            image_path=f"aug_{i:06d}.png")
        prev = existing.get(i)
        if prev is not None and prev != expected:
            raise IntegrityError(
                f"existing record {i} disagrees with the build laws: {prev}")
        img_file = out_dir / expected.image_path
        if prev is None or not img_file.exists():
            if k not in guides:
                try:
                    guides[k] = load_image(guide_paths[k])
                except OSError as e:
                    raise IOError(
                        f"record {i}: cannot read guide {guide_paths[k]}") from e
            img = gis(model, vocab, guides[k], spec.t0, spec.prompt,
                      seed=expected.seed, sched=sched)
            save_image(img, img_file)
            if log_fn is not None:
                log_fn(i, spec.n_samples)
        records.append(expected)

    with open(manifest_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
    return records


def records_to_manifest(records, mode, out_dir):
    provenance = "self_aug" if mode == "self" else "cross_aug"
    entries = [ManifestEntry(r.image_path, "train", r.seed, provenance,
                             r.t0, r.guide_index) for r in records]
    return DatasetManifest(Path(out_dir), entries)


def load_aug_manifest(out_dir, mode):
    records = _load_existing_records(Path(out_dir) / "manifest.jsonl")
    ordered = [records[i] for i in sorted(records)]
    return records_to_manifest(ordered, mode, out_dir)


def assemble_target_set(style, self_sets, cross_sets, root=None):
    """Disjoint union of the style set and all augmentation sets."""
    parts = [style] + list(self_sets) + list(cross_sets)
    if root is None:
        import os
        root = os.path.commonpath([str(Path(m.root).resolve()) for m in parts])
    merged = merge_manifests(root, parts)
    expected = sum(len(m) for m in parts)
    if len(merged) != expected:
        raise IntegrityError("augmented set lost entries during merge")
    return merged
