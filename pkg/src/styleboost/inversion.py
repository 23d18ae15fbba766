"""Learning style token embeddings against a frozen denoiser.

The vocabulary is a flat embedding table over a small word list plus M
contiguous learnable slot rows for the placeholder token ``T_*``. Prompts
are whitespace-tokenized; the placeholder expands to its M rows. Only the
slot rows move during inversion.
"""

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import load_manifest_images
from .errors import ConfigError, ContractError, VocabularyError
from .imaging import to_nchw
from .nn import SGD, Parameter

PLACEHOLDER = "T_*"

BASE_WORDS = [
    "a", "an", "picture", "rendering", "portrait", "painting", "image",
    "photo", "face", "person", "in", "the", "style", "of", "sketch",
    "drawing", "artfilter",
]

DEFAULT_TEMPLATES = (
    "a picture in the style of {style}",
    "a rendering in the style of {style}",
    "a portrait in the style of {style}",
    "a painting in the style of {style}",
    "an image in the style of {style}",
)

# captions used when pretraining the denoiser on the plain/stylized corpora
SOURCE_CAPTIONS = (
    "a photo of a person",
    "a picture of a person",
    "a portrait of a person",
)
STYLE_PRETRAIN_CAPTION = "a portrait in the style of artfilter"

WORD_INIT_SCALE = 0.35
SLOT_INIT_NOISE = 0.02


@dataclass
class Vocabulary:
    words: list[str]
    embeddings: np.ndarray       # (n_rows, dim); slot rows are the last M
    learnable_mask: np.ndarray   # (n_rows,) bool, True exactly on slot rows
    n_slots: int

    def __post_init__(self):
        self._index = {w: i for i, w in enumerate(self.words)}

    @property
    def dim(self):
        return self.embeddings.shape[1]

    @property
    def slot_rows(self):
        n = self.embeddings.shape[0]
        return np.arange(n - self.n_slots, n)

    def copy(self):
        return Vocabulary(list(self.words), self.embeddings.copy(),
                          self.learnable_mask.copy(), self.n_slots)

    def frozen_hash(self):
        import hashlib
        frozen = self.embeddings[~self.learnable_mask]
        return hashlib.sha256(np.ascontiguousarray(frozen).tobytes()).hexdigest()

    def with_slots(self, vectors):
        out = self.copy()
        if vectors.shape != (self.n_slots, self.dim):
            raise ValueError(f"slot block must be {(self.n_slots, self.dim)}")
        out.embeddings[out.slot_rows] = vectors
        return out

    def with_random_slots(self, seed):
        rng = np.random.default_rng(seed)
        vecs = (rng.standard_normal((self.n_slots, self.dim))
                * WORD_INIT_SCALE).astype(self.embeddings.dtype)
        return self.with_slots(vecs)


def build_vocabulary(cond_dim, n_slots, seed, init_word="style",
                     dtype=np.float32):
    if n_slots < 1:
        raise ConfigError("need at least one placeholder slot")
    rng = np.random.default_rng(seed)
    table = (rng.standard_normal((len(BASE_WORDS), cond_dim))
             * WORD_INIT_SCALE).astype(dtype)
    base = table[BASE_WORDS.index(init_word)]
    slots = base[None] + (rng.standard_normal((n_slots, cond_dim))
                          * SLOT_INIT_NOISE).astype(dtype)
    words = BASE_WORDS + [PLACEHOLDER]
    emb = np.vstack([table, slots.astype(dtype)])
    mask = np.zeros(emb.shape[0], dtype=bool)
    mask[-n_slots:] = True
    return Vocabulary(words, emb, mask, n_slots)


def encode_prompt(vocab, prompt):
    """Token-embedding sequence for a prompt; the placeholder contributes
    its M slot rows in order."""
    rows = []
    for tok in prompt.split():
        if tok == PLACEHOLDER:
            rows.extend(vocab.slot_rows)
        else:
            if tok not in vocab._index:
                raise VocabularyError(tok)
            rows.append(vocab._index[tok])
    if not rows:
        raise VocabularyError("empty prompt")
    return vocab.embeddings[np.array(rows)].copy()


@dataclass
class PromptTemplateSet:
    templates: list[str] = field(
        default_factory=lambda: list(DEFAULT_TEMPLATES))

    def __post_init__(self):
        if not self.templates:
            raise ConfigError("template set is empty")
        for t in self.templates:
            if t.count("{style}") != 1:
                raise ConfigError(f"template needs exactly one slot: {t!r}")

    def choose(self, rng):
        i = int(rng.integers(0, len(self.templates)))
        return self.templates[i].format(style=PLACEHOLDER)


def sample_template_prompt(templates, rng_seed):
    return templates.choose(np.random.default_rng(rng_seed))


def caption_for_entry(entry, rng):
    if entry.provenance == "style":
        return STYLE_PRETRAIN_CAPTION
    i = int(rng.integers(0, len(SOURCE_CAPTIONS)))
    return SOURCE_CAPTIONS[i]


def invert_style(model, vocab, style_set, templates, iters, seed, sched,
                 lr=0.5, log_fn=None):
    """Optimize the M slot embeddings on the diffusion noise-MSE loss.

    Plain SGD, batch size 1. The denoiser must be frozen; everything except
    the slot rows is bit-unchanged on return.
    """
    if not model.frozen:
        raise ContractError("invert_style requires a frozen denoiser")
    if len(style_set) == 0:
        raise ValueError("style set is empty")
    out = vocab.copy()
    images = to_nchw(load_manifest_images(style_set))
    rng = np.random.default_rng(seed)
    slots = Parameter(out.embeddings[out.slot_rows])
    opt = SGD([slots], lr=lr)

    for it in range(iters):
        idx = int(rng.integers(0, images.shape[0]))
        prompt = templates.choose(rng)
        t = int(rng.integers(1, sched.n_steps + 1))
        eps = rng.standard_normal(images.shape[1:], dtype=np.float32)

        out.embeddings[out.slot_rows] = slots.data
        emb = encode_prompt(out, prompt)
        seq_len = emb.shape[0]
        cond = emb.mean(axis=0, keepdims=True)
        ab = sched.alpha_bars[t]
        x_t = (np.float32(np.sqrt(ab)) * images[idx:idx + 1]
               + np.float32(np.sqrt(1.0 - ab)) * eps[None])

        eps_hat, cache = model.forward(x_t, np.array([t]), cond)
        diff = eps_hat - eps[None]
        loss = float(np.mean(diff * diff))
        model.zero_grad()
        _, gcond = model.backward((2.0 / diff.size) * diff, cache)
        # mean pooling: each slot row got weight 1/seq_len
        opt.zero_grad()
        slots.grad += gcond[0] / seq_len
        opt.step()
        if log_fn is not None:
            log_fn(it, loss)

    out.embeddings[out.slot_rows] = slots.data
    model.zero_grad()
    return out


def save_style_embedding(path, vocab):
    meta = {"kind": "style_embedding", "token": PLACEHOLDER,
            "n_slots": int(vocab.n_slots), "dim": int(vocab.dim)}
    save_checkpoint(path, {"slots": {"vectors": vocab.embeddings[vocab.slot_rows]}},
                    meta)


def load_style_embedding(path, vocab):
    states, meta = load_checkpoint(path)
    if meta["n_slots"] != vocab.n_slots or meta["dim"] != vocab.dim:
        raise ConfigError("embedding file does not match vocabulary shape")
    return vocab.with_slots(states["slots"]["vectors"])
