"""Few-shot face stylization: learn a style token on a small diffusion
model, expand the style set with guided generation, train a fast unpaired
translator on the result, and score it with Fréchet/perceptual metrics."""

__version__ = "0.1.0"
