"""Semi-supervised instruction following with a shared-latent sequence VAE.

Subpackages: autodiff (reverse-mode engine), nn (layers), gridworld
(environment + oracle), corpus (datasets), model (the VAE, baselines and
losses), pipelines (training loops), metrics (SR / BLEU / t-test), cli.
"""

__version__ = "0.1.0"
