"""MolDiff backend: chemistry, encoders, graph VAE, latent diffusion, metrics and the training pipeline."""
