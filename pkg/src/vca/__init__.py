"""Multi-round latent co-adaptation: denoising dynamics, rewards, preference scoring,
low-rank adaptation, convergence and Pareto checks, and a synthetic dialogue simulator."""

__version__ = "0.1.0"
