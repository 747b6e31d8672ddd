"""Flow Density Control: fine-tune flow-matching models toward non-linear
distributional utilities (tail risk, entropy, experiment design) under
divergence regularization, via mirror-descent outer steps and an adjoint
regression inner solver."""

__version__ = "0.1.0"
