"""Function-token laboratory.

Corpus statistics and function/content token classification, a toy
decoder-only LM with transition-group loss tracking, JumpReLU sparse
autoencoders, token-feature bipartite graphs and feature steering.
"""

__version__ = "0.1.0"
