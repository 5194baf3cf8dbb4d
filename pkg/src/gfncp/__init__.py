"""Order-consistent amortized clustering trained as a generative flow network over cluster assignments."""

__version__ = "0.1.0"
