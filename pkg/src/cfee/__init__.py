"""Energy-efficient downlink power allocation for cell-free massive MIMO with a
permutation-equivariant graph neural network trained without labels."""

__version__ = "0.1.0"
