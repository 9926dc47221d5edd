"""Video snapshot compressive imaging with ADMM deep unfolding."""
