"""Sparse neural-network training in numpy: RigL, its baselines, sparsity
allocators, a FLOPs cost model and post-training analyses."""
__version__ = "0.1.0"
