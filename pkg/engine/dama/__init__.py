# Depth-aware low-rank adaptation engine
__version__ = "1.0.0"
