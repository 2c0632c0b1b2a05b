"""
Utilities package for the transformable NAS pipeline.

This package is organized into:
- utils.common: Config, logging, errors and artifact I/O used across the project
- utils.nas: Tensors, layers, search space, sampling, latency and transformation

All imports must use explicit paths:
- from utils.common import ...
- from utils.nas.<module> import ...
"""
