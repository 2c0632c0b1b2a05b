"""
Numerical core: autodiff tensors, layers, the searchable supernet, path
sampling, latency modelling and the deep-to-shallow transformation.
"""
