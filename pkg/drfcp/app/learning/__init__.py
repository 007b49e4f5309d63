"""
Numerical core: datasets, dense networks, deep regression forests, CART
forests, inductive conformal prediction and evaluation metrics.
"""
