"""
Numerics, losses, estimators, evaluation and the experiment engine.
"""
