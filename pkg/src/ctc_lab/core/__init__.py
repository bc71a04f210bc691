"""
Core utilities: settings, config files, logging, errors and metrics.
"""
