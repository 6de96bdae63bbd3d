"""
Package initialization for src module.
"""

__version__ = "0.1.0"
__author__ = "factorlab developers"
__description__ = "Factor point processes and balancing allocations on the flat torus"
