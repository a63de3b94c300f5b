"""
guidederain - Single-image deraining with a physical-model guided network.
"""

__version__ = "1.0.0"
