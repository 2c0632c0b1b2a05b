"""
Data generation and loading utilities.
"""

