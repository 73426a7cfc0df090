"""
Tests package for Torus Flow Lab.
"""
