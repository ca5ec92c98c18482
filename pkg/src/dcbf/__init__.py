"""Desk-scale dense-contact barrier functions.

A deterministic planar pushing simulator, a small from-scratch neural network
stack, an object-centric learned barrier function with min-composition, data
collection and refinement loops, a sampling safety filter, baseline policies,
and an experiment harness.
"""

__version__ = "0.1.0"
