"""Staked space-domain-awareness chain simulator.

A deterministic, seedable implementation of the full pipeline: tracking
data message (TDM) submission with stakes, validator-side orbit
verification, proof-of-stake rewards and slashing, federated learning of
a propagation-residual model, and on-chain sustainability scoring.
"""

__version__ = "0.1.0"
