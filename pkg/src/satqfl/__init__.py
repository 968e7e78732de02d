"""Federated variational quantum learning over a LEO constellation.

Submodules: ``orbits`` (TLE parsing and propagation), ``access`` (visibility,
partitions, contact windows), ``quantumsim`` (statevector kernels), ``qfl``
(classifier, gradients, averaging), ``security`` (BB84, envelopes,
teleportation), ``scheduler`` (training rounds) and ``harness``
(experiments and CLI).
"""
from __future__ import annotations

__version__ = "0.1.0"
