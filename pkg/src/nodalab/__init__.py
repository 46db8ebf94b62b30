"""Nodal partitions, partition energies and their Morse indices on 2D domains."""

__version__ = "0.1.0"
