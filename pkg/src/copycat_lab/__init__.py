"""Desk-scale lab for the copycat problem in behavioral cloning from
observation histories, with a target-conditioned adversary and an
information bottleneck as the remedy."""

__version__ = "0.1.0"
