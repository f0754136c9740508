"""Slot-level Monte Carlo of a four-laser polarization BB84 link."""
