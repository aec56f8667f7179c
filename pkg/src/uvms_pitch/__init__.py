"""Simulation of a small underwater vehicle with a four-joint arm, and GRU
forecasters of the vehicle pitch the arm's motion induces."""

__version__ = "0.1.0"
