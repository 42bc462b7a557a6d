"""Nonsmooth first-order methods, subgradient trajectories and critical-set checks."""
