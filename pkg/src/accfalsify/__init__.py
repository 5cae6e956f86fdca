"""Adversarial maneuver discovery for adaptive-cruise-control platoons.

A deterministic longitudinal platoon simulator, a quantitative temporal
logic monitor, parametric and free-form attack-signal families, black-box
global optimizers (Bayesian optimization and cross-entropy), and post-hoc
analysis of discovered maneuvers, served over HTTP with a thin CLI client.
"""

__version__ = "0.1.0"
