"""Microgrid resilience toolkit.

Simulates an islandable feeder under storm-induced outages and trains a
cooperative multi-agent storage dispatch policy against rule-based,
single-agent and perfect-foresight baselines.
"""

__version__ = "0.1.0"
