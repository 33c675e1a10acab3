"""Compose adversarial attacks from interchangeable components and measure them against their Pareto envelope."""

__version__ = "0.1.0"
