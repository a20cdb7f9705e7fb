"""Neuro-adaptive tracking control with temporal-logic task monitoring."""

__version__ = "0.1.0"
