"""Desk-scale lab for switch-routed cross-modal distillation."""

__version__ = "0.1.0"
