"""Desk-scale wearable transdermal alcohol IoT stack."""

__version__ = "0.1.0"
