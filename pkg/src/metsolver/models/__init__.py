"""Shipped reaction-network model files (.cme)."""
