"""Stateful off-policy evaluation for capacitated dynamic pricing."""
