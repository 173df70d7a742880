"""Tests for stateful-ope."""
