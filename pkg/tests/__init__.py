"""Automated tests for coopsubnet."""
