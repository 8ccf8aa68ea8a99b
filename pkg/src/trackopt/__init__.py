"""Drone target-tracking trajectory optimization toolkit."""
