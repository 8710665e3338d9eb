"""Compressive-MUSIC joint-sparse recovery and dynamic support tracking."""
