"""Configuration, logging, error and helper utilities."""
