"""Test suite for FastAPI Skeleton."""
