"""Pydantic models and schemas for the IPA ASR toolkit."""
