"""HTTP API package for the IPA ASR toolkit."""
