"""IPA ASR Toolkit."""

__version__ = "0.1.0"
__description__ = "Phoneme-level ASR evaluation, decoding and vocabulary remapping for IPA transcriptions"
