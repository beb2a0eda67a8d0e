"""Stub encoders, alignment, fusion, decoder and the assembled segmenter."""
