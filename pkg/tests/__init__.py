"""Test suite for openvocab-seg."""
