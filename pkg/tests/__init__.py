"""Tests package for LoraFuse."""
