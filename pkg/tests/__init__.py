"""Tests for dbarf."""
