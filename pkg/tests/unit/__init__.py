"""Unit tests for the rkm package, one module per source module."""
