"""Test suite for objfuse."""
