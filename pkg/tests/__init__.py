"""Tests for guidederain package."""
