"""Tests for the density_ood package."""
