"""Integration tests for gda-kit"""
