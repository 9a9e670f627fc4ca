"""Test suite for gda-kit"""
