"""Pytest configuration for gda-kit tests"""
import os
import sys

# Add src to Python path for imports
sys.path.insert(0, os.path.join(os.path.abspath(os.path.dirname(__file__)), "src"))


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "integration: mark test as an integration test"
    )
    config.addinivalue_line(
        "markers", "slow: mark test as slow running"
    )
