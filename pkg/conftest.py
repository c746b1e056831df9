"""
Configuration pytest commune : rend le package ``dproto`` et la CLI
importables depuis la racine du dépôt.
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: tests de bout en bout (entraînement, explication complète)")
