"""
dproto : classifieur à prototypes déformables (masques de caractéristiques
fixes et aléatoires) et décodeur d'explications à masques dynamiques multiples.
"""

__version__ = "1.0.0"
