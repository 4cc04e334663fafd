"""Crack classification, localization and full-image scanning for stone masonry."""

__version__ = "0.1.0"

CLASS_NAMES = ("NoCrack", "Crack")
NO_CRACK = 0
CRACK = 1
