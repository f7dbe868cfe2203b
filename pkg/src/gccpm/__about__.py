"""__about__.py
Version of the gccpm laboratory
"""

__version__ = "2026.10.0"
