"""
Test suite for the chartx chart extraction library.
"""
