"""
Services package: the numerical engine and the CLI back-ends.
"""
