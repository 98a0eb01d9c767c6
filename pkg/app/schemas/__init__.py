"""
Schemas package for configuration, reports and request/response validation.
"""
