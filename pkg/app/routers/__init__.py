"""
Routers package for organizing API endpoints.
"""
