"""
Pydantic models for CTC Lab configuration and results.
"""
