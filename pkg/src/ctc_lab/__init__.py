"""
CTC Lab - contrastive temporal coding, discriminability/transferability
probes and information-plane measurement at desk scale.
"""

__version__ = "1.0.0"
