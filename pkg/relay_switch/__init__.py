"""Training-free runtime switching between a large and a small reasoning model."""

__version__ = '0.1.0'
