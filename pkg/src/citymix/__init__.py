"""citymix: social-mixing measurement and prediction from travel-survey mobility data."""

__version__ = "0.1.0"
