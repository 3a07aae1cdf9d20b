"""One-stream vision-language tracker, trained and evaluated at desk scale."""

__version__ = "0.1.0"
