"""Clean-label backdoor attacks on video classifiers, at desk scale."""

__version__ = "0.1.0"
