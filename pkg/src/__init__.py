"""FedClust simulator - one-shot weight-driven client clustering for federated learning."""

__version__ = "0.1.0"
