"""Fleet-trajectory anomaly detection with a Siamese LSTM autoencoder and alignment baselines."""

__version__ = "0.1.0"
