"""Dataset IO, evaluation metrics, latency model and the command line."""
