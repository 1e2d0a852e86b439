"""Granger-causal graph learning for ReLU-linked multivariate Hawkes processes."""
