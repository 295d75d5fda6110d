"""Multi-scale, multi-modal contrastive representation learning for time series."""
