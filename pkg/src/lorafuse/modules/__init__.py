"""Feature modules: fusion, guidance, sampling, data, training and evaluation."""
