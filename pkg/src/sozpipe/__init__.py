"""sozpipe: synthetic sEEG cohorts, CCEP connectivity graphs, and a shared
attention autoencoder feeding a hierarchical fusion graph network for
seizure onset zone node classification."""

__version__ = "0.1.0"
