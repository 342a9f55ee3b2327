"""Direct detection pre-training: low-resolution large-batch pre-training on
the target dataset, then high-resolution fine-tuning with frozen BN."""

__version__ = "0.1.0"
