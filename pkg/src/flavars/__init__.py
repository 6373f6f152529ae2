"""Vision-language-location pretraining with masked modeling and contrastive alignment."""

__version__ = "0.1.0"
