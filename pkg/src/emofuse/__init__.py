"""emofuse: self-reviewed emotion corpus curation and multimodal fusion tooling."""

__version__ = "0.1.0"
