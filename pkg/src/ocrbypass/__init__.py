"""Budget-aware training of an OCR image preprocessor through a differentiable
approximator of a black-box OCR engine."""

__version__ = "0.1.0"
