"""Knowledge distillation through an inherited, frozen teacher classifier.

Margin-based softmax losses, small numpy encoders trained with NAG, teacher
ensemble fusion, an L2 embedding-matching baseline and a cross-model
evaluation protocol, all runnable on synthetic vMF identity data.
"""

__version__ = "0.1.0"
