"""Prompt-guided copy mechanism for conversational question answering.

Desk-scale, fully testable: CoQA-format corpus handling, three prompt
templates, an encoder-decoder with a multi-view copy head and a
generation gate on its own autodiff kernel, teacher-forced training,
and CoQA-style EM/F1 evaluation with overall/generative/extractive
splits.
"""

__version__ = "0.1.0"

__all__ = ["corpus", "prompt", "tensor", "model", "train", "eval", "cli"]
