"""LLM-aware in-context example selection for code generation.

Pipeline: score candidate examples by how much they raise an LLM's
probability of the ground-truth program, label them, train a lightweight
contrastive retriever on the labels, and assemble few-shot prompts whose
quality is measured by Pass@k.
"""

__version__ = "0.1.0"
