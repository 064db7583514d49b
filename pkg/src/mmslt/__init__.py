"""Gloss-free sign language translation with MLLM-generated sign descriptions.

Pipeline: per-frame descriptions from an image MLLM, multimodal-language
pre-training of a fused visual/description encoder, then decoder fine-tuning
for translation. A synthetic glyph dataset makes every stage runnable on CPU.
"""

__version__ = "0.1.0"
