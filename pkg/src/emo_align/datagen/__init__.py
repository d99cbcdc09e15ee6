"""Synthetic speech world, rule teacher, prompt templates and corpus construction.

The teacher and corpus modules depend on the model package, which itself
needs the templates here, so they are imported from their submodules
(``emo_align.datagen.teacher``, ``emo_align.datagen.corpus``).
"""

from .templates import Layout, PromptTemplate, TemplateError, build_vocabulary, get_template, template_text
from .vocab import BOS, EMOTIONS, EOS, NUM_EMOTIONS, EmotionLabel, Vocabulary
from .world import SyntheticWorldConfig, World, linear_probe_accuracy, lossless_world

__all__ = [name for name in dir() if not name.startswith("_")]
