"""Text-conditioned generalist policies from offline multi-task data.

Pipeline: world-model pre-training produces dynamics-aware trajectory
embeddings; a small text encoder is contrastively aligned to them; two
text-conditioned policies (a causal transformer and a plan diffuser) train on
offline datasets and roll out zero-shot from natural-language instructions.
A FastAPI service exposes rollouts to scripts and the web console.
"""

__version__ = "0.1.0"
