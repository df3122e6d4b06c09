"""Adaptive multi-branch fine-tuning at desk scale: parallel fine-tuned
feature extractors gated per sample by a softmax policy network, trained
end to end with per-group learning rates, plus baselines and monitors."""

__version__ = "0.1.0"
