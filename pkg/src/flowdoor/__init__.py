"""Desk-scale study kit for TTL-based poisoning backdoors in flow-feature
intrusion detectors: synthetic flows, feature extraction, from-scratch
random forest and MLP detectors, PDP/ALE curves, and backdoor-removal
defenses (leaf pruning, neuron pruning, fine-tuning).

Import the submodules directly, e.g. ``from flowdoor import traffic, forest``.
"""

__version__ = "0.1.0"
