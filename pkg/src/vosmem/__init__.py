"""vosmem: streaming memory-bank engine for video object segmentation.

Three memory disciplines over key/value feature banks (ever-growing
append, exponential-moving-average blending, and a constant-size bank
carried by a recurrent aggregated embedding), the full attention
readout with top-k filtering, and the three-term training objective
that makes the recurrent bank trainable, all on a small float64
autodiff core that is checked against finite differences.
"""

__version__ = "0.1.0"
