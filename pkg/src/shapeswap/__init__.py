"""shapeswap: unpaired two-domain shape transfer and style-code retrieval.

A numpy library implementing a two-stream translation model between an
object-centric "catalog" domain and a contextualized domain, the losses and
trainer that fit it from unpaired images, a procedural dataset generator,
SSIM / perceptual evaluation, and cross-domain retrieval on the learned
style codes.
"""

__version__ = "0.1.0"

CHECKPOINT_FORMAT_VERSION = 1
