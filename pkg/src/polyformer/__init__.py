"""Few-shot domain adaptation with a polymorphic transformer layer.

The package runs end to end on its own small numpy tensor engine: a split
U-Net backbone, the polyformer layer inserted between its feature extractor
and task head, a gradient-reversal discriminator, a synthetic two-domain
benchmark, and the three training phases.
"""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
