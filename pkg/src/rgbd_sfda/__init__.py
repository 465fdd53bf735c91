"""Source-free RGB-D semantic segmentation adaptation at desk scale.

Modules:
    numerics   transforms, softmax, finite differences, seeded RNG
    spectral   low-frequency amplitude swap between images
    encoder    shared RGB/depth transformer with cross-modality attention
    losses     pseudo-label filtering, masked CE, depth-weighted entropy
    pipeline   pretraining, adaptation, evaluation, ablation matrix
    toydata    synthetic two-domain RGB-D benchmark
    cli        command-line front end
"""

__version__ = "0.1.0"
