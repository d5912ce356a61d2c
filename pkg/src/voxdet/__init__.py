"""voxdet: a desk-scale LiDAR 3D object detector.

Voxelized point clouds run through a sparse 3D convolution backbone into a
bird's-eye-view feature map, an anchor-based detection head, and a feature
alignment stage that pulls features of sparse, occluded objects toward the
features of dense stand-in models built from the dataset itself.
"""

__version__ = "0.1.0"
