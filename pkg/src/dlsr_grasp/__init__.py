"""Dictionary learning and sparse representation for RGBD grasp recognition and detection."""

__version__ = "0.1.0"

PATCH_SIZE = 6
CROP_SIZE = 24
N_CHANNELS = 8
PATCH_DIM = PATCH_SIZE * PATCH_SIZE * N_CHANNELS
CHANNEL_NAMES = ("K", "R", "G", "B", "D", "Nx", "Ny", "Nz")
