"""Voxel-grid molecular denoisers and measurements of their rotation equivariance."""

from .errors import VoxequivError
from .geom3 import RotationOp, octahedral_group, rot_axis_angle, rotate_grid, rotate_points
from .mol_io import Dataset, Molecule, read_molecule, write_molecule
from .voxelizer import GridSpec, VoxelGrid, find_peaks, voxelize

__version__ = "0.1.0"

__all__ = [
    "VoxequivError", "RotationOp", "octahedral_group", "rot_axis_angle", "rotate_grid", "rotate_points",
    "Dataset", "Molecule", "read_molecule", "write_molecule", "GridSpec", "VoxelGrid", "find_peaks", "voxelize",
]
