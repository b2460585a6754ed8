"""Homogenized stiffness of the X cell, and how it moves when the cell is deformed.

Run from the repository root:  python3 demos/cell_tensor.py
"""
import numpy as np

from gmcopt.cell import homogenize, rotate_voigt, rotation_matrix
from gmcopt.geometry import MicroCellSpec, jacobian_from_geometry, rescale_unit_det

np.set_printoptions(precision=4, suppress=True)

cell = MicroCellSpec.from_fraction(0.3)
print(f"X cell at 30% solid: bar width {cell.width:.4f}")

C0 = homogenize(cell, np.eye(2)).C
print("\nundeformed cell, Voigt order (xx, yy, xy):")
print(C0)
# the diagonal bars carry uniaxial load by bending, so E_x is tiny next to C11
print(f"uniaxial modulus E_x = {C0[0, 0] - C0[0, 1] ** 2 / C0[1, 1]:.4f}")

# rotate the lattice by 45 degrees: the bars now run along x and y
J = jacobian_from_geometry(1.0, np.pi / 4, np.pi / 2)
C45 = homogenize(cell, J).C
print("\nlattice rotated by 45 degrees:")
print(C45)
print(f"E_x = {C45[0, 0] - C45[0, 1] ** 2 / C45[1, 1]:.4f}")
print("matches the rotated tensor:", np.allclose(C45, rotate_voigt(C0, rotation_matrix(np.pi / 4)), rtol=1e-2, atol=1e-4))

# stretch and shear, then pin det J' = 1 as the surrogate sees it
Jp = rescale_unit_det(jacobian_from_geometry(2.0, 0.3, 1.2))
print("\nstretched and sheared cell, J' =")
print(Jp)
print(homogenize(cell, Jp).C)

print("\nE_x of the undeformed cell against cell resolution")
for r in (32, 64, 128):
    C = homogenize(cell, np.eye(2), r=r).C
    print(f"  r = {r:3d}: {C[0, 0] - C[0, 1] ** 2 / C[1, 1]:.5f}")
