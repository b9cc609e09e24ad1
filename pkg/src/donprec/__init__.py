"""Hybrid operator-network / iterative preconditioners for parametric linear systems."""

__version__ = "0.1.0"

from .fem import ProblemSpec, StructuredMesh, build_mesh, build_problem
from .krylov import SolveReport, StopCriteria, Termination, fgmres, pcg
from .linalg import CsrMatrix, lu_solve, qr_thin, spmv, sym_eig
from .onet import OnetModel, SineTrunkModel, load_model, onet_infer, save_model, trunk_eval
from .precond import CompositePrec, JacobiPrec, MgPrec, Preconditioner

__all__ = [
    "CompositePrec", "CsrMatrix", "JacobiPrec", "MgPrec", "OnetModel",
    "Preconditioner", "ProblemSpec", "SineTrunkModel", "SolveReport",
    "StopCriteria", "StructuredMesh", "Termination", "build_mesh",
    "build_problem", "fgmres", "load_model", "lu_solve", "onet_infer", "pcg",
    "qr_thin", "save_model", "spmv", "sym_eig", "trunk_eval",
]
