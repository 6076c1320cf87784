"""Confidentiality-preserving distributed chance-constrained OPF.

Regional ISO agents cooperatively solve a global chance-constrained optimal
power flow by exchanging only encrypted or masked data, and the result is
verified against a centralized full-information oracle.
"""

from importlib import resources

from .agents import (AuditReport, CentralizedResult, ProtocolConfig,
                     ProtocolResult, privacy_audit, run_centralized,
                     run_protocol)
from .consensus import ConsensusConfig, aac_run, metropolis_weights, ppaac_run
from .dlpf import (DlpfSystem, SensitivityBlocks, StateMaps, assemble_dlpf,
                   invert_oracle, mapping_coefficients)
from .grid_case import (GridCase, RegionView, confidential_arrays, load_case,
                        parse_case, region_view, serialize_case)
from .qp import CompactQp, QpSolution, assemble_p0, check_kkt, solve_qp
from .te_crypto import (EncryptedShare, TeKeys, assemble_p1, decrypt_solution,
                        encrypt_local, gen_keys)
from .wind_uncertainty import JointGmm, ScalarGmm, cdf, project, quantile

__version__ = "0.1.0"


def bundled_case_path(name: str):
    """Filesystem path of a case shipped with the package (e.g. ``toy2``)."""
    return resources.files("ccopf.cases") / f"{name}.json"


__all__ = [
    "AuditReport", "CentralizedResult", "ProtocolConfig", "ProtocolResult",
    "privacy_audit", "run_centralized", "run_protocol",
    "ConsensusConfig", "aac_run", "metropolis_weights", "ppaac_run",
    "DlpfSystem", "SensitivityBlocks", "StateMaps", "assemble_dlpf",
    "invert_oracle", "mapping_coefficients",
    "GridCase", "RegionView", "confidential_arrays", "load_case",
    "parse_case", "region_view", "serialize_case",
    "CompactQp", "QpSolution", "assemble_p0", "check_kkt", "solve_qp",
    "EncryptedShare", "TeKeys", "assemble_p1", "decrypt_solution",
    "encrypt_local", "gen_keys",
    "JointGmm", "ScalarGmm", "cdf", "project", "quantile",
    "bundled_case_path",
]
