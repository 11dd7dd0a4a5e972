"""Hybrid split-federated learning simulator.

The compiled extension :mod:`hsfl._core` carries the full simulator; this
package re-exports its public surface and adds small file-oriented helpers.
"""

from hsfl._core import (
    AuditReport,
    AuditViolation,
    Dataset,
    ExperimentResult,
    MsgKind,
    QuantizedTensor,
    RoundMetrics,
    RunConfig,
    Shard,
    Tensor,
    __version__,
    audit_privacy,
    csa_pair_loss,
    dequantize,
    dirichlet_partition,
    gen_gaussian_mixture,
    quantize,
    run_experiment,
    softmax_entropy,
    softmax_entropy_rows,
)

__all__ = [
    "AuditReport",
    "AuditViolation",
    "Dataset",
    "ExperimentResult",
    "MsgKind",
    "QuantizedTensor",
    "RoundMetrics",
    "RunConfig",
    "Shard",
    "Tensor",
    "__version__",
    "audit_file",
    "audit_privacy",
    "csa_pair_loss",
    "dequantize",
    "dirichlet_partition",
    "gen_gaussian_mixture",
    "quantize",
    "run_experiment",
    "softmax_entropy",
    "softmax_entropy_rows",
    "summary_dict",
]


def audit_file(path):
    """Audit a recorded transcript file and return an :class:`AuditReport`."""
    with open(path, "rb") as f:
        return audit_privacy(f.read())


def summary_dict(result):
    """An :class:`ExperimentResult`'s summary as a dict, preserving file order."""
    return dict(result.summary)
