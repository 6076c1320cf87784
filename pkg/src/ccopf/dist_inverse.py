"""Confidentiality-preserving distributed solve of a stacked linear system.

Each agent owns some rows of a square matrix ``G``.  It publishes only
``(own rows)^T @ W`` for private invertible ``W`` masks; the stacked masked
matrix is gathered to every agent by accelerated consensus over the one-hop
topology (zero-padded initial stacks, mean times agent count).  Every agent
then solves the full masked system locally by dense LU and un-masks only the
row blocks its own ``W`` matrices cover, which are exactly the columns of
``inv(G)`` associated with its own rows.

Layout offsets are public; matrix entries are not.  Identity RHS columns are
implicit and never travel as messages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .consensus import ConsensusConfig, ConsensusResult, aac_run, mean_to_sum
from .dlpf import SingularSystemError
from .te_crypto import TeKeys

__all__ = [
    "MaskedRowBlock", "mask_blocks", "mask_rows", "gather_masked",
    "solve_masked", "recover_blocks", "distributed_inverse",
]

COND_LIMIT = 1e12


@dataclass(frozen=True)
class MaskedRowBlock:
    """One agent's published contribution to the masked system.

    ``payloads[i]`` is ``rows_i.T @ W_i`` with shape (dim, n_rows_i); the
    block occupies stack columns ``offsets[i] : offsets[i] + n_rows_i``.
    """
    owner: int
    payloads: tuple[np.ndarray, ...]
    offsets: tuple[int, ...]

    def place_into(self, stack: np.ndarray) -> None:
        for payload, off in zip(self.payloads, self.offsets):
            stack[:, off:off + payload.shape[1]] = payload


def mask_rows(rows: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``rows.T @ W``; un-masking needs ``W`` itself, recovery of rows needs both."""
    if W.shape != (rows.shape[0], rows.shape[0]):
        raise ValueError(
            f"mask must be {rows.shape[0]}x{rows.shape[0]}, got {W.shape}")
    return rows.T @ W


def mask_blocks(G_Q: np.ndarray, G_P: np.ndarray, keys: TeKeys,
                q_offset: int, p_offset: int) -> MaskedRowBlock:
    """Mask a region's reactive and active DLPF row blocks."""
    return MaskedRowBlock(
        owner=keys.region,
        payloads=(mask_rows(G_Q, keys.W_Q), mask_rows(G_P, keys.W_P)),
        offsets=(q_offset, p_offset),
    )


def gather_masked(blocks, dim: int, topology, cfg: ConsensusConfig | None = None,
                  recorder=None) -> tuple[list[np.ndarray], ConsensusResult | None]:
    """Give every agent the identical stacked masked matrix.

    Agents seed the consensus with their zero-padded stacks; the mean times
    the agent count reconstructs the concatenation.  Single-agent runs bypass
    consensus entirely.
    """
    n = len(blocks)
    stacks = []
    for blk in blocks:
        stack = np.zeros((dim, dim))
        blk.place_into(stack)
        stacks.append(stack)
    if n == 1:
        return [stacks[0]], None
    cfg = cfg or ConsensusConfig(polish=True)
    result = aac_run([s.ravel() for s in stacks], topology, cfg, recorder=recorder)
    gathered = [mean_to_sum(v, n).reshape(dim, dim) for v in result.values]
    return gathered, result


def solve_masked(stack: np.ndarray) -> np.ndarray:
    """Encrypted solution of ``stack @ B_bar = I`` by dense LU."""
    if stack.shape[0] != stack.shape[1]:
        raise SingularSystemError("masked system must be square")
    cond = np.linalg.cond(stack)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularSystemError("masked system numerically singular", cond=cond)
    return np.linalg.solve(stack, np.eye(stack.shape[0]))


def recover_blocks(b_bar: np.ndarray, keys: TeKeys, q_offset: int, q_rows: int,
                   p_offset: int, p_rows: int) -> tuple[np.ndarray, np.ndarray]:
    """Un-mask the owner's slices: ``B = W @ B_bar_slice``."""
    bq = keys.W_Q @ b_bar[q_offset:q_offset + q_rows, :]
    bp = keys.W_P @ b_bar[p_offset:p_offset + p_rows, :]
    return bq, bp


def distributed_inverse(row_blocks, masks, topology,
                        cfg: ConsensusConfig | None = None, recorder=None):
    """End-to-end pipeline for generic row partitions (benchmark path).

    ``row_blocks[i]`` holds agent i+1's rows of ``G`` (consecutive, in agent
    order); ``masks[i]`` the matching private invertible matrix.  Returns the
    per-agent recovered blocks (rows of ``inv(G).T`` aligned with each
    agent's rows) and the consensus result.
    """
    n = len(row_blocks)
    offsets, pos = [], 0
    for rows in row_blocks:
        offsets.append(pos)
        pos += rows.shape[0]
    dim = row_blocks[0].shape[1]
    if pos != dim:
        raise ValueError(f"row blocks stack to {pos} rows, need {dim}")
    blocks = [
        MaskedRowBlock(owner=i + 1, payloads=(mask_rows(rows, W),), offsets=(off,))
        for i, (rows, W, off) in enumerate(zip(row_blocks, masks, offsets))
    ]
    gathered, result = gather_masked(blocks, dim, topology, cfg, recorder)
    recovered = []
    for i, (W, off) in enumerate(zip(masks, offsets)):
        b_bar = solve_masked(gathered[i])
        recovered.append(W @ b_bar[off:off + row_blocks[i].shape[0], :])
    return recovered, result
