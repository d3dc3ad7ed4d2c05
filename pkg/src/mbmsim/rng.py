"""Named, independent random streams so results never depend on event ordering.

Every UE gets its own substreams derived from (master seed, purpose, ue_id) via
SeedSequence, so advancing one UE's channel or decoding never consumes another
UE's randomness and runs are bit-reproducible.
"""

from __future__ import annotations

import numpy as np

# purpose domains (stable numbering; changing these changes every seed's output)
PLACEMENT = 1
SHADOWING = 2
FADING = 3
DECODE = 4
FEEDBACK = 5
LIFETIME = 6
HEADING = 7
COMMON_CHANNEL = 8
CALIBRATION = 9


class RngStreams:
    """Factory for per-UE and per-cell generators under one master seed."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)

    def ue(self, purpose: int, ue_id: int) -> np.random.Generator:
        seq = np.random.SeedSequence((self.master_seed, purpose, ue_id))
        return np.random.Generator(np.random.PCG64(seq))

    def cell(self, purpose: int, cell_id: int) -> np.random.Generator:
        seq = np.random.SeedSequence((self.master_seed, purpose, 10_000_000 + cell_id))
        return np.random.Generator(np.random.PCG64(seq))

    def named(self, purpose: int) -> np.random.Generator:
        seq = np.random.SeedSequence((self.master_seed, purpose, 20_000_000))
        return np.random.Generator(np.random.PCG64(seq))
