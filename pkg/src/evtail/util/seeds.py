import zlib

import numpy as np


def stage_seed(root: int, stage: str) -> int:
    """ルートシードとステージ名から、ステージ固有のシードを決定的に導く"""
    sequence = np.random.SeedSequence([int(root), zlib.crc32(stage.encode("utf-8"))])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])
