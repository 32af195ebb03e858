"""Tiny packs with a planted rule for model tests.

The next interval holds an accident when accident column 0 of the current
interval exceeds 0.3; its gamma class is 2 when accident column 1 is
positive, else 1.
"""
from datetime import datetime, timezone

import numpy as np

from impactcast import cascade, grid

EPOCH = datetime(2019, 2, 1, 8, tzinfo=timezone.utc)
THRESHOLD = 0.3


def micro_pack(Z=4, T=300, seed=0, train_fraction=0.8) -> grid.Pack:
    names, cats = grid.feature_layout("grouped")
    r = np.random.default_rng(seed)
    feats = r.normal(size=(Z, T, len(names))).astype(np.float32)
    a0, a1 = cats["accident"][0], cats["accident"][1]
    labels = np.zeros((Z, T), dtype=np.uint8)
    acc = feats[:, :-1, a0] > THRESHOLD
    labels[:, 1:] = np.where(acc, np.where(feats[:, :-1, a1] > 0, 2, 1), 0)
    zones = [grid.CellIndex(i // 2, i % 2) for i in range(Z)]
    spec = grid.GridSpec(33.85, -118.55, (Z + 1) // 2, 2, EPOCH, T)
    meta = {"train_end_interval": int(train_fraction * T), "alpha": 0}
    return grid.Pack(feats, labels, zones, spec, names, cats, meta)


def micro_config(**kw) -> cascade.TrainConfig:
    base = dict(epochs1=15, epochs2=15, batch_size=64, lstm_units=(8,), fc_units=(12,), conv_filters=(8, 8),
                dense2=(16,), embed_dim=4, lr=5e-3)
    base.update(kw)
    return cascade.TrainConfig(**base)
