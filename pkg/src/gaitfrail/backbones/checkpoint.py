"""Checkpoint archive: canonical `scope/param` names to arrays + config fingerprint.

Loading verifies shape agreement per parameter and refuses silent reshape;
buffers (normalization running statistics) travel with the parameters.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

FINGERPRINT_KEY = "__fingerprint__"


class CheckpointError(Exception):
    pass


def _named_state(modules: dict[str, nn.Module]) -> dict[str, torch.Tensor]:
    state: dict[str, torch.Tensor] = {}
    for scope, module in modules.items():
        for name, tensor in module.state_dict().items():
            state[f"{scope}/{name}"] = tensor
    return state


def save_checkpoint(path: str | Path, modules: dict[str, nn.Module], fingerprint: str) -> None:
    arrays = {key: tensor.detach().cpu().numpy() for key, tensor in _named_state(modules).items()}
    arrays[FINGERPRINT_KEY] = np.array(fingerprint)
    np.savez(path, **arrays)


def load_checkpoint(
    path: str | Path,
    modules: dict[str, nn.Module],
    expected_fingerprint: str | None = None,
) -> None:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with np.load(path, allow_pickle=False) as archive:
        stored_fp = str(archive[FINGERPRINT_KEY]) if FINGERPRINT_KEY in archive else None
        if expected_fingerprint is not None and stored_fp != expected_fingerprint:
            raise CheckpointError(
                f"config fingerprint mismatch: checkpoint has {stored_fp!r}, "
                f"expected {expected_fingerprint!r}"
            )
        state = _named_state(modules)
        missing = sorted(set(state) - (set(archive.files) - {FINGERPRINT_KEY}))
        unexpected = sorted((set(archive.files) - {FINGERPRINT_KEY}) - set(state))
        if missing or unexpected:
            raise CheckpointError(
                f"checkpoint does not match model: missing {missing}, unexpected {unexpected}"
            )
        for key, tensor in state.items():
            stored = archive[key]
            if tuple(stored.shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"shape mismatch for {key}: checkpoint {tuple(stored.shape)} vs "
                    f"model {tuple(tensor.shape)}; refusing to reshape"
                )
    # second pass actually writes, so a mismatch never leaves a half-loaded model
    with np.load(path, allow_pickle=False) as archive:
        with torch.no_grad():
            for scope, module in modules.items():
                new_state = {
                    name: torch.from_numpy(np.array(archive[f"{scope}/{name}"]))
                    for name in module.state_dict()
                }
                module.load_state_dict(new_state)


def stored_fingerprint(path: str | Path) -> str | None:
    with np.load(path, allow_pickle=False) as archive:
        return str(archive[FINGERPRINT_KEY]) if FINGERPRINT_KEY in archive else None
