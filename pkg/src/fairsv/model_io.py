"""Model serialization: single binary file with a versioned JSON header
followed by little-endian float64 matrices, plus a text summary dump.

Shared by the generative and discriminative backends; the discriminative
format adds an optional section for condition-network parameters.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError

MAGIC = b"FSVM"
VERSION = 1


def _array_dict_generative(bk) -> tuple:
    scalars = {"cal_a": bk.cal_a, "cal_b": bk.cal_b}
    arrays = {"mean": bk.mean, "lda": bk.lda, "plda_mu": bk.plda_mu,
              "B": bk.B, "W": bk.W}
    return scalars, arrays


def save_model(path, backend, condition=None) -> None:
    """Write a GenerativeBackend or DiscriminativeBackend (with optional
    ConditionCalibrator) to a single file."""
    from .discriminative import ConditionCalibrator, DiscriminativeBackend
    from .generative import GenerativeBackend

    scalars, arrays = {}, {}
    if isinstance(backend, GenerativeBackend):
        mtype = "plda"
        scalars, arrays = _array_dict_generative(backend)
    elif isinstance(backend, DiscriminativeBackend):
        mtype = "dcaplda" if condition is not None else "dplda"
        state = {k: v.detach().numpy() for k, v in backend.state_dict().items()}
        scalars = {"cal_a": float(state.pop("cal_a")),
                   "cal_b": float(state.pop("cal_b")),
                   "k": float(state.pop("k"))}
        arrays = state
        if condition is not None:
            for name, value in condition.state_dict().items():
                value = value.detach().numpy()
                if value.ndim == 0:
                    scalars[f"cond.{name}"] = float(value)
                else:
                    arrays[f"cond.{name}"] = value
    else:
        raise DataError(f"cannot serialize object of type {type(backend).__name__}")

    names = sorted(arrays)
    header = {
        "type": mtype,
        "scalars": {k: float(v) for k, v in sorted(scalars.items())},
        "arrays": [[n, list(np.asarray(arrays[n]).shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BI", VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_model(path):
    """Returns (backend, condition_or_None)."""
    from .discriminative import ConditionCalibrator, DiscriminativeBackend
    from .generative import GenerativeBackend
    import torch

    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise DataError(f"{path}: not a model file")
        version, hlen = struct.unpack("<BI", f.read(5))
        if version != VERSION:
            raise DataError(f"{path}: unsupported model version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise DataError(f"{path}: truncated array '{name}'")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    scalars = header["scalars"]
    mtype = header["type"]

    if mtype == "plda":
        return GenerativeBackend(mean=arrays["mean"], lda=arrays["lda"],
                                 plda_mu=arrays["plda_mu"], B=arrays["B"],
                                 W=arrays["W"], cal_a=scalars["cal_a"],
                                 cal_b=scalars["cal_b"]), None
    if mtype in ("dplda", "dcaplda"):
        bk = DiscriminativeBackend(m=arrays["m"], L=arrays["L"],
                                   Lam=arrays["Lam"], Gam=arrays["Gam"],
                                   c=arrays["c"], k=scalars["k"],
                                   cal_a=scalars["cal_a"], cal_b=scalars["cal_b"])
        cond = None
        if mtype == "dcaplda":
            q, p = arrays["cond.A"].shape
            cond = ConditionCalibrator(proj_dim=p, q=q)
            cond.load_state_dict({
                "A": torch.as_tensor(arrays["cond.A"]),
                "b0": torch.as_tensor(arrays["cond.b0"]),
                "head_a": torch.as_tensor(arrays["cond.head_a"]),
                "head_b": torch.as_tensor(arrays["cond.head_b"]),
                "bias_a": torch.as_tensor(np.float64(scalars["cond.bias_a"])),
                "bias_b": torch.as_tensor(np.float64(scalars["cond.bias_b"])),
                "ld_mean": torch.as_tensor(
                    np.float64(scalars.get("cond.ld_mean", 0.0))),
                "ld_scale": torch.as_tensor(
                    np.float64(scalars.get("cond.ld_scale", 1.0))),
            })
        return bk, cond
    raise DataError(f"{path}: unknown model type '{mtype}'")


def model_summary(backend, condition=None) -> str:
    """Human-readable dump of shapes and calibration scalars."""
    from .generative import GenerativeBackend

    lines = []
    if isinstance(backend, GenerativeBackend):
        lines.append("type: plda")
        scalars, arrays = _array_dict_generative(backend)
    else:
        lines.append("type: dcaplda" if condition is not None else "type: dplda")
        state = {k: v.detach().numpy() for k, v in backend.state_dict().items()}
        scalars = {k: float(state.pop(k)) for k in ("cal_a", "cal_b", "k")}
        arrays = state
        if condition is not None:
            for name, value in condition.state_dict().items():
                arrays[f"cond.{name}"] = value.detach().numpy()
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        lines.append(f"{name}: shape={tuple(a.shape)} "
                     f"norm={float(np.linalg.norm(a)):.6g}")
    for name, v in sorted(scalars.items()):
        lines.append(f"{name}: {v:.6g}")
    return "\n".join(lines) + "\n"
