"""Run directories: checkpoint, loss history, resolved config and run label."""
from __future__ import annotations

import csv
import io
import json
import os

import numpy as np

from trajssl.nn import checkpoint
from trajssl.nn.model import Model, ModelConfig, Params
from trajssl.nn.tensor import Tensor

CHECKPOINT = "checkpoint.bin"
HISTORY = "history.csv"
CONFIG = "config.json"
RUN_INFO = "run.json"


def run_label(lam: float) -> str:
    return "baseline" if lam == 0 else "traj"


def model_to_bytes(model: Model, run_config: dict) -> bytes:
    return checkpoint.dumps(model.params.arrays(), {"model": _model_dict(model.config), "run": run_config,
                                                    "seed": model.seed})


def _model_dict(cfg: ModelConfig) -> dict:
    return {"image_size": cfg.image_size, "widths": list(cfg.widths), "feature_dim": cfg.feature_dim,
            "compression_hidden": cfg.compression_hidden}


def model_from_arrays(arrays: dict, echo: dict) -> Model:
    m = echo["model"]
    cfg = ModelConfig(m["image_size"], tuple(m["widths"]), m["feature_dim"], m["compression_hidden"])
    reference = Model(cfg, seed=echo.get("seed", 0))
    if set(arrays) != set(reference.params):
        missing = sorted(set(reference.params) ^ set(arrays))
        raise ValueError(f"checkpoint parameters do not match the model: {', '.join(missing[:5])}")
    params = Params()
    for name, ref in reference.params.items():
        if arrays[name].shape != ref.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {arrays[name].shape}, expected {ref.shape}")
        params[name] = Tensor(np.array(arrays[name], dtype=np.float32), requires_grad=True, name=name)
    return Model(cfg, seed=reference.seed, params=params)


def load_model(path) -> tuple:
    """Returns ``(model, config_echo)``; raises CheckpointVersionError on unknown versions."""
    arrays, echo = checkpoint.load(path)
    return model_from_arrays(arrays, echo), echo


def history_csv(epoch_rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "sem_loss", "traj_loss", "total"])
    for e, sem, traj, total in epoch_rows:
        w.writerow([e, repr(sem), repr(traj), repr(total)])
    return buf.getvalue()


def write_if_changed(path, data: bytes) -> bool:
    """Write ``data`` unless the file already holds exactly these bytes."""
    if os.path.exists(path):
        with open(path, "rb") as fh:
            if fh.read() == data:
                return False
    with open(path, "wb") as fh:
        fh.write(data)
    return True


def write_run(out_dir, model: Model, run_config: dict, epoch_rows, lam: float):
    os.makedirs(out_dir, exist_ok=True)
    write_if_changed(os.path.join(out_dir, CHECKPOINT), model_to_bytes(model, run_config))
    write_if_changed(os.path.join(out_dir, HISTORY), history_csv(epoch_rows).encode())
    write_if_changed(os.path.join(out_dir, CONFIG), (json.dumps(run_config, indent=1, sort_keys=True) + "\n").encode())
    info = {"label": run_label(lam), "lambda": lam, "seed": run_config["seed"]}
    write_if_changed(os.path.join(out_dir, RUN_INFO), (json.dumps(info, indent=1, sort_keys=True) + "\n").encode())


def read_run_info(run_dir) -> dict:
    with open(os.path.join(run_dir, RUN_INFO)) as fh:
        return json.load(fh)
