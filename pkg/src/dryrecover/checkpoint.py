"""Versioned checkpoint container: a ZIP archive of named ``.npy`` arrays.

Layout::

    header.json          format id, version, kind, config echo, step, tensor index
    tensors/<name>.npy   one array per tensor (NumPy's own shape/dtype header)

Tensor names are ``<component>/<state_dict key>`` (for example
``denoiser/blocks.0.ff.conv1.bias``). Optimizer tensors live under
``optim/<component>/state/<param index>/<key>``; the rest of the optimizer
state (param groups, scalar entries) sits in the header. Any language that
can read ZIP, JSON and ``.npy`` can consume these files.
"""

import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch

from dryrecover.errors import AudioIOError, ValidationError

FORMAT_ID = "dryrecover-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: dict
    step: int
    tensors: dict
    optimizers: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def module_state(self, component):
        prefix = component + "/"
        return {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k.startswith(prefix)}

    def load_module(self, component, module):
        state = self.module_state(component)
        if not state:
            raise ValidationError(f"checkpoint has no weights for {component!r}")
        try:
            module.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise ValidationError(f"checkpoint weights for {component!r} do not fit the model: {exc}") from exc
        return module

    def load_optimizer(self, component, optimizer):
        meta = self.optimizers.get(component)
        if meta is None:
            return False
        prefix = f"optim/{component}/state/"
        state = {}
        for k, v in self.tensors.items():
            if k.startswith(prefix):
                idx, key = k[len(prefix):].split("/", 1)
                state.setdefault(int(idx), {})[key] = torch.from_numpy(v.copy())
        for idx, scalars in meta["scalars"].items():
            state.setdefault(int(idx), {}).update(scalars)
        groups = []
        for g in meta["param_groups"]:
            g = dict(g)
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
            groups.append(g)
        optimizer.load_state_dict({"state": state, "param_groups": groups})
        return True


def _optimizer_payload(name, optimizer):
    sd = optimizer.state_dict()
    tensors, scalars = {}, {}
    for idx, entries in sd["state"].items():
        for key, value in entries.items():
            if torch.is_tensor(value):
                tensors[f"optim/{name}/state/{idx}/{key}"] = value.detach().cpu().numpy()
            else:
                scalars.setdefault(str(idx), {})[key] = value
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return tensors, {"param_groups": groups, "scalars": scalars}


def save_checkpoint(path, kind, config, modules, optimizers=None, step=0, extra=None):
    """Atomically write a checkpoint (temp file + rename)."""
    tensors = {}
    for component, module in modules.items():
        for key, value in module.state_dict().items():
            tensors[f"{component}/{key}"] = value.detach().cpu().numpy()
    optim_meta = {}
    for component, opt in (optimizers or {}).items():
        t, meta = _optimizer_payload(component, opt)
        tensors.update(t)
        optim_meta[component] = meta
    header = {
        "format": FORMAT_ID,
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "step": int(step),
        "optimizers": optim_meta,
        "extra": extra or {},
        "tensors": {
            name: {"shape": list(arr.shape), "dtype": arr.dtype.str, "file": f"tensors/{name}.npy"}
            for name, arr in tensors.items()
        },
    }
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh, zipfile.ZipFile(fh, "w", zipfile.ZIP_STORED) as zf:
            zf.writestr("header.json", json.dumps(header, indent=1, sort_keys=True))
            for name, arr in tensors.items():
                buf = io.BytesIO()
                np.save(buf, np.require(arr, requirements="C"), allow_pickle=False)
                zf.writestr(f"tensors/{name}.npy", buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path, expect_kind=None):
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise AudioIOError(f"no such checkpoint: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != FORMAT_ID or header.get("version") != FORMAT_VERSION:
                raise ValidationError(f"{path} is not a version-{FORMAT_VERSION} {FORMAT_ID}")
            tensors = {}
            for name, info in header["tensors"].items():
                arr = np.load(io.BytesIO(zf.read(info["file"])), allow_pickle=False)
                if list(arr.shape) != info["shape"] or arr.dtype.str != info["dtype"]:
                    raise ValidationError(f"tensor {name} disagrees with its header entry")
                tensors[name] = arr
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"corrupt checkpoint {path}: {exc}") from exc
    if expect_kind is not None and header["kind"] not in (
        (expect_kind,) if isinstance(expect_kind, str) else tuple(expect_kind)
    ):
        raise ValidationError(f"{path} holds a {header['kind']!r} checkpoint, expected {expect_kind!r}")
    return Checkpoint(
        kind=header["kind"],
        config=header["config"],
        step=header["step"],
        tensors=tensors,
        optimizers=header.get("optimizers", {}),
        extra=header.get("extra", {}),
    )
