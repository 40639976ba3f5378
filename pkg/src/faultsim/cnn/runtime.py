"""Run a compiled model on the simulator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, Trap
from ..simt import DeviceConfig, ExecStats, execute_kernel
from .compiler import CompiledLayer, LayerLayout, Region, compile_layer
from .model import Model, Softmax, param_counts

U32 = np.uint32
F32 = np.float32


@dataclass
class CompiledModel:
    model: Model
    device: DeviceConfig
    layers: tuple          # CompiledLayer per model layer
    input: Region
    output: Region
    template: np.ndarray   # global memory with weights preloaded

    @property
    def kernels(self) -> list:
        """``(Kernel, LaunchConfig)`` pairs in launch order."""
        return [kl for cl in self.layers for kl in cl.kernels]


@dataclass
class InferenceResult:
    probs: np.ndarray
    stats: ExecStats

    @property
    def top1(self) -> int:
        return int(np.argmax(self.probs))


def compile_model(model: Model, device: DeviceConfig | None = None) -> CompiledModel:
    """Lay out parameters and activations in global memory and compile every layer.

    Parameters come first, then the input image, then each layer's output
    (preceded by its scratch buffer for softmax).
    """
    device = device or DeviceConfig()
    shapes = model.shapes
    cursor = 0

    def take(n):
        nonlocal cursor
        r = Region(cursor, n)
        cursor += n
        return r

    params = []
    for i, layer in enumerate(model.layers):
        nw, _ = param_counts(layer, shapes[i])
        w = take(nw) if nw else None
        b = model.biases[i]
        params.append((w, take(b.size) if b is not None else None))
    inp = take(int(np.prod(shapes[0])))
    prev, compiled = inp, []
    for i, layer in enumerate(model.layers):
        n = int(np.prod(shapes[i + 1]))
        scratch = take(n) if isinstance(layer, Softmax) else None
        out = take(n)
        layout = LayerLayout(prev, out, params[i][0], params[i][1], scratch)
        compiled.append(compile_layer(layer, shapes[i], layout, name=f"L{i}_{layer.kind}"))
        prev = out
    if cursor > device.global_mem_words:
        raise ConfigError(f"model {model.name!r} needs {cursor} words of global memory, "
                          f"device has {device.global_mem_words}")

    template = np.zeros(device.global_mem_words, U32)
    for (w, b), wa, ba in zip(params, model.weights, model.biases):
        if w is not None:
            template[w.base:w.end] = np.asarray(wa, F32).view(U32)
        if b is not None:
            template[b.base:b.end] = np.asarray(ba, F32).view(U32)
    return CompiledModel(model, device, tuple(compiled), inp, prev, template)


def run_compiled(cm: CompiledModel, image: np.ndarray, hook=None, *,
                 lockstep: bool = True) -> InferenceResult:
    mem = cm.template.copy()
    mem[cm.input.base:cm.input.end] = np.asarray(image, F32).reshape(-1).view(U32)
    stats = ExecStats.empty(cm.device.regs_per_thread)
    for kernel, launch in cm.kernels:
        try:
            res = execute_kernel(kernel, launch, cm.device, mem, hook, lockstep=lockstep)
        except Trap as t:
            t.stats = stats.merge(t.stats) if t.stats is not None else stats
            raise
        mem, stats = res.memory, stats.merge(res.stats)
    probs = mem[cm.output.base:cm.output.end].view(F32).copy()
    return InferenceResult(probs, stats)


def infer(model: Model | CompiledModel, image: np.ndarray, device: DeviceConfig | None = None,
          hook=None, *, lockstep: bool = True) -> InferenceResult:
    """Classify one image on the simulator; ``hook`` applies to every kernel."""
    cm = model if isinstance(model, CompiledModel) else compile_model(model, device)
    return run_compiled(cm, image, hook, lockstep=lockstep)


__all__ = ["CompiledLayer", "CompiledModel", "InferenceResult", "compile_model", "infer",
           "run_compiled"]
