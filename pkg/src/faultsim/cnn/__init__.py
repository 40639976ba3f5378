from .compiler import CompiledLayer, LayerLayout, Region, compile_layer, launch_for
from .idx import Dataset, load_idx, write_idx
from .model import (LENET_SMALL_LAYERS, Conv, Dense, MaxPool, Model, Relu, Softmax,
                    load_model, output_shape, random_model, save_model)
from .reference import reference_activations, reference_infer, reference_layer
from .runtime import CompiledModel, InferenceResult, compile_model, infer, run_compiled
