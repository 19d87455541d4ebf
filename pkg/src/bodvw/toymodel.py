"""Build VGG16-shaped ONNX graphs with seeded random weights.

These stand in for the ImageNet-pretrained network in tests and demos.  The
graph mirrors a Keras export: NHWC input ``input_1``, a transpose to NCHW,
five conv/ReLU blocks each closed by a 2x2 max-pool whose output tensor is
named ``block{i}_pool``.  ``compact=True`` replaces each block's 3x3 conv
stack by a single 1x1 conv, which keeps every pooling shape identical while
making the model tiny and cheap to run.
"""

from __future__ import annotations

import numpy as np

VGG16_BLOCKS = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))


def build_vgg16_onnx(path=None, seed: int = 0, compact: bool = True, opset: int = 13):
    """Return ``(model_proto, weights)``; also save to ``path`` when given.

    ``weights`` maps block index to a list of ``(W, b)`` conv parameters in
    OIHW layout, so callers can run an independent forward pass.
    """
    import onnx
    from onnx import TensorProto, helper, numpy_helper

    rng = np.random.default_rng(seed)
    nodes = [helper.make_node("Transpose", ["input_1"], ["nchw"], perm=[0, 3, 1, 2], name="to_nchw")]
    inits = []
    weights = {}
    prev, c_in = "nchw", 3
    for block, (c_out, n_conv) in enumerate(VGG16_BLOCKS, start=1):
        ksize = 1 if compact else 3
        convs = 1 if compact else n_conv
        weights[block] = []
        for j in range(1, convs + 1):
            stem = f"block{block}_conv{j}"
            fan_in = c_in * ksize * ksize
            w = (rng.standard_normal((c_out, c_in, ksize, ksize)) * np.sqrt(2.0 / fan_in)).astype(np.float32)
            if block == 1:
                w /= np.float32(64.0)  # inputs are mean-subtracted pixels, not unit scale
            b = rng.uniform(-0.05, 0.1, size=c_out).astype(np.float32)
            inits += [numpy_helper.from_array(w, f"{stem}/kernel"), numpy_helper.from_array(b, f"{stem}/bias")]
            pads = [ksize // 2] * 4
            nodes.append(helper.make_node("Conv", [prev, f"{stem}/kernel", f"{stem}/bias"], [f"{stem}/conv"],
                                          kernel_shape=[ksize, ksize], pads=pads, name=stem))
            nodes.append(helper.make_node("Relu", [f"{stem}/conv"], [f"{stem}/relu"], name=f"{stem}_relu"))
            weights[block].append((w, b))
            prev, c_in = f"{stem}/relu", c_out
        pool = f"block{block}_pool"
        nodes.append(helper.make_node("MaxPool", [prev], [pool], kernel_shape=[2, 2], strides=[2, 2], name=pool))
        prev = pool
    nodes.append(helper.make_node("GlobalAveragePool", [prev], ["gap"], name="gap"))
    nodes.append(helper.make_node("Flatten", ["gap"], ["features"], name="flatten"))

    graph = helper.make_graph(
        nodes,
        "vgg16_compact" if compact else "vgg16",
        [helper.make_tensor_value_info("input_1", TensorProto.FLOAT, ["batch", 224, 224, 3])],
        [helper.make_tensor_value_info("features", TensorProto.FLOAT, ["batch", 512])],
        inits,
    )
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", opset)],
                              producer_name="bodvw.toymodel")
    model.ir_version = 8
    onnx.checker.check_model(model)
    if path is not None:
        onnx.save(model, str(path))
    return model, weights
