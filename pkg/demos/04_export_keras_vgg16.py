# %% [markdown]
# # Exporting the ImageNet VGG16 to ONNX
#
# The real pipeline expects the Keras ImageNet VGG16 (no top) as an ONNX file
# with NHWC input and pooling outputs exposed.  This script documents one way
# to produce it; it needs `tensorflow` and `tf2onnx`, which are not
# dependencies of the library itself, so nothing here runs by default.
#
# ```
# pip install tensorflow tf2onnx
# python demos/04_export_keras_vgg16.py vgg16.onnx
# ```

# %%
import sys


def export(out_path: str) -> None:
    import tensorflow as tf
    import tf2onnx

    base = tf.keras.applications.VGG16(weights="imagenet", include_top=False, input_shape=(224, 224, 3))
    taps = [base.get_layer(f"block{i}_pool").output for i in range(1, 6)]
    model = tf.keras.Model(base.input, taps)
    spec = (tf.TensorSpec((None, 224, 224, 3), tf.float32, name="input_1"),)
    tf2onnx.convert.from_keras(model, input_signature=spec, opset=13, output_path=out_path)
    print("wrote", out_path)


# %% [markdown]
# tf2onnx keeps the Keras layer names in the output tensor names
# (for example `block4_pool/MaxPool:0`); `FeatureExtractor` matches the
# `block{i}_pool` path segment, so no renaming is needed.  A quick check:
#
# ```python
# from bodvw import FeatureExtractor
# print(FeatureExtractor("vgg16.onnx").available_layers())  # [1, 2, 3, 4, 5]
# ```
#
# The real-data tests then run with
#
# ```
# BODVW_D4_MANIFEST=/data/d4/manifest.csv BODVW_VGG16_ONNX=vgg16.onnx pytest tests/test_acceptance.py
# ```

# %%
if __name__ == "__main__" and len(sys.argv) > 1:
    export(sys.argv[1])
