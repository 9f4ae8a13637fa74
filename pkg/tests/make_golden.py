"""Regenerate the golden bitstream vectors in tests/data (run from the repo root).

The coder vectors use integer tables written out literally, so they do not
depend on floating-point behaviour.  The model vector pins a tiny checkpoint,
an input image, its bitstream and the decoded symbols.
"""

import json
from pathlib import Path

import numpy as np

from wdsc import codec
from wdsc.data import save_image, synth_pairs
from wdsc.entropy import CdfTable, pmf_to_cdf
from wdsc.model import WynerModel, save_checkpoint

DATA = Path(__file__).parent / "data"


def coder_vectors():
    rng = np.random.default_rng(2024)
    k = np.arange(-12, 13)
    vectors = []
    for scale, precision in ((0.7, 16), (3.0, 12), (8.0, 8)):
        pmf = np.exp(-np.abs(k) / scale)
        pmf = np.concatenate([[1e-6], pmf, [1e-6]])
        cdf = pmf_to_cdf(pmf, precision)
        table = CdfTable(int(k[0]) - 1, cdf)
        symbols = np.rint(rng.laplace(scale=scale, size=500)).astype(np.int64)
        symbols[::97] = [40, -40, 1000, -3, 0, 7][: symbols[::97].size]
        data = codec.encode(symbols, [table])
        vectors.append({"offset": table.offset, "cdf": cdf.tolist(), "symbols": symbols.tolist(), "bytes": data.hex()})
    header = codec.Header(codec.VARIANT_HYPERPRIOR, 3, 128, 256, 192, 0x0123456789ABCDEF)
    packed = codec.pack(header, [bytes.fromhex(vectors[0]["bytes"]), b""])
    return {"coder": vectors, "container": packed.hex()}


def model_vector():
    model = WynerModel(n=4, seed=7)
    # larger latents so the vector exercises more than a couple of bins
    model.g_ax.layers[-1].weight.data *= 8.0
    model.update_tables()
    pair = next(synth_pairs(5, 1, shape=(3, 64, 64)))
    save_checkpoint(model, DATA / "golden_model.npz")
    save_image(pair.left, DATA / "golden_left.png")
    save_image(pair.right, DATA / "golden_right.png")
    from wdsc.data import load_image

    x = load_image(DATA / "golden_left.png")
    stream = model.compress(x)
    (DATA / "golden_left.wdsc").write_bytes(stream)
    return {"v_hat": model.decode_latents(stream).ravel().tolist()}


if __name__ == "__main__":
    DATA.mkdir(exist_ok=True)
    out = coder_vectors()
    out["model"] = model_vector()
    (DATA / "golden.json").write_text(json.dumps(out, indent=1))
    print("wrote", DATA)
