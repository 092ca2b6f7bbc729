# %% [markdown]
# # Artifacts and determinism
#
# Every stage writes one self-describing file: an 8-byte magic, a JSON
# header (kind, array names, shapes, metadata) and a float32 payload. This
# script writes a tiny detector, looks inside the file and shows that a
# rerun with the same seed reproduces it byte for byte.
#
# `python3 notebooks/03_artifacts_and_determinism.py [outdir]`

# %%
import json
import struct
import sys
from pathlib import Path

from ldpatch.core import RandomSource, load_artifact
from ldpatch.detector import GridConfig, save_detector, train_detector
from ldpatch.synthetic import generate_synthetic_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
out.mkdir(parents=True, exist_ok=True)

# %% [markdown]
# ## Seeded randomness
#
# `RandomSource` bundles a numpy and a torch generator built from one seed.
# `child(i)` derives an independent stream, which is how the pipeline gives
# every stage its own randomness without the stages interfering.

# %%
root = RandomSource(7)
print("child seeds:", [root.child(i).seed for i in range(3)])
print("same child twice:", root.child(1).seed == RandomSource(7).child(1).seed)


# %%
def tiny_detector(seed):
    cfg = GridConfig(grid_size=4, image_size=32)
    scenes = generate_synthetic_dataset(64, cfg, RandomSource(seed).child(0))
    return train_detector(scenes, cfg, RandomSource(seed).child(1), epochs=2, batch_size=16, width=8)


save_detector(tiny_detector(3), out / "tiny_a.art", {"note": "first run"})
save_detector(tiny_detector(3), out / "tiny_b.art", {"note": "first run"})
save_detector(tiny_detector(4), out / "tiny_c.art", {"note": "first run"})

# %% [markdown]
# ## Inside the file

# %%
raw = (out / "tiny_a.art").read_bytes()
(n,) = struct.unpack("<Q", raw[8:16])
header = json.loads(raw[16:16 + n])
print("magic:", raw[:8])
print("kind:", header["kind"], "| arrays:", len(header["arrays"]))
print("metadata keys:", sorted(header["meta"]))

kind, arrays, meta = load_artifact(out / "tiny_a.art")
print(kind, sum(a.size for a in arrays.values()), "parameters")

# %% [markdown]
# ## Reproducibility

# %%
a, b, c = [(out / f"tiny_{k}.art").read_bytes() for k in "abc"]
print("same seed identical:", a == b)
print("other seed identical:", a == c)
