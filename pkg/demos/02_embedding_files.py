# Encoder outputs live in small binary EMB1 files plus a JSON pairing manifest.
import tempfile
from pathlib import Path

import numpy as np

from avclip import embedding_store as es

rng = np.random.default_rng(0)
audio = es.EmbeddingMatrix("audio", rng.standard_normal((12, 527)).astype(np.float32))
video = es.EmbeddingMatrix("video", rng.standard_normal((12, 512)).astype(np.float32))

tmp = Path(tempfile.mkdtemp())
es.write_embeddings(tmp / "audio.emb", audio)
print("audio.emb is", (tmp / "audio.emb").stat().st_size, "bytes")
back = es.read_embeddings(tmp / "audio.emb")
print("round trip equal:", back == audio)

ds = es.split_pairs(es.PairedDataset(audio, video, es.PairManifest.identity(12)), test_fraction=0.25, seed=1)
print("test rows:", ds.manifest.indices("test"))
es.write_manifest(tmp / "pairs.json", ds.manifest)
print((tmp / "pairs.json").read_text()[:200])

# a wrong width is caught at the boundary
try:
    es.EmbeddingMatrix("audio", np.zeros((3, 500), np.float32))
except ValueError as e:
    print("rejected:", e)
