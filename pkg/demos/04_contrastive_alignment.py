# Train the two transformation networks on synthetic pairs and watch retrieval improve.
# Reduced widths so this finishes in a few seconds; the acceptance tests use the full size.
import numpy as np

from avclip.clip_align import ClipAlignModel, TrainConfig, train_clip
from avclip.embedding_store import split_pairs
from avclip.evaluation import retrieval_metrics
from avclip.synthetic_bench import SyntheticSpec, generate, shuffle_negatives

spec = SyntheticSpec(n_pairs=1000, latent_dim=8, audio_dim=64, video_dim=48, hidden_dim=64)
ds, z = generate(spec)
ds = split_pairs(ds, 0.1, seed=0)

cfg = TrainConfig(audio_dim=64, video_dim=48, hidden_dim=128, shared_dim=32, n_layers=4,
                  batch_size=100, epochs=25, seed=0)
print("before:", retrieval_metrics(ClipAlignModel.init(cfg), ds, (1, 5)).recall_at)

model, history = train_clip(ds, cfg)
per_epoch = [np.mean([h[2] for h in history if h[0] == e]) for e in range(cfg.epochs)]
print("epoch loss:", np.round(per_epoch[::5], 3), "->", round(per_epoch[-1], 4))
print("temperature scale:", round(model.temperature_scale, 2))

report = retrieval_metrics(model, ds, (1, 5, 10))
print("after:", report.recall_at, "median rank", report.median_rank)

# control: same model, labels deranged
test = ds.subset("test")
print("deranged labels:", retrieval_metrics(model, shuffle_negatives(test, 0), (1,)).recall_at)
