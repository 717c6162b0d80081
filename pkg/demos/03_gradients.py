# The networks are plain numpy with hand-written backward passes. Check them numerically.
import numpy as np

from avclip.clip_align import ClipAlignModel, TrainConfig, loss_and_grads
from avclip.tensor_nn import MLP, adamw_step, AdamWState, flatten_params, grad_check, unflatten_params

rng = np.random.default_rng(0)

net = MLP.init([6, 16, 16, 4], rng, layer_norm=True, dtype=np.float64)
x = rng.standard_normal((5, 6))
target = rng.standard_normal((5, 4))


def loss_fn(vec):
    net.load_params(unflatten_params(vec, net.params(), keys))
    out, cache = net.forward(x)
    diff = out - target
    _, grads = net.backward(cache, diff / len(x))
    return 0.5 * np.sum(diff ** 2) / len(x), flatten_params(grads, keys)


keys = list(net.params())
p0 = flatten_params(net.params(), keys)
print("MLP + layer norm, max rel err:", grad_check(loss_fn, p0, step=1e-6))

# whole contrastive pipeline at toy size, float64 shadow
cfg = TrainConfig(audio_dim=16, video_dim=32, hidden_dim=16, shared_dim=8)
model = ClipAlignModel.init(cfg, dtype=np.float64)
a, v = rng.standard_normal((8, 16)), rng.standard_normal((8, 32))
like = model.params()
ckeys = list(like)


def clip_fn(vec):
    model.load_params(unflatten_params(vec, like, ckeys))
    loss, grads = loss_and_grads(model, a, v)
    return loss, flatten_params(grads, ckeys)


vec = flatten_params(like, ckeys)
idx = rng.choice(vec.size, 100, replace=False)
print("clip pipeline, max rel err:", grad_check(clip_fn, vec, step=1e-6, indices=idx))

# one AdamW step by hand
w = {"w": np.array([[1.0]])}
adamw_step(AdamWState(lr=0.001, weight_decay=0.01), w, {"w": np.array([[0.0]])})
print("decay only:", w["w"][0, 0])
