import sys, time, json
sys.path.insert(0, "src")
import numpy as np
from disreid.synth import SynthSpec, generate_corpus, save_corpus, load_corpus, rrs_sample, augment_clip, pk_batches
from disreid.model import DisentangledReidNet, ModelConfig
from disreid.engine import TrainConfig, Trainer, save_checkpoint, load_checkpoint

t0 = time.time()
spec = SynthSpec(num_ids=8, num_cameras=2, tracklets_per_id_per_camera=2,
                 frames_per_tracklet=6, height=32, width=16, seed=7)
corpus = generate_corpus(spec)
print(f"corpus: train={len(corpus.train)} query={len(corpus.query)} gallery={len(corpus.gallery)}  ({time.time()-t0:.2f}s)")

# determinism of rendering
c2 = generate_corpus(spec)
assert all(np.array_equal(a.frames, b.frames) for a, b in zip(corpus.train, c2.train)), "render not deterministic"
print("render deterministic: OK")

# save/load round trip
import tempfile, pathlib
tmp = pathlib.Path(tempfile.mkdtemp())
save_corpus(corpus, tmp / "corpus")
loaded = load_corpus(tmp / "corpus")
assert len(loaded.train) == len(corpus.train)
a = sorted(corpus.train, key=lambda t: (t.person_id, t.camera_id, t.index))
b = sorted(loaded.train, key=lambda t: (t.person_id, t.camera_id, t.index))
assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a, b)), "corpus round trip"
print("corpus save/load round trip: OK")

# rrs + augment + pk
rng = np.random.default_rng(0)
idx = rrs_sample(8, 4, rng)
assert idx.shape == (4,) and all(0 <= i < 8 for i in idx) and list(idx) == sorted(idx)
assert list(rrs_sample(2, 5, rng)) == [0, 1, 1, 1, 1]
clip = corpus.train[0].frames[:4]
aug = augment_clip(clip, rng)
assert aug.shape == clip.shape
batches = list(pk_batches(corpus.train, 2, 2, rng))
print(f"pk default batches/epoch = {len(batches)}; first batch ids = {[t.person_id for t in batches[0]]}")
for batch in batches:
    ids = [t.person_id for t in batch]
    assert len(set(ids)) == 2 and len(ids) == 4

# training smoke: tiny model on this corpus
mconf = ModelConfig(channels=16, strides=(2, 2, 1, 1), num_ids=4, num_cameras=2,
                    input_hw=(32, 16))
model = DisentangledReidNet(mconf, np.random.default_rng(1))
tconf = TrainConfig(epochs=2, p_identities=2, k_clips=2, frames_per_clip=3,
                    batches_per_epoch=2, seed=3)
train_subset = [t for t in corpus.train if t.person_id < 4]
tr = Trainer(model, train_subset, tconf, out_dir=tmp / "run")
t1 = time.time()
hist = tr.run()
print(f"trained {len(hist)} steps in {time.time()-t1:.2f}s; last row: " +
      json.dumps({k: round(v, 4) if isinstance(v, float) else v for k, v in hist[-1].items()}))
rows = [json.loads(l) for l in open(tmp / "run" / "metrics.jsonl")]
assert len(rows) == len(hist)

# checkpoint resume must be bitwise identical to an uninterrupted run
ck = tmp / "ck.zip"
save_checkpoint(ck, tr)
tr.config = TrainConfig(**{**tconf.__dict__, "epochs": 3, "components": tconf.components})
tr.run()
ref = {k: p.data.copy() for k, p in model.parameters().items()}
ref_buf = {k: v.copy() for k, v in model.buffers().items()}

model2 = DisentangledReidNet(mconf, np.random.default_rng(99))   # different init, must be overwritten
tr2 = Trainer(model2, train_subset, tconf, out_dir=None)
meta = load_checkpoint(ck, tr2)
assert meta["epoch"] == 2
tr2.config = TrainConfig(**{**tconf.__dict__, "epochs": 3, "components": tconf.components})
tr2.run()
for k, p in model2.parameters().items():
    assert np.array_equal(p.data, ref[k]), f"param {k} diverged after resume"
for k, v in model2.buffers().items():
    assert np.array_equal(v, ref_buf[k]), f"buffer {k} diverged after resume"
print("checkpoint resume bitwise identical: OK")

# two fresh runs, same seed -> identical history
m3 = DisentangledReidNet(mconf, np.random.default_rng(1))
tr3 = Trainer(m3, train_subset, tconf)
h3 = tr3.run()
m4 = DisentangledReidNet(mconf, np.random.default_rng(1))
tr4 = Trainer(m4, train_subset, tconf)
h4 = tr4.run()
assert h3 == h4, "same-seed runs differ"
assert all(np.array_equal(p.data, q.data) for p, q in
           zip(m3.parameters().values(), m4.parameters().values()))
print("same-seed determinism: OK")
print(f"total smoke time {time.time()-t0:.1f}s")
