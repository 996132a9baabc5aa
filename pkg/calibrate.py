"""Calibration: find training settings that satisfy criteria 4/5/6 in budget."""
import sys, time, json
sys.path.insert(0, "src")
import numpy as np
from disreid.synth import SynthSpec, generate_corpus, render_tracklet
from disreid.model import DisentangledReidNet, ModelConfig
from disreid.engine import TrainConfig, Trainer
from disreid.retrieval import evaluate_retrieval, extract_features, probe_accuracy
from disreid.fwg import pseudo_label

def crit4_metrics(model, corpus, t, label=""):
    test = corpus.query + corpus.gallery
    idx = extract_features(model, test, t, need_camera=True)
    na = np.linalg.norm(idx.f_id, axis=1); nb = np.linalg.norm(idx.f_cam, axis=1)
    cos = (idx.f_id * idx.f_cam).sum(1) / np.maximum(na * nb, 1e-24)
    mean_pos_cos = float(np.maximum(cos, 0).mean())
    id_p = probe_accuracy(idx.f_id, idx.person_ids)
    cam_on_id = probe_accuracy(idx.f_id, idx.camera_ids)
    cam_p = probe_accuracy(idx.f_cam, idx.camera_ids)
    res, *_ = evaluate_retrieval(model, corpus.query, corpus.gallery, t)
    print(f"[{label}] cos={mean_pos_cos:.3f} idprobe(f_id)={id_p.accuracy:.3f} "
          f"camprobe(f_cam)={cam_p.accuracy:.3f} camprobe(f_id)={cam_on_id.accuracy:.3f} "
          f"(chance~{1/4:.2f}) mAP={res.mean_ap:.3f} r1={res.rank(1):.3f}", flush=True)
    return dict(cos=mean_pos_cos, id_probe=id_p.accuracy, cam_probe=cam_p.accuracy,
                cam_on_id=cam_on_id.accuracy, map=res.mean_ap, r1=res.rank(1))

def crit6(model, spec, train_pids, t_frames, n_clips=50):
    """Fraction of single-occlusion clips whose occluded frame has min pseudo weight."""
    pids = sorted(train_pids)
    pid_map = {p: i for i, p in enumerate(pids)}
    rng = np.random.default_rng(123)
    hits = 0
    for i in range(n_clips):
        pid = pids[i % len(pids)]
        cam = int(rng.integers(0, spec.num_cameras))
        occ = int(rng.integers(0, t_frames))
        tr = render_tracklet(spec, pid, cam, index=5 + i, occluded_frames={occ})
        clip = tr.frames[:t_frames][None].astype(np.float64)
        got = model.extract(clip, need_camera=False)
        w = pseudo_label(got["frame_vectors"], np.array([pid_map[pid]]),
                        model.id_head.weight.data, mode=model.config.pseudo_mode)[0]
        if int(np.argmin(w)) == occ:
            hits += 1
    print(f"  crit6: occluded frame has min pseudo weight in {hits}/{n_clips}", flush=True)
    return hits / n_clips

def run(tag, spec, mkw, tkw, t=4):
    t0 = time.time()
    corpus = generate_corpus(spec)
    pids = sorted({tr.person_id for tr in corpus.train})
    cams = sorted({tr.camera_id for tr in corpus.train})
    mconf = ModelConfig(num_ids=len(pids), num_cameras=len(cams),
                        input_hw=(spec.height, spec.width), **mkw)
    model = DisentangledReidNet(mconf, np.random.default_rng(tkw.get("seed", 0)))
    tconf = TrainConfig(frames_per_clip=t, **tkw)
    tr = Trainer(model, corpus.train, tconf)
    hist = tr.run()
    t_train = time.time() - t0
    last = hist[-1]
    print(f"== {tag}: {len(hist)} steps in {t_train:.0f}s  "
          f"last: ce_id={last['ce_id']:.3f} tri={last['tri']:.3f} dis={last['dis']:.3f} "
          f"cam={last['ce_cam']:.3f} total={last['total']:.3f}", flush=True)
    m = crit4_metrics(model, corpus, t, tag)
    frac = crit6(model, spec, pids, t)
    m.update(train_seconds=t_train, crit6=frac, steps=len(hist))
    return m, model, corpus

if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "timing"
    if which == "timing":
        spec = SynthSpec(num_ids=32, num_cameras=4, seed=11)
        corpus = generate_corpus(spec)
        pids = sorted({t.person_id for t in corpus.train})
        mconf = ModelConfig(channels=32, num_ids=len(pids), num_cameras=4, input_hw=(64, 32))
        model = DisentangledReidNet(mconf, np.random.default_rng(0))
        print("params:", model.num_parameters())
        tconf = TrainConfig(epochs=1, batches_per_epoch=3, frames_per_clip=4)
        tr = Trainer(model, corpus.train, tconf)
        t0 = time.time(); tr.run(); dt = (time.time() - t0) / 3
        print(f"c=32 step time: {dt:.2f}s", flush=True)
        mconf = ModelConfig(channels=16, num_ids=len(pids), num_cameras=4, input_hw=(64, 32))
        model = DisentangledReidNet(mconf, np.random.default_rng(0))
        print("params:", model.num_parameters())
        tr = Trainer(model, tr.tracklets, tconf)
        t0 = time.time(); tr.run(); dt = (time.time() - t0) / 3
        print(f"c=16 step time: {dt:.2f}s", flush=True)
    elif which == "A":
        spec = SynthSpec(num_ids=32, num_cameras=4, seed=11)
        run("A c32 lr1e-3 e25xb8", spec, dict(channels=32),
            dict(epochs=25, batches_per_epoch=8, base_lr=1e-3, seed=0))
    elif which == "B":
        spec = SynthSpec(num_ids=32, num_cameras=4, seed=11)
        run("B c16 lr2e-3 e30xb8", spec, dict(channels=16),
            dict(epochs=30, batches_per_epoch=8, base_lr=2e-3, seed=0))
    elif which in ("cand16", "cand32"):
        # candidate criterion-4 recipe: full components, no data augmentation,
        # no mid-run decay, longer schedule
        from dataclasses import replace
        spec = SynthSpec(num_ids=32, num_cameras=4, seed=11)
        corpus = generate_corpus(spec)
        pids = sorted({t.person_id for t in corpus.train})
        c = 32 if which == "cand32" else 16
        lr = 1e-3 if which == "cand32" else 2e-3
        mconf = ModelConfig(channels=c, num_ids=len(pids), num_cameras=4,
                            input_hw=(64, 32))
        model = DisentangledReidNet(mconf, np.random.default_rng(0))
        tconf = TrainConfig(epochs=40, batches_per_epoch=8, base_lr=lr,
                            lr_step_epochs=1000, frames_per_clip=4, seed=0,
                            augment=False)
        tr = Trainer(model, corpus.train, tconf)
        t0 = time.time()
        for seg in range(5):
            tr.config = replace(tconf, epochs=40 * (seg + 1))
            tr.run()
            last = tr.history[-1]
            print(f"== {which} epoch {tr.epoch} ({time.time()-t0:.0f}s) "
                  f"ce_id={last['ce_id']:.3f} tri={last['tri']:.3f} "
                  f"dis={last['dis']:.3f} total={last['total']:.3f}", flush=True)
            crit4_metrics(model, corpus, 4, f"{which}@{tr.epoch}")
            crit6(model, spec, pids, 4)
    elif which in ("seg32", "seg16"):
        # segmented long runs: report criterion metrics every 30 epochs
        from dataclasses import replace
        spec = SynthSpec(num_ids=32, num_cameras=4, seed=11)
        corpus = generate_corpus(spec)
        pids = sorted({t.person_id for t in corpus.train})
        c = 32 if which == "seg32" else 16
        lr = 1e-3 if which == "seg32" else 2e-3
        mconf = ModelConfig(channels=c, num_ids=len(pids), num_cameras=4,
                            input_hw=(64, 32))
        model = DisentangledReidNet(mconf, np.random.default_rng(0))
        tconf = TrainConfig(epochs=30, batches_per_epoch=8, base_lr=lr,
                            lr_step_epochs=60, frames_per_clip=4, seed=0)
        tr = Trainer(model, corpus.train, tconf)
        t0 = time.time()
        for seg in range(6):
            tr.config = replace(tconf, epochs=30 * (seg + 1))
            tr.run()
            last = tr.history[-1]
            print(f"== {which} epoch {tr.epoch} ({time.time()-t0:.0f}s) "
                  f"ce_id={last['ce_id']:.3f} tri={last['tri']:.3f} "
                  f"dis={last['dis']:.3f} total={last['total']:.3f}", flush=True)
            crit4_metrics(model, corpus, 4, f"{which}@{tr.epoch}")
            crit6(model, spec, pids, 4)
