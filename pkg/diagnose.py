"""Scratch: why does ce_id stay at ln(num_ids)?  Not part of the package."""

import sys
import time

sys.path.insert(0, "src")

import numpy as np

from disreid.engine import TrainConfig, Trainer
from disreid.model import DisentangledReidNet, ModelConfig
from disreid.synth import SynthSpec, generate_corpus


def run(tag, components, augment, epochs=40, lr=1e-3, c=16, corpus=None):
    spec = SynthSpec(num_ids=32, num_cameras=4, seed=11)
    corpus = corpus or generate_corpus(spec)
    pids = sorted({t.person_id for t in corpus.train})
    mconf = ModelConfig(channels=c, num_ids=len(pids), num_cameras=4,
                        input_hw=(64, 32))
    model = DisentangledReidNet(mconf, np.random.default_rng(0))
    tconf = TrainConfig(
        epochs=epochs, batches_per_epoch=8, base_lr=lr, lr_step_epochs=1000,
        frames_per_clip=4, seed=0, components=frozenset(components),
        augment=augment,
    )
    tr = Trainer(model, corpus.train, tconf)
    t0 = time.time()
    import calibrate
    for seg in range(epochs // 20):
        import dataclasses
        tr.config = dataclasses.replace(tconf, epochs=20 * (seg + 1))
        tr.run()
        last = tr.history[-1]
        print(f"[{tag}] epoch {tr.epoch} ({time.time()-t0:.0f}s) "
              f"ce_id={last['ce_id']:.3f} tri={last['tri']:.3f} "
              f"total={last['total']:.3f}", flush=True)
        calibrate.crit4_metrics(model, corpus, 4, f"{tag}@{tr.epoch}")
    return model, corpus


if __name__ == "__main__":
    which = sys.argv[1]
    if which == "bare":
        # no optional components, no augmentation: pure ce_id + triplet
        run("bare", (), augment=False, epochs=120)
    elif which == "width":
        spec = SynthSpec(num_ids=32, num_cameras=4, seed=11)
        corpus = generate_corpus(spec)
        run("bare_c32", (), augment=False, epochs=40, c=32, corpus=corpus)
        run("bare_c64", (), augment=False, epochs=40, c=64, corpus=corpus)
    elif which == "full_lowlr":
        comps = ("tlm", "l_lr", "fwg", "l_w", "l_ic", "l_dis", "l_cam", "sao")
        run("full_lowlr", comps, augment=False, epochs=120, lr=5e-4)
    elif which == "full_c64":
        comps = ("tlm", "l_lr", "fwg", "l_w", "l_ic", "l_dis", "l_cam", "sao")
        run("full_c64", comps, augment=False, epochs=120, lr=1e-3, c=64)
    elif which == "full_c64_aug":
        comps = ("tlm", "l_lr", "fwg", "l_w", "l_ic", "l_dis", "l_cam", "sao")
        run("full_c64_aug", comps, augment=True, epochs=120, lr=1e-3, c=64)
    elif which == "bare_aug":
        run("bare_aug", (), augment=True)
    elif which == "dis3":
        # which member of the disentangling group stalls ce_id?
        spec = SynthSpec(num_ids=32, num_cameras=4, seed=11)
        corpus = generate_corpus(spec)
        full = {"tlm", "l_lr", "fwg", "l_w", "l_ic", "l_dis", "l_cam", "sao"}
        for tag, drop in (
            ("+l_dis", {"l_ic", "l_cam"}),
            ("+l_ic", {"l_dis", "l_cam"}),
            ("+l_cam", {"l_dis", "l_ic"}),
        ):
            run(tag, tuple(sorted(full - drop)), augment=False, epochs=40,
                c=64, corpus=corpus)
    elif which == "phase":
        # curriculum: identity losses first, full stack afterwards
        import dataclasses
        spec = SynthSpec(num_ids=32, num_cameras=4, seed=11)
        corpus = generate_corpus(spec)
        base = {"tlm", "l_lr", "fwg", "l_w", "sao"}
        full = base | {"l_ic", "l_dis", "l_cam"}
        mconf = ModelConfig(channels=64, num_ids=16, num_cameras=4,
                            input_hw=(64, 32))
        model = DisentangledReidNet(mconf, np.random.default_rng(0))
        tconf = TrainConfig(epochs=40, batches_per_epoch=8, base_lr=1e-3,
                            lr_step_epochs=1000, frames_per_clip=4, seed=0,
                            components=frozenset(base), augment=False)
        tr = Trainer(model, corpus.train, tconf)
        t0 = time.time()
        import calibrate
        tr.run()
        print(f"[phase:base] epoch {tr.epoch} ({time.time()-t0:.0f}s) "
              f"ce_id={tr.history[-1]['ce_id']:.3f}", flush=True)
        calibrate.crit4_metrics(model, corpus, 4, "phase@40base")
        for seg in range(4):
            tr.config = dataclasses.replace(
                tconf, epochs=40 + 20 * (seg + 1), components=frozenset(full))
            tr.run()
            last = tr.history[-1]
            print(f"[phase:full] epoch {tr.epoch} ({time.time()-t0:.0f}s) "
                  f"ce_id={last['ce_id']:.3f} tri={last['tri']:.3f} "
                  f"dis={last['dis']:.3f} ic={last['ic']:.3f} "
                  f"total={last['total']:.3f}", flush=True)
            calibrate.crit4_metrics(model, corpus, 4, f"phase@{tr.epoch}")
            calibrate.crit6(model, spec, sorted({t.person_id for t in corpus.train}), 4)
    elif which == "loo":
        # leave-one-out at c=64: which component pins ce_id at chance?
        spec = SynthSpec(num_ids=32, num_cameras=4, seed=11)
        corpus = generate_corpus(spec)
        full = {"tlm", "l_lr", "fwg", "l_w", "l_ic", "l_dis", "l_cam", "sao"}
        for tag, drop in (
            ("-tlm", {"tlm", "l_lr"}),
            ("-fwg", {"fwg", "l_w"}),
            ("-sao", {"sao"}),
            ("-dis", {"l_dis", "l_ic", "l_cam"}),
        ):
            run(tag, tuple(sorted(full - drop)), augment=False, epochs=40,
                c=64, corpus=corpus)
    elif which == "singles":
        spec = SynthSpec(num_ids=32, num_cameras=4, seed=11)
        corpus = generate_corpus(spec)
        for comp in (("l_dis", "l_cam"), ("l_cam",), ("tlm",), ("fwg",),
                     ("sao", "l_cam"), ("l_ic",)):
            run("+".join(comp), comp, augment=True, epochs=30, corpus=corpus)
    elif which == "full_nodecay":
        comps = ("tlm", "l_lr", "fwg", "l_w", "l_ic", "l_dis", "l_cam", "sao")
        run("full", comps, augment=True, epochs=40)
    elif which == "feat":
        # feature statistics before any training: is f_id input-dependent?
        spec = SynthSpec(num_ids=32, num_cameras=4, seed=11)
        corpus = generate_corpus(spec)
        mconf = ModelConfig(channels=16, num_ids=16, num_cameras=4,
                            input_hw=(64, 32))
        model = DisentangledReidNet(mconf, np.random.default_rng(0))
        clips = np.stack([t.frames[:4] for t in corpus.train[:24]])
        got = model.extract(clips.astype(np.float64), enabled=frozenset(),
                            need_camera=True)
        f = got["f_id"]
        print("f_id  mean |f|:", np.abs(f).mean(),
              " per-dim std over samples:", f.std(axis=0).mean())
        print("f_id  rel spread:", f.std(axis=0).mean() / (np.abs(f).mean() + 1e-12))
        fc = got["f_cam"]
        print("f_cam mean |f|:", np.abs(fc).mean(),
              " per-dim std over samples:", fc.std(axis=0).mean())
        # same in training mode (per-sample statistics)
        model.train()
        from disreid import tensor as T
        from disreid.tensor import Tensor
        feats = model.forward_clips(clips.astype(np.float64), 4,
                                    enabled=frozenset())
        f = feats.f_id.data
        print("train-mode f_id mean |f|:", np.abs(f).mean(),
              " per-dim std over samples:", f.std(axis=0).mean())
