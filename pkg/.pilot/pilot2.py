import sys, time
import numpy as np
import dsdistill as dsd
from dsdistill.train import _train, TrainConfig
from dsdistill.nets import teacher_spec, student_spec
from dsdistill.losses import LossWeights

noise = float(sys.argv[1])
iters = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
train = dsd.generate(1000, 2000, 64, 64, 6, noise_sigma=noise)
val = dsd.generate(2000, 200, 64, 64, 6, noise_sigma=noise)

def run(tag, spec, cfg, teacher=None, show_trace=False):
    t0 = time.time()
    ck, rep = _train(spec, train, cfg, teacher=teacher, val_samples=val)
    print(f"noise={noise} {tag}: miou={rep.final['miou']:.4f} wall={time.time()-t0:.0f}s", flush=True)
    if show_trace:
        for row in rep.loss_trace[::4]:
            print(f"   it={row['iteration']:5d} ce={row['ce']:.4f} psd={row['psd']:.5f} csd={row['csd']:.5f} tot={row['total']:.4f}", flush=True)
    return ck, rep

seed = 0
bc = dict(seed=seed, batch_size=8, iterations=iters, log_interval=100)
tck, _ = run("teacher", teacher_spec(6), TrainConfig(**bc, weights=LossWeights(0,0,4)))
run("baseline", student_spec(6), TrainConfig(**bc, weights=LossWeights(0,0,4)))
tnet = tck.net()
run("psd", student_spec(6), TrainConfig(**bc, weights=LossWeights(1000,0,4)), teacher=tnet, show_trace=True)
run("csd", student_spec(6), TrainConfig(**bc, weights=LossWeights(0,10,4)), teacher=tnet)
run("dsd", student_spec(6), TrainConfig(**bc, weights=LossWeights(1000,10,4)), teacher=tnet)
