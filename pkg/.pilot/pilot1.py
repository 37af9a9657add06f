import json, time
import numpy as np
import dsdistill as dsd
from dsdistill.train import _train, TrainConfig
from dsdistill.nets import teacher_spec, student_spec
from dsdistill.losses import LossWeights

t_all = time.time()
train = dsd.generate(1000, 2000, 64, 64, 6)
val = dsd.generate(2000, 200, 64, 64, 6)
print("data ready", time.time()-t_all, flush=True)

def run(tag, spec, cfg, teacher=None):
    t0 = time.time()
    ck, rep = _train(spec, train, cfg, teacher=teacher, val_samples=val)
    print(f"{tag}: miou={rep.final['miou']:.4f} acc={rep.final['pixel_acc']:.4f} "
          f"wall={time.time()-t0:.0f}s ema {rep.ema_first:.3f}->{rep.ema_last:.3f}", flush=True)
    return ck, rep

seed = 0
base_cfg = dict(seed=seed, batch_size=8, iterations=2000)
tck, _ = run("teacher", teacher_spec(6), TrainConfig(**base_cfg, weights=LossWeights(0,0,4)))
run("baseline", student_spec(6), TrainConfig(**base_cfg, weights=LossWeights(0,0,4)))
tnet = tck.net()
_, rep = run("psd", student_spec(6), TrainConfig(**base_cfg, weights=LossWeights(1000,0,4)), teacher=tnet)
_, rep = run("csd", student_spec(6), TrainConfig(**base_cfg, weights=LossWeights(0,10,4)), teacher=tnet)
_, rep = run("dsd", student_spec(6), TrainConfig(**base_cfg, weights=LossWeights(1000,10,4)), teacher=tnet)
print("total", time.time()-t_all, flush=True)
