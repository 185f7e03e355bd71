"""Multi-draw benchmark for the A-only cloning recipe (dev tool)."""
import sys
import numpy as np
from twinpick.env import EnvConfig, RegionSpec
from twinpick.synth import record_real_demos
from twinpick.nets import GaussianPolicy
from twinpick.pipeline import run_sft, eval_policy_grid

def bench(tag, draws=(42, 43, 44, 45), n_demo=30, epochs=2500, lr=1e-3, bs=128,
          close_jitter=0.01, place_frac=0.5, noise=0.2, fumble=0.3, sloppy=0.0,
          wd=0.0, net_seed=7, rollouts=10):
    cfg = EnvConfig()
    spec = RegionSpec.default()
    a_cells = sorted(spec.region_a_cells)
    counts = {}
    for i in range(n_demo):
        c = a_cells[i % len(a_cells)]
        counts[c] = counts.get(c, 0) + 1
    A, B = [], []
    for draw in draws:
        demos = record_real_demos(cfg, spec, counts, np.random.default_rng(draw),
                                  close_jitter=close_jitter, place_frac=place_frac,
                                  action_noise=noise, fumble_frac=fumble, sloppy_frac=sloppy)
        pol = GaussianPolicy(11, 4, np.random.default_rng(net_seed))
        run_sft(demos, pol, cfg, epochs=epochs, lr=lr, batch_size=bs, seed=3, weight_decay=wd)
        sm = eval_policy_grid(pol, cfg, spec, rollouts, seed=99)
        A.append(sm.mean_sr(sorted(spec.region_a_cells)))
        B.append(sm.mean_sr(sorted(spec.region_b_cells)))
    print(f"{tag}: A mean={np.mean(A):.2f} min={min(A):.2f} max={max(A):.2f} | B mean={np.mean(B):.2f} max={max(B):.2f}", flush=True)
    return np.mean(A)

if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "r1"
    if which == "r1":
        bench("base ep2500")
        bench("ep4000", epochs=4000)
        bench("ep4000 bs96", epochs=4000, bs=96)
    elif which == "r2":
        bench("noise0.15", epochs=4000, noise=0.15)
        bench("noise0.25", epochs=4000, noise=0.25)
        bench("sloppy0.15", epochs=4000, sloppy=0.15)
    elif which == "r3":
        bench("fumble0.2", epochs=4000, fumble=0.2)
        bench("fumble0.4", epochs=4000, fumble=0.4)
        bench("jit0.015", epochs=4000, close_jitter=0.015)
