import json, sys, time
sys.path.insert(0, "/root/pkg/tests")
from helpers import run_noisy_benchmark

seed = int(sys.argv[1])
t0 = time.time()
r = run_noisy_benchmark(seed=seed)
out = {
    "seed": seed, "secs": round(time.time() - t0),
    "n_train": r["n_train"], "holdout": len(r["hold_lc"]),
    "fp_rate": round(r["fp_rate"], 4),
    "model": {k: [round(x, 4) for x in v] for k, v in r["model_metrics"].items()},
    "base": {k: [round(x, 4) for x in v] for k, v in r["baseline_metrics"].items()},
    "auc": round(r["auc"], 4),
    "feedback_full": [round(r["feedback_before"].f1, 4), round(r["feedback_after"].f1, 4)],
    "feedback_dhm": [round(r["feedback_dhm_before"].f1, 4), round(r["feedback_dhm_after"].f1, 4)],
}
print(json.dumps(out, indent=1))
with open(f"/root/pkg/.bench/seed{seed}.json", "w") as fh:
    json.dump(out, fh, indent=1)
