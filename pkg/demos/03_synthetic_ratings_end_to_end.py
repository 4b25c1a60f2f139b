#!/usr/bin/env python3
"""End-to-end comparison on the synthetic rating benchmark.

Trains the partially local algorithm and both baselines on the same
generated data and seed, then scores each the way it would be deployed:
reconstruction evaluation for unseen users, standard evaluation (stored
embeddings, held-out ratings) for the seen-user baselines.  Runs in well
under a minute.
"""

from partialfed.config import load_config
from partialfed.runner import prepare_task, _run_all_repeats

SETTINGS = [
    ("fedrecon + recon eval (unseen users)", {"algorithm": "fedrecon", "eval.regime": "recon"}),
    ("centralized + standard eval (seen)", {"algorithm": "centralized", "eval.regime": "standard"}),
    ("centralized + recon eval (unseen)", {"algorithm": "centralized", "eval.regime": "recon"}),
    ("fedavg + standard eval (seen)", {"algorithm": "fedavg", "eval.regime": "standard"}),
    ("fedavg + recon eval (unseen)", {"algorithm": "fedavg", "eval.regime": "recon"}),
]

print(f"{'setting':40s} {'rmse':>10s} {'accuracy':>10s}")
print("-" * 62)
for name, overrides in SETTINGS:
    config = load_config(None, {"task": "synthetic", "seed": 17, "rounds": 150, **overrides})
    bundle = prepare_task(config)
    _, final, _ = _run_all_repeats(config, bundle)
    rmse, acc = final["test"]["rmse"], final["test"]["accuracy"]
    shown = f"{rmse:10.4f}" if rmse < 100 else "   >100 !!"
    print(f"{name:40s} {shown} {acc:10.4f}")

print(
    "\nReading the table: reconstruction training wins on unseen users; the\n"
    "centralized model only shines on users whose embeddings it trained, and\n"
    "reconstructing from a centralized item matrix performs far worse (here\n"
    "the reconstruction steps are numerically unstable against item vectors\n"
    "never trained for it, hence the blown-up rmse) because nothing trained\n"
    "that matrix to support reconstruction."
)
