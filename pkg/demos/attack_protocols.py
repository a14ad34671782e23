"""Three ways to attack a purifier, on one trained run directory.

Train first (about half an hour on one CPU core):

    for cmd in train-classifier train-topoae train-reformer; do
        toporeformer $cmd --config demos/desk.json --out runs/desk
    done
    python demos/attack_protocols.py runs/desk [per_class]   # 10/class: ~10 min

The same C&W or PGD budget lands very differently depending on what the
attacker is allowed to differentiate:

* oblivious: examples are crafted on the bare classifier and only then
  pushed through each defense stage. This is the setting in which the
  ablation ladder shows a gain.
* white-box: gradients flow through the purifier as well. The purifier
  is a smooth network, so nothing stops them.
* adaptive: BPDA replaces the purifier with identity on the backward
  pass; EOT averages gradients over the VAE's sampling noise.
"""
import json
import sys
import time
from pathlib import Path

from toporeformer.attacks import AttackConfig
from toporeformer.cli import eval_subset, load_bundle, load_split, pipeline_config, resolve_config
from toporeformer.pipeline import ablation_run

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/desk")
per_class = int(sys.argv[2]) if len(sys.argv) > 2 else 10

tree = resolve_config(json.loads((out / "resolved_config.json").read_text()))
test = eval_subset(load_split(tree, "test"), per_class)
cfg = pipeline_config(tree)
bundle = load_bundle(out, tree, test.num_classes, require=("classifier.trfm",))

attacks = {
    "clean": AttackConfig(kind="none"),
    "C&W oblivious": AttackConfig(kind="cw", c=10.0, steps=200, craft_on="classifier"),
    "C&W white-box": AttackConfig(kind="cw", c=10.0, steps=200),
    "PGD 0.3 white-box": AttackConfig(kind="pgd", eps=0.3),
    "BPDA-PGD 0.3": AttackConfig(kind="bpda_pgd", eps=0.3),
    "EOT-PGD 0.3": AttackConfig(kind="eot_pgd", eps=0.3, eot_samples=4),
}
stages = ("No Defense", "+ TopoAE", "+ Warmup")

print(f"{len(test)} test images, macro F1 per stage")
print(f"{'':>18}" + "".join(f"{s:>12}" for s in stages))
for name, attack in attacks.items():
    t0 = time.perf_counter()
    report = ablation_run(test, [attack], bundle, cfg, stages=stages)
    f1 = [s["attacks"][0]["f1_macro"] for s in report["stages"]]
    print(f"{name:>18}" + "".join(f"{v:12.3f}" for v in f1) + f"   ({time.perf_counter() - t0:.0f}s)")
