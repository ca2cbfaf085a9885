"""Overfit the desk network on one synthetic 16^3 case and report Dice.

    python demos/overfit.py [steps]

Takes roughly 0.5-1 s per step on one CPU core.
"""
import sys

from ssfmamba import data
from ssfmamba.network import ModelConfig
from ssfmamba.train import TrainConfig, predict, score_labels
from ssfmamba.train import train as run_training

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
case = data.synth_case(0)
cfg = TrainConfig(model=ModelConfig(), lr=1e-2, weight_decay=1e-5, momentum=0.99,
                  nesterov=True, clip_norm=1.0, steps=steps)



def show(line):
    step = int(line.split()[0].split("=")[1])
    if step == 1 or step % 20 == 0 or step == steps:
        print(line)


result = run_training(cfg, [case], emit=show, write_checkpoints=False)

model = result.checkpoint.to_model()
for region, (dice, hd95) in score_labels(predict(model, case.image), case.labels).items():
    print(f"{region}: dice={dice:.3f} hd95={hd95:.2f}")
