"""Reference external generator script.

Usage::

    python reference.py --save_path out.json --num_samples 100 --seed 7

Writes a tensor-json document with shape (N, 4, 17).  The DP zero
proportions, the achievement label and any feedback text arrive through the
TWOSTAGE_ZERO_PROPS, TWOSTAGE_LABEL and TWOSTAGE_FEEDBACK environment
variables.  Only numpy is required, so the script runs outside the package.
"""

import argparse
import json
import os

import numpy as np

CAPS = np.array([300, 420, 300, 420])
SCALE = {
    "low": [10.0, 20.0, 18.0, 26.0],
    "average": [12.0, 26.0, 22.0, 36.0],
    "high": [14.0, 32.0, 26.0, 48.0],
}
SHAPE = [0.9, 1.3, 1.2, 1.5]


def main(argv=None):
    parser = argparse.ArgumentParser()
    parser.add_argument("--save_path", required=True)
    parser.add_argument("--num_samples", type=int, required=True)
    parser.add_argument("--seed", type=int, required=True)
    args = parser.parse_args(argv)

    label = os.environ.get("TWOSTAGE_LABEL", "average")
    zero_props = json.loads(os.environ.get("TWOSTAGE_ZERO_PROPS", "[0.9, 0.5, 0.55, 0.4]"))
    heavier_tail = "heavy-tail" in os.environ.get("TWOSTAGE_FEEDBACK", "")

    rng = np.random.default_rng(args.seed)
    size = (args.num_samples, 4, 17)
    activity = rng.gamma(1.5 if heavier_tail else 3.0, 1 / (1.5 if heavier_tail else 3.0),
                         size=(args.num_samples, 1, 1))
    scale = np.asarray(SCALE.get(label, SCALE["average"]))[None, :, None] * activity
    positive = rng.gamma(np.broadcast_to(np.asarray(SHAPE)[None, :, None], size),
                         np.broadcast_to(scale, size))
    data = np.clip(np.rint(positive), 1, CAPS[None, :, None])
    data[rng.random(size) < np.asarray(zero_props)[None, :, None]] = 0
    data = data.astype(int)

    if args.save_path.endswith(".npy"):
        np.save(args.save_path, data)
    else:
        with open(args.save_path, "w") as fh:
            json.dump({"shape": list(data.shape), "data": data.ravel().tolist()}, fh)


if __name__ == "__main__":
    main()
