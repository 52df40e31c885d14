"""First-level code distribution with biased versus debiased alignment.

    python scripts/codebook_uniformity.py [--seed 0] [--synth configs/synth_desk.json] [--train configs/train_desk.json]

Trains the ``biased`` and ``full`` variants on one seed, then prints usage rate,
perplexity and the mass of each frequency-sorted tenth of the codebook for users
and ads.
"""

import argparse
import warnings
from dataclasses import replace

from dasid import evalsuite as ev
from dasid import experiments as ex
from dasid.alignment import NegativeTruncationWarning
from dasid.synthdata import SynthConfig, generate
from dasid.trainer import TrainConfig, fit


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--synth", default="configs/synth_desk.json")
    p.add_argument("--train", default="configs/train_desk.json")
    args = p.parse_args()
    warnings.simplefilter("ignore", NegativeTruncationWarning)
    data = generate(replace(SynthConfig.from_json(args.synth), seed=args.seed)).to_dataset()
    base = replace(TrainConfig.from_json(args.train), seed=args.seed)
    for name in ("biased", "full"):
        model = fit(data, ex.variant_config(base, name)).model
        reps = ev.entity_representations(model, data)
        print(f"\n{name}")
        for side, codes in (("user", reps.user_codes), ("ad", reps.ad_codes)):
            rep = ev.codebook_stats(codes, 1, base.N)
            groups = " ".join(f"{m:.3f}" for m in rep.group_mass)
            print(f"  {side:<5} usage {rep.usage_rate:.3f}  perplexity {rep.perplexity:7.2f}  groups [{groups}]")


if __name__ == "__main__":
    main()
