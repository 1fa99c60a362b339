"""Loss ablation: PD only, PD + CED, and the full joint loss."""
from femkan.fem import LOSS_PRESETS

from _common import base_parser, dataset, dump, fit, score, threshold


def main():
    args = base_parser(__doc__).parse_args()
    ds, tr, te = dataset(args)
    thr = threshold(ds, args.seed)
    results = {}
    for preset in ("pd", "pd+ced", "full"):
        for variant in args.models.split(","):
            model, _ = fit(variant, tr, args, lambdas=LOSS_PRESETS[preset])
            r = score(model, te.source, te, thr)
            results[f"{preset}/{variant}"] = r
            print(f"{preset:7s} {variant.upper():4s} cosine {r['mean_cosine']:.3f}  ASR {r['asr']:.3f}")
    dump(results, args.out)


if __name__ == "__main__":
    main()
