"""Attack with partially leaked source embeddings (zero-padded prefixes)."""
from femkan.leakage import LeakageSpec, leak

from _common import base_parser, dataset, dump, fit, score, threshold


def main():
    p = base_parser(__doc__)
    p.add_argument("--fractions", default="1.0,0.9,0.7,0.5,0.3,0.1")
    args = p.parse_args()
    fractions = [float(f) for f in args.fractions.split(",")]
    ds, tr, te = dataset(args)
    thr = threshold(ds, args.seed)
    results = {}
    for variant in args.models.split(","):
        model, _ = fit(variant, tr, args)
        results[variant] = {}
        for f in fractions:
            r = score(model, leak(te.source, LeakageSpec(f)), te, thr)
            results[variant][f] = r
            print(f"{variant.upper():4s} leak {f:.1f}  cosine {r['mean_cosine']:.3f}  ASR {r['asr']:.3f}")
    dump(results, args.out)


if __name__ == "__main__":
    main()
