"""Train FEM-MLP and FEM-KAN on the synthetic pairs and attack held-out identities."""
from _common import base_parser, dataset, dump, fit, mean_cos, score, threshold


def main():
    args = base_parser(__doc__).parse_args()
    ds, tr, te = dataset(args)
    thr = threshold(ds, args.seed)
    results = {"baseline_cosine": mean_cos(te.source, te.target), "threshold": thr.value}
    print(f"unmapped cosine {results['baseline_cosine']:+.3f}, threshold {thr.value:.3f} @ FAR 0.01")
    for variant in args.models.split(","):
        model, secs = fit(variant, tr, args)
        r = score(model, te.source, te, thr)
        r["train_seconds"] = secs
        results[variant] = r
        print(f"{variant.upper():4s} cosine {r['mean_cosine']:.3f}  ASR {r['asr']:.3f}  ({secs:.0f}s)")
    dump(results, args.out)


if __name__ == "__main__":
    main()
