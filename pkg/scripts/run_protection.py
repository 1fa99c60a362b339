"""Train on protected source templates and measure how much identity survives."""
from femkan.protection import protect_batch
from femkan.synth import PairedDataset, split_by_identity, substream_seed

from _common import base_parser, dataset, dump, fit, score, threshold


def main():
    args = base_parser(__doc__).parse_args()
    ds, _, _ = dataset(args)
    thr = threshold(ds, args.seed)
    results = {}
    for scheme in ("mlphash", "polyprotect"):
        src, _ = protect_batch(ds.source, ds.labels, scheme, substream_seed(args.seed, "protect"))
        tr, te = split_by_identity(PairedDataset(ds.labels, src, ds.target), 0.2,
                                   seed=substream_seed(args.seed, "split"))
        for variant in args.models.split(","):
            model, _ = fit(variant, tr, args)
            r = score(model, te.source, te, thr)
            results[f"{scheme}/{variant}"] = r
            print(f"{scheme:11s} {variant.upper():4s} cosine {r['mean_cosine']:.3f}  ASR {r['asr']:.3f}")
    dump(results, args.out)


if __name__ == "__main__":
    main()
