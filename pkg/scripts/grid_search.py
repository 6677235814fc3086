"""Print one `analogy-kge train` command per model-selection grid point.

    python -m scripts.grid_search --train wn18/train.txt --valid wn18/valid.txt | while read -r cmd; do $cmd; done
"""

import itertools
import shlex
from argparse import ArgumentParser, Namespace

DIMS = (100, 150, 200)
L2S = (1e-1, 1e-2, 1e-3)
NEG_RATIOS = (3, 6)


def grid_commands(args: Namespace) -> list[str]:
    commands = []
    for dim, l2, neg_ratio in itertools.product(args.dims, args.l2s, args.neg_ratios):
        tag = f"{args.model}_m{dim}_l2{l2:g}_a{neg_ratio}"
        argv = [
            "analogy-kge", "train",
            "--model", args.model,
            "--dim", str(dim),
            "--l2", f"{l2:g}",
            "--neg-ratio", str(neg_ratio),
            "--lr", f"{args.lr:g}",
            "--epochs", str(args.epochs),
            "--train", args.train,
            "--seed", str(args.seed),
            "--out", f"{args.out_dir}/{tag}.kgem",
        ]  # fmt: skip
        if args.valid:
            argv += ["--valid", args.valid]
        if args.test:
            argv += ["--test", args.test]
        commands.append(shlex.join(argv))
    return commands


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(description=__doc__)
    parser.add_argument("--train", dest="train", required=True, type=str)
    parser.add_argument("--valid", dest="valid", default=None, type=str)
    parser.add_argument("--test", dest="test", default=None, type=str)
    parser.add_argument("--model", dest="model", default="analogy", type=str)
    parser.add_argument("--dims", dest="dims", nargs="+", default=DIMS, type=int)
    parser.add_argument("--l2s", dest="l2s", nargs="+", default=L2S, type=float)
    parser.add_argument("--neg-ratios", dest="neg_ratios", nargs="+", default=NEG_RATIOS, type=int)
    parser.add_argument("--lr", dest="lr", default=0.1, type=float)
    parser.add_argument("--epochs", dest="epochs", default=500, type=int)
    parser.add_argument("--seed", dest="seed", default=42, type=int)
    parser.add_argument("--out-dir", dest="out_dir", default="runs", type=str)
    return parser


def main(argv: list[str] | None = None):
    for command in grid_commands(build_parser().parse_args(argv)):
        print(command)


if __name__ == "__main__":
    main()
