import shlex

from scripts.grid_search import build_parser, grid_commands, main


def test_default_grid_covers_every_point():
    commands = grid_commands(build_parser().parse_args(["--train", "wn18/train.txt", "--valid", "wn18/valid.txt"]))
    assert len(commands) == 3 * 3 * 2
    argv = shlex.split(commands[0])
    assert argv[:2] == ["analogy-kge", "train"]
    assert argv[argv.index("--dim") + 1] == "100"
    assert argv[argv.index("--valid") + 1] == "wn18/valid.txt"
    assert "--test" not in argv
    assert len({shlex.split(c)[shlex.split(c).index("--out") + 1] for c in commands}) == len(commands)


def test_main_prints_commands(capsys):
    main(["--train", "my data/train.txt", "--dims", "16", "--l2s", "0.001", "--neg-ratios", "3"])
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1
    argv = shlex.split(lines[0])
    assert argv[argv.index("--train") + 1] == "my data/train.txt"
    assert argv[argv.index("--out") + 1] == "runs/analogy_m16_l20.001_a3.kgem"
