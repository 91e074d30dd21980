import json
import logging
import os
import sys

from docopt import docopt

import deltasparse
from deltasparse.config import DEFAULTS, PRESETS, ExperimentConfig
from deltasparse.exceptions import (
    ConfigError, DeltaSparseError, InvariantViolation, ShapeError,
    TensorFileError)

HELP = """
'deltasparse' runs attention with thresholded key deltas and compares it
with dense attention.

Usage:
  {p} -h
  {p} -v
  {p} gen [-d] [options] <outdir>
  {p} run [-d] [options] [<outdir>]
  {p} sweep [-d] [options] [--thetas=<list>] [--gammas=<list>] [--w-ds=<list>] [--csv=<path>]
  {p} heatmap [-d] [options] [--kind=<kind>] [--head=<h>] [--dense] <path>
  {p} selftest [-d] [--seed=<seed>]

Options:
  -h --help              Show this help message.
  -v --version           Show the version number.
  -d --debug             Show debug messages.
  --config=<file>        Read key = value settings from a file.
  --preset=<name>        Start from a named preset ({presets}).
  --seed=<seed>          Seed of the synthetic generator.
  --n=<n>                Prompt length.
  --d-head=<d>           Head dimension.
  --heads=<h>            Number of heads.
  --decode-steps=<s>     Number of tokens decoded after the prompt.
  --theta=<x>            Delta threshold.
  --gamma=<x>            Prefill window ratio.
  --w-max=<w>            Upper bound of the prefill window.
  --w-d=<w>              Decode window.
  --strategy=<name>      top-down-key, top-down-query or bottom-up-query.
  --key-process=<name>   random-walk, iid-gaussian or file.
  --sigma=<x>            Step size of random-walk keys.
  --scenario=<name>      end-to-end or prefill-only.
  --q-file=<path>        Query tensor file (key-process 'file').
  --k-file=<path>        Key tensor file (key-process 'file').
  --v-file=<path>        Value tensor file (key-process 'file').
  --workers=<w>          Threads running heads in parallel.
  --thetas=<list>        Comma-separated thresholds to sweep.
  --gammas=<list>        Comma-separated window ratios to sweep.
  --w-ds=<list>          Comma-separated decode windows to sweep.
  --csv=<path>           Write sweep rows to this file instead of stdout.
  --kind=<kind>          exactness, scores or probs [default: exactness].
  --head=<h>             The head to dump [default: 0].
  --dense                Dump the maps of dense attention.

Settings are taken from the defaults, then the preset, then the config
file, then the flags. Environment variables are not read.

Exit status:
  0  success
  1  unexpected error
  2  invalid configuration or shapes
  3  tensor file or I/O error
  4  invariant violation or failed selftest

Examples:

- Run the end-to-end preset and write reports to 'out'.

  {p} run --preset=end-to-end out

- Sweep thresholds of a prefill-only run.

  {p} sweep --preset=prefill-theta-sweep --thetas=0.05,0.1,0.2,0.4 --csv=theta.csv

- Dump the exactness map of a short prompt.

  {p} heatmap --n=16 --gamma=0.25 --heads=1 --decode-steps=0 map.csv
""".format(p='deltasparse', presets=', '.join(sorted(PRESETS)))  # noqa: E501


def _parse_list(text, cast):
    if text is None:
        return []

    try:
        return [cast(x) for x in text.split(',') if x.strip() != '']
    except ValueError:
        raise ConfigError("Cannot read the list '{}'.".format(text))


def _experiment_config(args) -> ExperimentConfig:
    overrides = {}
    for key in DEFAULTS:
        flag = '--' + key.replace('_', '-')
        if args.get(flag) is not None:
            overrides[key] = args[flag]

    return ExperimentConfig.from_sources(
        preset=args.get('--preset'),
        config_file=args.get('--config'),
        overrides=overrides)


def _gen(args) -> int:
    from deltasparse.harness import write_json
    from deltasparse.synthetic import gen_synthetic
    from deltasparse.tensorfile import save_tensor

    cfg = _experiment_config(args)
    outdir = args['<outdir>']
    os.makedirs(outdir, exist_ok=True)
    for name, tensor in zip(('q', 'k', 'v'), gen_synthetic(cfg)):
        save_tensor(os.path.join(outdir, '{}.dtns'.format(name)), tensor)

    write_json(os.path.join(outdir, 'config.json'), cfg.as_dict())
    return 0


def _run(args) -> int:
    from deltasparse.harness import run_experiment

    cfg = _experiment_config(args)
    experiment = run_experiment(cfg, output_dir=args['<outdir>'])
    print(json.dumps({
        'prefill': experiment.prefill.as_dict(),
        'decode': experiment.decode.as_dict() if experiment.decode else None,
    }, sort_keys=True))
    return 0


def _sweep(args) -> int:
    from deltasparse.harness import SWEEP_COLUMNS, sweep, write_sweep_csv

    cfg = _experiment_config(args)
    rows = sweep(
        cfg,
        thetas=_parse_list(args['--thetas'], float),
        gammas=_parse_list(args['--gammas'], float),
        w_ds=_parse_list(args['--w-ds'], int),
        path=args['--csv'],
        progress=True)
    if args['--csv'] is None:
        import csv
        writer = csv.writer(sys.stdout)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([
                repr(row[c]) if isinstance(row[c], float) else row[c]
                for c in SWEEP_COLUMNS])

    return 0


def _heatmap(args) -> int:
    from deltasparse.heatmap import (
        dump_heatmap, heatmap_matrix, oracle_heatmap_matrix)
    from deltasparse.hybrid import prefill_attention
    from deltasparse.synthetic import gen_synthetic

    cfg = _experiment_config(args)
    cfg.check()
    q, k, v = gen_synthetic(cfg)
    try:
        head = int(args['--head'])
    except ValueError:
        raise ConfigError("--head must be an integer.")

    if not 0 <= head < q.shape[0]:
        raise ConfigError("There is no head {}.".format(head))

    n = cfg.n
    if args['--dense']:
        matrix = oracle_heatmap_matrix(
            q[head, :n], k[head, :n], args['--kind'])
    else:
        result = prefill_attention(
            q[head, :n], k[head, :n], v[head, :n], cfg.hybrid(),
            compare=False)
        matrix = heatmap_matrix(result, args['--kind'])

    dump_heatmap(matrix, args['<path>'])
    return 0


def _selftest(args) -> int:
    from deltasparse.selftest import run_selftest

    try:
        seed = int(args['--seed'] or 0)
    except ValueError:
        raise ConfigError("--seed must be an integer.")

    failed = 0
    for name, passed, detail in run_selftest(seed=seed):
        print("{:<20s} {} {}".format(
            name, 'ok  ' if passed else 'FAIL', detail))
        failed += 0 if passed else 1

    return 4 if failed else 0


def main():
    args = docopt(HELP)

    if args['--version']:
        print(deltasparse.__version__)
        exit(0)

    if args['--debug']:
        log_level = logging.DEBUG
    else:
        log_level = logging.INFO

    logger = logging.getLogger('deltasparse')
    logger.setLevel(log_level)
    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.DEBUG)
    console_handler.setFormatter(
        logging.Formatter(
            '%(levelname)s:%(name)s:%(lineno)s:%(funcName)s:%(message)s')
    )
    logger.addHandler(console_handler)

    try:
        if args['gen']:
            code = _gen(args)
        elif args['run']:
            code = _run(args)
        elif args['sweep']:
            code = _sweep(args)
        elif args['heatmap']:
            code = _heatmap(args)
        elif args['selftest']:
            code = _selftest(args)
        else:
            code = 1
    except (ConfigError, ShapeError) as e:
        print("Invalid configuration: {}".format(e), file=sys.stderr)
        exit(2)
    except (TensorFileError, OSError) as e:
        print("I/O error: {}".format(e), file=sys.stderr)
        exit(3)
    except InvariantViolation as e:
        print("Invariant violated: {}".format(e), file=sys.stderr)
        exit(4)
    except DeltaSparseError as e:
        print("An error occurred: {}".format(e), file=sys.stderr)
        exit(1)

    exit(code)


if __name__ == '__main__':
    main()
