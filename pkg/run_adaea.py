""" Entry point for training toy zoos and running adaptive ensemble attacks.

    python run_adaea.py --command selftest
    python run_adaea.py --config config.txt --command train
    python run_adaea.py --config config.txt --command campaign --eta -0.3 --beta 10

Use the `--help` flag to see all available options.
"""
import sys

from utilities.cli_utilities import main

if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
