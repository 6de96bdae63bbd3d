"""
Main entry point for factorlab.
"""

import sys

from cli import run_pipeline


def main():
    """Run the factorlab command line."""
    sys.exit(run_pipeline(sys.argv[1:]))


if __name__ == "__main__":
    main()
