"""Convenience script to run the command-line interface."""

from src.ccl_rec.cli import main

if __name__ == "__main__":
    main()
