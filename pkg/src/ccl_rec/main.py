"""Main entry point for ccl_rec."""

from .cli import main

if __name__ == "__main__":
    main()
