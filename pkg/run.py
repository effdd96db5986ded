#!/usr/bin/env python3
"""
Run script for the stcar command-line interface.
"""
import sys

from app.main import main

if __name__ == "__main__":
    sys.exit(main())
