#!/usr/bin/env python3
"""loract - Main entry point"""
import sys
from loract.cli import main

if __name__ == "__main__":
    sys.exit(main())
