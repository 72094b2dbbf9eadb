#!/usr/bin/env python3
"""Entry point for running nrlg as a module."""

from nrlg.cli import main

if __name__ == '__main__':
    main()
