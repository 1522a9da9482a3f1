#!/usr/bin/env python

from hnk.main import main

if __name__ == "__main__":
    main()
