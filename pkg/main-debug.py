#!/usr/bin/env python
from common import meta
# DEBUG logging for every module
meta.debug = True


if __name__ == "__main__":
    import main
    main._start()
