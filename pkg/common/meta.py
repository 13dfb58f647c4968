name = "triangle-oracle"
version = "1.0.0"

# Set by main-debug.py; --verbose raises the level at runtime instead
debug = False
