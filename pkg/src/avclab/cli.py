"""Command-line pipeline (placeholder, filled in later)."""

def main(argv=None):
    raise SystemExit(2)
