"""Long-tail sigmoid losses with background loss dropping, plus diagnostics."""
