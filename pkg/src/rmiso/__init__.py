"""Incremental surrogate minimization (MISO / RMISO) under recurrent sampling."""
