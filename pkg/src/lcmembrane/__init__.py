"""Light-cone membrane laboratory: brackets, degenerate waves, Nash-Moser."""
