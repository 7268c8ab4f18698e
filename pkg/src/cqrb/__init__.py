"""Convex quantile regression with bags for density-flow curves."""
