"""Hidden-stratification toolkit: subclass discovery by clustering plus group-robust training."""
