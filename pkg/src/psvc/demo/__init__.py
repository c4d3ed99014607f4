"""Demo service provider and personal service used by the scenarios."""
