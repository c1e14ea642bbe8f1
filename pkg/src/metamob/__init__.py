"""Model-based recursive partitioning with mixed-effects trees for IPD meta-analysis."""
