"""Graph convolutional networks with pluggable robust aggregation."""
