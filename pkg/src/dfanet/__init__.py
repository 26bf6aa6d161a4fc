"""Dynamic feature aggregation networks for point clouds."""
