"""Lane-graph traversal prediction."""
