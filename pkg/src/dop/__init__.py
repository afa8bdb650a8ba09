"""Q-pruned UCT planning with aggregated TD learning."""
